// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "distflow/errors.hpp"

namespace distflow {

enum class Role { ACTOR, CRITIC, REWARD, REFERENCE, NONE };
enum class NodeType { MODEL_INFERENCE, MODEL_TRAIN, COMPUTE };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::ACTOR: return "ACTOR";
    case Role::CRITIC: return "CRITIC";
    case Role::REWARD: return "REWARD";
    case Role::REFERENCE: return "REFERENCE";
    case Role::NONE: return "NONE";
  }
  return "?";
}

inline const char* to_string(NodeType t) {
  switch (t) {
    case NodeType::MODEL_INFERENCE: return "MODEL_INFERENCE";
    case NodeType::MODEL_TRAIN: return "MODEL_TRAIN";
    case NodeType::COMPUTE: return "COMPUTE";
  }
  return "?";
}

inline Role role_from_string(const std::string& s) {
  if (s == "ACTOR") return Role::ACTOR;
  if (s == "CRITIC") return Role::CRITIC;
  if (s == "REWARD") return Role::REWARD;
  if (s == "REFERENCE") return Role::REFERENCE;
  if (s == "NONE") return Role::NONE;
  throw SchemaError("unknown role '" + s + "'");
}

inline NodeType node_type_from_string(const std::string& s) {
  if (s == "MODEL_INFERENCE") return NodeType::MODEL_INFERENCE;
  if (s == "MODEL_TRAIN") return NodeType::MODEL_TRAIN;
  if (s == "COMPUTE") return NodeType::COMPUTE;
  throw SchemaError("unknown node type '" + s + "'");
}

// One computational step of the workflow.
struct NodeSpec {
  std::string node_id;
  Role role = Role::NONE;
  NodeType node_type = NodeType::COMPUTE;
  std::optional<std::string> func_tag;  // dispatch override; default key is (role, type)
  std::vector<std::string> deps;

  // Registry key this node dispatches on.
  std::string dispatch_key() const {
    if (func_tag) return *func_tag;
    return std::string(to_string(role)) + "/" + to_string(node_type);
  }

  bool operator==(const NodeSpec&) const = default;
};

// Declaration order of `nodes` is significant: the planner uses it as the
// tie-break among equal-depth nodes.
struct DagGraph {
  std::string name;
  std::vector<NodeSpec> nodes;

  const NodeSpec* find(const std::string& id) const {
    for (const auto& n : nodes) {
      if (n.node_id == id) return &n;
    }
    return nullptr;
  }

  bool operator==(const DagGraph&) const = default;
};

struct ValidationIssue {
  std::string node_id;  // empty when the issue is graph-wide
  std::string code;
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<ValidationIssue> issues;

  void add(std::string node_id, std::string code, std::string message) {
    ok = false;
    issues.push_back({std::move(node_id), std::move(code), std::move(message)});
  }
};

namespace detail {

// Cycle detection by explicit three-color DFS over the dependency edges.
inline bool dag_has_cycle(const DagGraph& g, std::vector<std::string>* cycle_nodes) {
  std::unordered_map<std::string, int> color;  // 0 white, 1 gray, 2 black
  std::unordered_map<std::string, const NodeSpec*> by_id;
  for (const auto& n : g.nodes) by_id.emplace(n.node_id, &n);

  std::vector<std::string> stack;
  bool found = false;

  // Iterative DFS so deep graphs cannot overflow the call stack.
  struct Frame {
    const NodeSpec* node;
    size_t next_dep;
  };
  for (const auto& start : g.nodes) {
    if (color[start.node_id] != 0 || found) continue;
    std::vector<Frame> frames{{&start, 0}};
    color[start.node_id] = 1;
    stack.push_back(start.node_id);
    while (!frames.empty() && !found) {
      Frame& f = frames.back();
      if (f.next_dep < f.node->deps.size()) {
        const std::string& dep = f.node->deps[f.next_dep++];
        auto it = by_id.find(dep);
        if (it == by_id.end()) continue;  // dangling dep, reported separately
        int& c = color[dep];
        if (c == 1) {
          // Found a back edge; report the nodes on the cycle.
          found = true;
          if (cycle_nodes) {
            auto pos = std::find(stack.begin(), stack.end(), dep);
            cycle_nodes->assign(pos, stack.end());
          }
        } else if (c == 0) {
          c = 1;
          stack.push_back(dep);
          frames.push_back({it->second, 0});
        }
      } else {
        color[f.node->node_id] = 2;
        stack.pop_back();
        frames.pop_back();
      }
    }
  }
  return found;
}

}  // namespace detail

// Pure check; all findings come back as data, nothing throws.
inline ValidationReport validate_dag(const DagGraph& g) {
  ValidationReport report;

  if (g.nodes.empty()) {
    report.add("", "EMPTY", "graph has no nodes");
    return report;
  }

  std::unordered_set<std::string> seen;
  for (const auto& n : g.nodes) {
    if (!seen.insert(n.node_id).second) {
      report.add(n.node_id, "DUP_ID", "duplicate node_id '" + n.node_id + "'");
    }
  }

  for (const auto& n : g.nodes) {
    for (const auto& dep : n.deps) {
      if (!seen.count(dep)) {
        report.add(n.node_id, "DANGLING_DEP",
                   "node '" + n.node_id + "' depends on undeclared node '" + dep + "'");
      }
    }
    if (n.role == Role::NONE && n.node_type != NodeType::COMPUTE) {
      report.add(n.node_id, "NONE_ROLE_MISUSE",
                 "role NONE is only permitted for COMPUTE nodes");
    }
  }

  bool has_root = false;
  for (const auto& n : g.nodes) {
    if (n.deps.empty()) has_root = true;
  }
  if (!has_root) {
    report.add("", "NO_ROOT", "graph has no node with empty deps");
  }

  std::vector<std::string> cycle;
  if (detail::dag_has_cycle(g, &cycle)) {
    std::string ids;
    for (const auto& id : cycle) {
      if (!ids.empty()) ids += ", ";
      ids += id;
    }
    report.add(cycle.empty() ? "" : cycle.front(), "CYCLE", "cycle through: " + ids);
  }

  return report;
}

// --- config document <-> DagGraph -------------------------------------------
//
// Document form: {"name": str, "nodes": [{"id": str, "role": ..., "type": ...,
// "func": str?, "deps": [str]}]}. Unknown keys are rejected.

inline DagGraph dag_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw SchemaError("top-level document must be an object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "name" && key != "nodes") throw SchemaError("unknown top-level key '" + key + "'");
  }
  if (!doc.contains("name") || !doc["name"].is_string()) {
    throw SchemaError("missing or non-string 'name'");
  }
  if (!doc.contains("nodes") || !doc["nodes"].is_array()) {
    throw SchemaError("missing or non-array 'nodes'");
  }
  DagGraph g;
  g.name = doc["name"].get<std::string>();
  if (doc["nodes"].empty()) throw SchemaError("'nodes' must not be empty");

  std::unordered_set<std::string> ids;
  for (const auto& jn : doc["nodes"]) {
    if (!jn.is_object()) throw SchemaError("node entries must be objects");
    for (const auto& [key, _] : jn.items()) {
      if (key != "id" && key != "role" && key != "type" && key != "func" && key != "deps") {
        throw SchemaError("unknown node key '" + key + "'");
      }
    }
    NodeSpec n;
    if (!jn.contains("id") || !jn["id"].is_string()) throw SchemaError("node missing string 'id'");
    n.node_id = jn["id"].get<std::string>();
    if (!jn.contains("role") || !jn["role"].is_string()) {
      throw SchemaError("node '" + n.node_id + "' missing string 'role'");
    }
    n.role = role_from_string(jn["role"].get<std::string>());
    if (!jn.contains("type") || !jn["type"].is_string()) {
      throw SchemaError("node '" + n.node_id + "' missing string 'type'");
    }
    n.node_type = node_type_from_string(jn["type"].get<std::string>());
    if (jn.contains("func")) {
      if (!jn["func"].is_string()) throw SchemaError("node '" + n.node_id + "' has non-string 'func'");
      n.func_tag = jn["func"].get<std::string>();
    }
    if (!jn.contains("deps") || !jn["deps"].is_array()) {
      throw SchemaError("node '" + n.node_id + "' missing array 'deps'");
    }
    for (const auto& d : jn["deps"]) {
      if (!d.is_string()) throw SchemaError("node '" + n.node_id + "' has non-string dep");
      n.deps.push_back(d.get<std::string>());
    }
    if (!ids.insert(n.node_id).second) {
      throw SchemaError("duplicate node id '" + n.node_id + "'");
    }
    g.nodes.push_back(std::move(n));
  }

  // Dangling dependencies are a schema violation at parse time.
  for (const auto& n : g.nodes) {
    for (const auto& d : n.deps) {
      if (!ids.count(d)) {
        throw SchemaError("node '" + n.node_id + "' depends on undeclared node '" + d + "'");
      }
    }
  }
  return g;
}

inline DagGraph parse_dag_config(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SyntaxError(std::string("malformed DAG document: ") + e.what());
  }
  return dag_from_json(doc);
}

inline nlohmann::json dag_to_json(const DagGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json jn;
    jn["id"] = n.node_id;
    jn["role"] = to_string(n.role);
    jn["type"] = to_string(n.node_type);
    if (n.func_tag) jn["func"] = *n.func_tag;
    jn["deps"] = n.deps;
    nodes.push_back(std::move(jn));
  }
  return nlohmann::json{{"name", g.name}, {"nodes", std::move(nodes)}};
}

inline std::string serialize_dag(const DagGraph& g) { return dag_to_json(g).dump(2); }

// --- built-in presets --------------------------------------------------------

enum class Algorithm { PPO, GRPO };

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "PPO" || s == "ppo") return Algorithm::PPO;
  if (s == "GRPO" || s == "grpo") return Algorithm::GRPO;
  throw SchemaError("unknown algorithm '" + s + "'");
}

inline DagGraph preset_dag(Algorithm algo) {
  auto node = [](std::string id, Role r, NodeType t, std::string func,
                 std::vector<std::string> deps) {
    NodeSpec n;
    n.node_id = std::move(id);
    n.role = r;
    n.node_type = t;
    n.func_tag = std::move(func);
    n.deps = std::move(deps);
    return n;
  };
  DagGraph g;
  switch (algo) {
    case Algorithm::PPO:
      g.name = "ppo";
      g.nodes = {
          node("actor_generate", Role::ACTOR, NodeType::MODEL_INFERENCE, "actor_generate", {}),
          node("ref_inference", Role::REFERENCE, NodeType::MODEL_INFERENCE, "ref_logprob",
               {"actor_generate"}),
          node("critic_inference", Role::CRITIC, NodeType::MODEL_INFERENCE, "value_inference",
               {"actor_generate"}),
          node("reward_compute", Role::REWARD, NodeType::COMPUTE, "reward_compute",
               {"actor_generate"}),
          node("advantage_compute", Role::NONE, NodeType::COMPUTE, "ppo_advantage",
               {"ref_inference", "critic_inference", "reward_compute"}),
          node("actor_train", Role::ACTOR, NodeType::MODEL_TRAIN, "train_actor",
               {"advantage_compute"}),
          node("critic_train", Role::CRITIC, NodeType::MODEL_TRAIN, "train_critic",
               {"advantage_compute"}),
      };
      break;
    case Algorithm::GRPO:
      g.name = "grpo";
      g.nodes = {
          node("actor_generate", Role::ACTOR, NodeType::MODEL_INFERENCE, "actor_generate", {}),
          node("ref_inference", Role::REFERENCE, NodeType::MODEL_INFERENCE, "ref_logprob",
               {"actor_generate"}),
          node("reward_compute", Role::REWARD, NodeType::COMPUTE, "reward_compute",
               {"actor_generate"}),
          node("group_advantage_compute", Role::NONE, NodeType::COMPUTE, "group_advantage",
               {"ref_inference", "reward_compute"}),
          node("actor_train", Role::ACTOR, NodeType::MODEL_TRAIN, "train_actor",
               {"group_advantage_compute"}),
      };
      break;
  }
  return g;
}

}  // namespace distflow
