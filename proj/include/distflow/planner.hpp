// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "distflow/dag.hpp"
#include "distflow/errors.hpp"
#include "distflow/topology.hpp"

namespace distflow {

// Linearized execution program: a total order over the graph's nodes that is
// also a valid topological order.
struct TaskChain {
  std::string source_graph;
  std::vector<NodeSpec> nodes;  // func_tag resolved to the dispatch key at bind time

  bool operator==(const TaskChain&) const = default;
};

// Logical depth of every node: 0 for roots, otherwise 1 + max over deps
// (longest path from any root).
inline std::map<std::string, uint32_t> compute_depths(const DagGraph& g) {
  std::vector<std::string> cycle;
  if (detail::dag_has_cycle(g, &cycle)) {
    std::string ids;
    for (const auto& id : cycle) {
      if (!ids.empty()) ids += ", ";
      ids += id;
    }
    throw CycleError("graph has a cycle through: " + ids);
  }

  std::unordered_map<std::string, const NodeSpec*> by_id;
  for (const auto& n : g.nodes) by_id.emplace(n.node_id, &n);

  std::map<std::string, uint32_t> depth;
  // Repeated relaxation; graphs are small (workflow-sized), O(V*E) is fine.
  bool changed = true;
  for (const auto& n : g.nodes) depth[n.node_id] = 0;
  while (changed) {
    changed = false;
    for (const auto& n : g.nodes) {
      uint32_t d = 0;
      for (const auto& dep : n.deps) {
        auto it = by_id.find(dep);
        if (it == by_id.end()) continue;
        d = std::max(d, depth[dep] + 1);
      }
      if (d != depth[n.node_id]) {
        depth[n.node_id] = d;
        changed = true;
      }
    }
  }
  return depth;
}

// Serialize the graph into a single chain: depth ascending, declaration order
// as the tie-break. Deterministic; the result is a topological order.
inline TaskChain serialize_graph(const DagGraph& g) {
  auto depth = compute_depths(g);

  std::vector<size_t> order(g.nodes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return depth[g.nodes[a].node_id] < depth[g.nodes[b].node_id];
  });

  TaskChain chain;
  chain.source_graph = g.name;
  for (size_t i : order) chain.nodes.push_back(g.nodes[i]);
  return chain;
}

// Per-worker execution plan for the whole cluster.
struct WorkerPlan {
  ClusterTopology topology;
  std::vector<TaskChain> chains;              // distinct chains
  std::vector<uint32_t> chain_of_rank;        // rank -> index into chains
  std::map<std::string, ParallelLayout> layouts;  // node_id -> stage layout

  const TaskChain& chain_for(uint32_t rank) const { return chains[chain_of_rank[rank]]; }
  bool single_chain() const { return chains.size() == 1; }

  const ParallelLayout& layout_of(const std::string& node_id) const {
    auto it = layouts.find(node_id);
    if (it == layouts.end()) throw UnknownStageError("no layout for stage '" + node_id + "'");
    return it->second;
  }
};

struct GroupAssignment {
  uint32_t first_rank = 0;
  uint32_t last_rank = 0;  // inclusive
  TaskChain chain;
};

namespace detail {

inline void check_stage_layouts(const std::map<std::string, ParallelLayout>& layouts,
                                const ClusterTopology& topo,
                                const std::vector<const TaskChain*>& chains) {
  for (const TaskChain* chain : chains) {
    for (const auto& n : chain->nodes) {
      auto it = layouts.find(n.node_id);
      if (it == layouts.end()) {
        throw LayoutError("no layout declared for stage '" + n.node_id + "'");
      }
      check_layout(it->second, topo, n.node_id.c_str());
    }
  }
}

}  // namespace detail

// Default mode: one chain replicated to every rank.
inline WorkerPlan assign_chains(const TaskChain& chain, const ClusterTopology& topo,
                                const std::map<std::string, ParallelLayout>& layouts) {
  topo.validate();
  detail::check_stage_layouts(layouts, topo, {&chain});
  WorkerPlan plan;
  plan.topology = topo;
  plan.chains = {chain};
  plan.chain_of_rank.assign(topo.world_size(), 0);
  plan.layouts = layouts;
  return plan;
}

// Group mode: explicit rank ranges, each with its own chain. The ranges must
// partition [0, world_size) exactly.
inline WorkerPlan assign_chains(const std::vector<GroupAssignment>& groups,
                                const ClusterTopology& topo,
                                const std::map<std::string, ParallelLayout>& layouts) {
  topo.validate();
  if (groups.empty()) throw CoverageError("group mode requires at least one rank range");

  std::vector<const TaskChain*> chain_ptrs;
  chain_ptrs.reserve(groups.size());
  for (const auto& g : groups) chain_ptrs.push_back(&g.chain);
  detail::check_stage_layouts(layouts, topo, chain_ptrs);

  WorkerPlan plan;
  plan.topology = topo;
  plan.chain_of_rank.assign(topo.world_size(), UINT32_MAX);
  for (const auto& g : groups) {
    if (g.last_rank < g.first_rank || g.last_rank >= topo.world_size()) {
      throw CoverageError("rank range " + std::to_string(g.first_rank) + "-" +
                          std::to_string(g.last_rank) + " is out of bounds for world_size " +
                          std::to_string(topo.world_size()));
    }
    const uint32_t chain_index = static_cast<uint32_t>(plan.chains.size());
    plan.chains.push_back(g.chain);
    for (uint32_t r = g.first_rank; r <= g.last_rank; ++r) {
      if (plan.chain_of_rank[r] != UINT32_MAX) {
        throw CoverageError("rank " + std::to_string(r) + " assigned to more than one chain");
      }
      plan.chain_of_rank[r] = chain_index;
    }
  }
  for (uint32_t r = 0; r < topo.world_size(); ++r) {
    if (plan.chain_of_rank[r] == UINT32_MAX) {
      throw CoverageError("rank " + std::to_string(r) + " not covered by any chain");
    }
  }
  plan.layouts = layouts;
  return plan;
}

// Diagnostic form emitted by --dump-plan.
inline nlohmann::json plan_to_json(const WorkerPlan& plan) {
  nlohmann::json ranks = nlohmann::json::object();
  for (uint32_t r = 0; r < plan.topology.world_size(); ++r) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& n : plan.chain_for(r).nodes) ids.push_back(n.node_id);
    ranks[std::to_string(r)] = std::move(ids);
  }
  nlohmann::json layouts = nlohmann::json::object();
  for (const auto& [id, l] : plan.layouts) {
    layouts[id] = {{"dp", l.dp_size}, {"tp", l.tp_size}};
  }
  return nlohmann::json{{"ranks", std::move(ranks)}, {"layouts", std::move(layouts)}};
}

}  // namespace distflow
