// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distflow/central.hpp"
#include "distflow/dag.hpp"
#include "distflow/data_plane.hpp"
#include "distflow/functions.hpp"
#include "distflow/oracle.hpp"
#include "distflow/planner.hpp"
#include "distflow/transport.hpp"
#include "distflow/worker.hpp"

namespace distflow {

enum class RunMode { DISTRIBUTED, CENTRAL };

inline const char* to_string(RunMode m) {
  return m == RunMode::DISTRIBUTED ? "distributed" : "central";
}

inline RunMode run_mode_from_string(const std::string& s) {
  if (s == "distributed") return RunMode::DISTRIBUTED;
  if (s == "central") return RunMode::CENTRAL;
  throw SchemaError("unknown mode '" + s + "'");
}

struct RunConfig {
  std::string name = "run";
  ClusterTopology topo{1, 4};
  Backend backend = Backend::INPROC;
  RunMode mode = RunMode::DISTRIBUTED;
  std::string algorithm = "grpo";  // preset name; empty when dag_path is set
  std::string dag_path;
  std::map<std::string, ParallelLayout> layouts;  // dp_size 0 = derive world/tp
  std::optional<ParallelLayout> default_layout;
  uint64_t global_batch = 16;
  uint32_t iterations = 5;  // measured
  uint32_t warmup = 2;
  uint64_t seed = 1;
  DatasetSpec dataset;  // synthetic_n 0 = derive from global batch
  GenParams gen;
  CostModel cost;
  double advantage_eps = 1e-6;
  std::optional<uint64_t> controller_capacity_bytes;
  bool shuffle = false;
};

// --- config JSON ------------------------------------------------------------

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const char* what,
                                std::initializer_list<const char*> allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw SchemaError(std::string(what) + ": unknown key '" + it.key() + "'");
  }
}

inline ParallelLayout layout_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw SchemaError(std::string(what) + ": expected object");
  reject_unknown_keys(j, what, {"dp", "tp"});
  ParallelLayout l;
  l.dp_size = j.value("dp", 0u);
  l.tp_size = j.value("tp", 1u);
  return l;
}

inline TokenDist token_dist_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, "response_tokens", {"kind", "value", "min", "max"});
  TokenDist d;
  const std::string kind = j.value("kind", "constant");
  if (kind == "constant") {
    d.kind = TokenDist::Kind::CONSTANT;
    d.value = j.value("value", 128u);
  } else if (kind == "uniform") {
    d.kind = TokenDist::Kind::UNIFORM;
    d.min = j.value("min", 64u);
    d.max = j.value("max", 192u);
  } else {
    throw SchemaError("response_tokens: unknown kind '" + kind + "'");
  }
  return d;
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("run config: expected a JSON object");
  detail::reject_unknown_keys(
      j, "run config",
      {"name", "topology", "backend", "mode", "algorithm", "dag", "layouts", "default_layout",
       "global_batch", "iterations", "warmup", "seed", "dataset", "generation", "cost_model",
       "advantage_eps", "controller_capacity_bytes", "shuffle"});
  RunConfig cfg;
  cfg.name = j.value("name", "run");
  if (j.contains("topology")) {
    const auto& t = j.at("topology");
    detail::reject_unknown_keys(t, "topology", {"nodes", "workers_per_node"});
    cfg.topo.num_nodes = t.value("nodes", 1u);
    cfg.topo.workers_per_node = t.value("workers_per_node", 4u);
  }
  cfg.backend = backend_from_string(j.value("backend", "inproc"));
  cfg.mode = run_mode_from_string(j.value("mode", "distributed"));
  if (j.contains("dag")) {
    cfg.dag_path = j.at("dag").get<std::string>();
    cfg.algorithm.clear();
  }
  if (j.contains("algorithm")) {
    cfg.algorithm = j.at("algorithm").get<std::string>();
    if (!cfg.dag_path.empty()) throw SchemaError("run config: give either algorithm or dag");
  }
  if (j.contains("layouts")) {
    for (auto it = j.at("layouts").begin(); it != j.at("layouts").end(); ++it) {
      cfg.layouts[it.key()] = detail::layout_from_json(it.value(), "layouts");
    }
  }
  if (j.contains("default_layout")) {
    cfg.default_layout = detail::layout_from_json(j.at("default_layout"), "default_layout");
  }
  cfg.global_batch = j.value("global_batch", 16u);
  cfg.iterations = j.value("iterations", 5u);
  cfg.warmup = j.value("warmup", 2u);
  cfg.seed = j.value("seed", 1u);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::reject_unknown_keys(d, "dataset", {"path", "synthetic_n", "prompt_tokens"});
    cfg.dataset.path = d.value("path", "");
    cfg.dataset.synthetic_n = d.value("synthetic_n", 0u);
    cfg.dataset.prompt_tokens = d.value("prompt_tokens", 8u);
  }
  if (j.contains("generation")) {
    const auto& g = j.at("generation");
    detail::reject_unknown_keys(g, "generation",
                                {"rollouts_per_prompt", "bytes_per_token", "response_tokens"});
    cfg.gen.rollouts_per_prompt = g.value("rollouts_per_prompt", 1u);
    cfg.gen.bytes_per_token = g.value("bytes_per_token", 2u);
    if (g.contains("response_tokens")) {
      cfg.gen.response_tokens = detail::token_dist_from_json(g.at("response_tokens"));
    }
  }
  if (j.contains("cost_model")) {
    const auto& c = j.at("cost_model");
    detail::reject_unknown_keys(c, "cost_model",
                                {"inference_base_s", "inference_per_token_s", "train_base_s",
                                 "train_per_token_s", "compute_base_s", "compute_per_token_s"});
    cfg.cost.inference_base_s = c.value("inference_base_s", cfg.cost.inference_base_s);
    cfg.cost.inference_per_token_s = c.value("inference_per_token_s", cfg.cost.inference_per_token_s);
    cfg.cost.train_base_s = c.value("train_base_s", cfg.cost.train_base_s);
    cfg.cost.train_per_token_s = c.value("train_per_token_s", cfg.cost.train_per_token_s);
    cfg.cost.compute_base_s = c.value("compute_base_s", cfg.cost.compute_base_s);
    cfg.cost.compute_per_token_s = c.value("compute_per_token_s", cfg.cost.compute_per_token_s);
  }
  cfg.advantage_eps = j.value("advantage_eps", 1e-6);
  if (j.contains("controller_capacity_bytes")) {
    cfg.controller_capacity_bytes = j.at("controller_capacity_bytes").get<uint64_t>();
  }
  cfg.shuffle = j.value("shuffle", false);
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SyntaxError("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["name"] = cfg.name;
  j["topology"] = {{"nodes", cfg.topo.num_nodes}, {"workers_per_node", cfg.topo.workers_per_node}};
  j["backend"] = to_string(cfg.backend);
  j["mode"] = to_string(cfg.mode);
  if (!cfg.dag_path.empty()) {
    j["dag"] = cfg.dag_path;
  } else {
    j["algorithm"] = cfg.algorithm;
  }
  if (!cfg.layouts.empty()) {
    nlohmann::json l = nlohmann::json::object();
    for (const auto& [k, v] : cfg.layouts) l[k] = {{"dp", v.dp_size}, {"tp", v.tp_size}};
    j["layouts"] = std::move(l);
  }
  if (cfg.default_layout) {
    j["default_layout"] = {{"dp", cfg.default_layout->dp_size},
                           {"tp", cfg.default_layout->tp_size}};
  }
  j["global_batch"] = cfg.global_batch;
  j["iterations"] = cfg.iterations;
  j["warmup"] = cfg.warmup;
  j["seed"] = cfg.seed;
  j["dataset"] = {{"path", cfg.dataset.path},
                  {"synthetic_n", cfg.dataset.synthetic_n},
                  {"prompt_tokens", cfg.dataset.prompt_tokens}};
  nlohmann::json rt;
  if (cfg.gen.response_tokens.kind == TokenDist::Kind::CONSTANT) {
    rt = {{"kind", "constant"}, {"value", cfg.gen.response_tokens.value}};
  } else {
    rt = {{"kind", "uniform"}, {"min", cfg.gen.response_tokens.min},
          {"max", cfg.gen.response_tokens.max}};
  }
  j["generation"] = {{"rollouts_per_prompt", cfg.gen.rollouts_per_prompt},
                     {"bytes_per_token", cfg.gen.bytes_per_token},
                     {"response_tokens", std::move(rt)}};
  j["cost_model"] = {{"inference_base_s", cfg.cost.inference_base_s},
                     {"inference_per_token_s", cfg.cost.inference_per_token_s},
                     {"train_base_s", cfg.cost.train_base_s},
                     {"train_per_token_s", cfg.cost.train_per_token_s},
                     {"compute_base_s", cfg.cost.compute_base_s},
                     {"compute_per_token_s", cfg.cost.compute_per_token_s}};
  j["advantage_eps"] = cfg.advantage_eps;
  if (cfg.controller_capacity_bytes) {
    j["controller_capacity_bytes"] = *cfg.controller_capacity_bytes;
  }
  j["shuffle"] = cfg.shuffle;
  return j;
}

// Config identity shared across backends: the fingerprint deliberately
// excludes the backend so INPROC and TCP rows of one config match.
inline std::string config_fingerprint(const RunConfig& cfg) {
  nlohmann::json j = config_to_json(cfg);
  j.erase("backend");
  const uint64_t h = hash_str(0x646673696dULL, j.dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// --- plan preparation ---------------------------------------------------------

struct PreparedRun {
  RunConfig cfg;  // normalized: layouts resolved, dataset size fixed
  DagGraph dag;
  TaskChain chain;
  WorkerPlan plan;
  std::map<std::string, StoreStagePlan> store_stages;
};

inline PreparedRun prepare_run(const RunConfig& in) {
  PreparedRun pr;
  pr.cfg = in;
  RunConfig& cfg = pr.cfg;
  cfg.topo.validate();
  const uint32_t world = cfg.topo.world_size();

  if (!cfg.dag_path.empty()) {
    std::ifstream f(cfg.dag_path);
    if (!f) throw IoError("cannot open DAG config '" + cfg.dag_path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    pr.dag = parse_dag_config(ss.str());
  } else if (cfg.algorithm == "grpo") {
    pr.dag = preset_dag(Algorithm::GRPO);
  } else if (cfg.algorithm == "ppo") {
    pr.dag = preset_dag(Algorithm::PPO);
  } else {
    throw SchemaError("unknown algorithm '" + cfg.algorithm + "'");
  }
  ValidationReport report = validate_dag(pr.dag);
  if (!report.ok) {
    std::string msg = "invalid DAG:";
    for (const auto& issue : report.issues) {
      msg += " [" + issue.code + (issue.node_id.empty() ? "" : " at " + issue.node_id) + ": " +
             issue.message + "]";
    }
    throw SchemaError(msg);
  }
  pr.chain = serialize_graph(pr.dag);

  // Resolve per-stage layouts; dp 0 derives world/tp so one config spans a
  // topology sweep.
  for (const auto& [stage_id, layout] : cfg.layouts) {
    bool known = false;
    for (const auto& node : pr.chain.nodes) known = known || node.node_id == stage_id;
    if (!known) throw LayoutError("layout for unknown stage '" + stage_id + "'");
  }
  std::map<std::string, ParallelLayout> layouts;
  for (const auto& node : pr.chain.nodes) {
    ParallelLayout l;
    auto it = cfg.layouts.find(node.node_id);
    if (it != cfg.layouts.end()) {
      l = it->second;
    } else if (cfg.default_layout) {
      l = *cfg.default_layout;
    } else {
      l = ParallelLayout{0, 1};
    }
    if (l.tp_size == 0) throw LayoutError("stage '" + node.node_id + "': tp must be positive");
    if (l.dp_size == 0) {
      if (world % l.tp_size != 0) {
        throw IndivisibleError("world size", world, l.tp_size);
      }
      l.dp_size = world / l.tp_size;
    }
    layouts[node.node_id] = l;
  }
  cfg.layouts = layouts;
  pr.plan = assign_chains(pr.chain, cfg.topo, layouts);

  if (cfg.iterations < 1) throw SchemaError("iterations must be >= 1");
  if (cfg.global_batch == 0) throw SchemaError("global_batch must be positive");

  const ParallelLayout& layout0 = pr.plan.layout_of(pr.chain.nodes.front().node_id);
  if (cfg.dataset.path.empty() && cfg.dataset.synthetic_n == 0) {
    cfg.dataset.synthetic_n = cfg.global_batch;
  }
  const uint64_t n = dataset_size(cfg.dataset);
  if (n == 0 || n % layout0.dp_size != 0) {
    throw IndivisibleError("dataset size", n, layout0.dp_size);
  }
  bool any_dp_change = false;
  for (size_t i = 0; i < pr.chain.nodes.size(); ++i) {
    const auto& l = layouts.at(pr.chain.nodes[i].node_id);
    if (cfg.global_batch % l.dp_size != 0) {
      throw IndivisibleError("global batch", cfg.global_batch, l.dp_size);
    }
    if (i > 0 && l.dp_size != layouts.at(pr.chain.nodes[i - 1].node_id).dp_size) {
      any_dp_change = true;
    }
  }
  const uint64_t per_store = cfg.global_batch / cfg.topo.num_nodes;
  if (any_dp_change && per_store % cfg.topo.num_nodes != 0) {
    throw IndivisibleError("per-store record count", per_store, cfg.topo.num_nodes);
  }

  for (size_t i = 0; i < pr.chain.nodes.size(); ++i) {
    StoreStagePlan sp;
    sp.produced = layouts.at(pr.chain.nodes[i].node_id);
    if (i + 1 < pr.chain.nodes.size()) {
      sp.consumed = layouts.at(pr.chain.nodes[i + 1].node_id);
    }
    sp.tag = tags::kRedistBase + static_cast<uint32_t>(i);
    pr.store_stages[pr.chain.nodes[i].node_id] = sp;
  }
  return pr;
}

// --- execution ------------------------------------------------------------------

struct ResultRow {
  uint32_t iteration = 0;  // measured index, 0-based
  double wall_s = 0;
  uint64_t tokens = 0;
  uint64_t suppressed = 0;
  double reward_mean = 0;
  double reward_var = 0;
  std::map<std::string, uint64_t> stage_max_ns;
};

struct RunOutcome {
  bool ok = true;
  std::string error;
  uint32_t error_rank = 0;
  std::vector<ResultRow> measured;
  TrafficReport traffic;
  std::vector<uint64_t> redist_per_node;
  // Per-iteration, per-rank metrics (INPROC only; index [iteration][rank]).
  std::vector<std::vector<IterationMetrics>> per_rank_metrics;
  std::map<uint32_t, std::vector<SampleRecord>> captures;

  double mean_wall_s() const {
    if (measured.empty()) return 0;
    double s = 0;
    for (const auto& r : measured) s += r.wall_s;
    return s / double(measured.size());
  }
  uint64_t max_node_ingress() const {
    uint64_t m = 0;
    for (auto v : traffic.node_ingress) m = std::max(m, v);
    return m;
  }
  uint64_t max_node_egress() const {
    uint64_t m = 0;
    for (auto v : traffic.node_egress) m = std::max(m, v);
    return m;
  }
  uint64_t max_node_redist() const {
    uint64_t m = 0;
    for (auto v : redist_per_node) m = std::max(m, v);
    return m;
  }
};

namespace detail {

struct SharedRun {
  const PreparedRun* pr = nullptr;
  Fabric* fabric = nullptr;
  std::vector<BufferStore*> store_of_node;  // indexed by node, may hold nulls in TCP
  CaptureSink* sink = nullptr;
  bool collect_detail = false;

  std::mutex mu;
  std::string error;
  uint32_t error_rank = 0;
  std::vector<ResultRow> rows;
  std::vector<std::vector<IterationMetrics>> per_rank;  // [iteration][rank]

  void fail(uint32_t rank, const std::string& msg) {
    std::lock_guard lk(mu);
    if (error.empty() || rank < error_rank) {
      error = msg;
      error_rank = rank;
    }
  }
};

inline ResultRow row_from_metrics(uint32_t measured_index, double wall_s, const RunMetrics& m) {
  ResultRow row;
  row.iteration = measured_index;
  row.wall_s = wall_s;
  row.tokens = m.global_tokens;
  row.suppressed = m.suppressed_total;
  row.reward_mean = m.reward_mean;
  row.reward_var = m.reward_variance;
  row.stage_max_ns = m.max_node_wall_ns;
  return row;
}

inline void worker_main(SharedRun& sr, uint32_t rank) {
  const PreparedRun& pr = *sr.pr;
  const RunConfig& cfg = pr.cfg;
  try {
    WorkerState st;
    st.rank = rank;
    st.topo = cfg.topo;
    st.chain = registry_bind(pr.chain, builtin_registry(), pr.plan.layouts);
    st.fabric = sr.fabric;
    st.capture = sr.sink;
    st.global_batch = cfg.global_batch;
    st.ctx.gen = cfg.gen;
    st.ctx.cost = cfg.cost;
    st.ctx.advantage_eps = cfg.advantage_eps;
    st.init(cfg.seed);

    const ParallelLayout& layout0 = st.chain.nodes.front().layout;
    ControllerState controller;
    controller.capacity_bytes = cfg.controller_capacity_bytes;
    if (cfg.mode == RunMode::DISTRIBUTED) {
      st.store = sr.store_of_node[cfg.topo.node_of(rank)];
      st.loader = make_group_loader(cfg.dataset, layout0, layout0.dp_rank(rank), cfg.seed,
                                    cfg.shuffle);
    } else {
      st.loader = central_load(*sr.fabric, rank, cfg.topo, layout0, cfg.dataset, cfg.seed,
                               cfg.shuffle);
    }

    const uint32_t total = cfg.warmup + cfg.iterations;
    for (uint32_t it = 0; it < total; ++it) {
      const auto t0 = std::chrono::steady_clock::now();
      IterationMetrics m = cfg.mode == RunMode::DISTRIBUTED
                               ? run_iteration(st, it)
                               : run_central_iteration(st, it, rank == 0 ? &controller : nullptr);
      auto agg = aggregate_metrics(*sr.fabric, st, m);
      if (rank == 0 && agg) {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard lk(sr.mu);
        if (sr.collect_detail) sr.per_rank.push_back(agg->per_rank);
        if (it >= cfg.warmup) {
          sr.rows.push_back(row_from_metrics(it - cfg.warmup, wall, *agg));
        }
      }
    }
  } catch (const std::exception& e) {
    sr.fail(rank, e.what());
    sr.fabric->close();
  }
}

}  // namespace detail

inline RunOutcome run_inproc(const PreparedRun& pr, bool want_captures) {
  const RunConfig& cfg = pr.cfg;
  InprocFabric fabric(cfg.topo);
  std::vector<std::unique_ptr<BufferStore>> stores;
  detail::SharedRun sr;
  sr.pr = &pr;
  sr.fabric = &fabric;
  sr.collect_detail = true;
  sr.store_of_node.resize(cfg.topo.num_nodes, nullptr);
  if (cfg.mode == RunMode::DISTRIBUTED) {
    for (uint32_t b = 0; b < cfg.topo.num_nodes; ++b) {
      stores.push_back(std::make_unique<BufferStore>(cfg.topo, b, &fabric, pr.store_stages));
      sr.store_of_node[b] = stores.back().get();
    }
  }
  CaptureSink sink;
  if (want_captures) sr.sink = &sink;

  std::vector<std::thread> threads;
  threads.reserve(cfg.topo.world_size());
  for (uint32_t r = 0; r < cfg.topo.world_size(); ++r) {
    threads.emplace_back([&sr, r] { detail::worker_main(sr, r); });
  }
  for (auto& t : threads) t.join();

  RunOutcome out;
  out.ok = sr.error.empty();
  out.error = sr.error;
  out.error_rank = sr.error_rank;
  out.measured = std::move(sr.rows);
  out.per_rank_metrics = std::move(sr.per_rank);
  out.traffic = fabric.traffic();
  out.redist_per_node.assign(cfg.topo.num_nodes, 0);
  for (uint32_t b = 0; b < stores.size(); ++b) {
    out.redist_per_node[b] =
        stores[b]->redistribution_bytes_sent() + stores[b]->redistribution_bytes_received();
  }
  if (want_captures) out.captures = sink.take();
  return out;
}

// --- TCP backend: one process per node ------------------------------------------

namespace detail {

inline nlohmann::json traffic_to_json(const TrafficReport& t) {
  nlohmann::json pairs = nlohmann::json::object();
  for (const auto& [key, bytes] : t.pair_bytes) {
    pairs[std::to_string(key.first) + "-" + std::to_string(key.second)] = bytes;
  }
  return {{"num_nodes", t.num_nodes},
          {"node_ingress", t.node_ingress},
          {"node_egress", t.node_egress},
          {"endpoint_ingress", t.endpoint_ingress},
          {"endpoint_egress", t.endpoint_egress},
          {"pairs", std::move(pairs)}};
}

inline TrafficReport traffic_from_json(const nlohmann::json& j) {
  TrafficReport t;
  t.num_nodes = j.at("num_nodes").get<uint32_t>();
  t.node_ingress = j.at("node_ingress").get<std::vector<uint64_t>>();
  t.node_egress = j.at("node_egress").get<std::vector<uint64_t>>();
  t.endpoint_ingress = j.at("endpoint_ingress").get<std::vector<uint64_t>>();
  t.endpoint_egress = j.at("endpoint_egress").get<std::vector<uint64_t>>();
  for (auto it = j.at("pairs").begin(); it != j.at("pairs").end(); ++it) {
    const std::string key = it.key();
    const auto dash = key.find('-');
    t.pair_bytes[{static_cast<uint32_t>(std::stoul(key.substr(0, dash))),
                  static_cast<uint32_t>(std::stoul(key.substr(dash + 1)))}] =
        it.value().get<uint64_t>();
  }
  return t;
}

inline nlohmann::json row_to_json(const ResultRow& r) {
  return {{"iteration", r.iteration},
          {"wall_s", r.wall_s},
          {"tokens", r.tokens},
          {"suppressed", r.suppressed},
          {"reward_mean", r.reward_mean},
          {"reward_var", r.reward_var},
          {"stage_max_ns", r.stage_max_ns}};
}

inline ResultRow row_from_json(const nlohmann::json& j) {
  ResultRow r;
  r.iteration = j.at("iteration").get<uint32_t>();
  r.wall_s = j.at("wall_s").get<double>();
  r.tokens = j.at("tokens").get<uint64_t>();
  r.suppressed = j.at("suppressed").get<uint64_t>();
  r.reward_mean = j.at("reward_mean").get<double>();
  r.reward_var = j.at("reward_var").get<double>();
  r.stage_max_ns = j.at("stage_max_ns").get<std::map<std::string, uint64_t>>();
  return r;
}

// Body of one forked node process. Never returns to the caller's stack; the
// caller _exits with the returned code.
inline int node_main(const PreparedRun& pr, uint32_t node, const std::vector<uint16_t>& ports,
                     const std::string& dir) {
  const RunConfig& cfg = pr.cfg;
  nlohmann::json result;
  int code = 0;
  try {
    TcpFabric fabric(cfg.topo, node, ports);
    std::unique_ptr<BufferStore> store;
    SharedRun sr;
    sr.pr = &pr;
    sr.fabric = &fabric;
    sr.store_of_node.resize(cfg.topo.num_nodes, nullptr);
    if (cfg.mode == RunMode::DISTRIBUTED) {
      store = std::make_unique<BufferStore>(cfg.topo, node, &fabric, pr.store_stages);
      sr.store_of_node[node] = store.get();
    }
    std::vector<std::thread> threads;
    for (uint32_t local = 0; local < cfg.topo.workers_per_node; ++local) {
      const uint32_t rank = node * cfg.topo.workers_per_node + local;
      threads.emplace_back([&sr, rank] { worker_main(sr, rank); });
    }
    for (auto& t : threads) t.join();

    result["error"] = sr.error;
    result["error_rank"] = sr.error_rank;
    result["traffic"] = traffic_to_json(fabric.traffic());
    const uint64_t redist = store ? store->redistribution_bytes_sent() +
                                        store->redistribution_bytes_received()
                                  : 0;
    result["redist_bytes"] = redist;
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : sr.rows) rows.push_back(row_to_json(r));
    result["rows"] = std::move(rows);
    if (!sr.error.empty()) code = 1;
  } catch (const std::exception& e) {
    result["error"] = std::string(e.what());
    result["error_rank"] = node * cfg.topo.workers_per_node;
    result["redist_bytes"] = 0;
    result["rows"] = nlohmann::json::array();
    code = 1;
  }
  std::ofstream out(dir + "/node_" + std::to_string(node) + ".json");
  out << result.dump();
  out.close();
  return code;
}

}  // namespace detail

inline RunOutcome run_tcp(const PreparedRun& pr) {
  const RunConfig& cfg = pr.cfg;
  const uint32_t B = cfg.topo.num_nodes;
  auto ports = pick_free_ports(B);

  std::string dir_template =
      (std::filesystem::temp_directory_path() / "distflow-run-XXXXXX").string();
  std::vector<char> dir_buf(dir_template.begin(), dir_template.end());
  dir_buf.push_back('\0');
  if (!mkdtemp(dir_buf.data())) throw IoError("mkdtemp failed");
  const std::string dir(dir_buf.data());

  std::vector<pid_t> pids(B, -1);
  for (uint32_t b = 0; b < B; ++b) {
    pid_t pid = fork();
    if (pid < 0) {
      for (pid_t p : pids) {
        if (p > 0) kill(p, SIGKILL);
      }
      throw Error("fork failed");
    }
    if (pid == 0) {
      _exit(detail::node_main(pr, b, ports, dir));
    }
    pids[b] = pid;
  }

  // Supervise: once any child fails, give the rest a short grace period,
  // then kill them rather than waiting out their recv timeouts.
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::minutes(10);
  std::optional<std::chrono::steady_clock::time_point> grace_end;
  std::vector<int> codes(B, -1);
  uint32_t remaining = B;
  bool any_failed = false;
  while (remaining > 0) {
    for (uint32_t b = 0; b < B; ++b) {
      if (codes[b] != -1) continue;
      int status = 0;
      const pid_t r = waitpid(pids[b], &status, WNOHANG);
      if (r == pids[b]) {
        codes[b] = WIFEXITED(status) ? WEXITSTATUS(status) : 128;
        --remaining;
        if (codes[b] != 0) any_failed = true;
      }
    }
    if (remaining == 0) break;
    const auto now = std::chrono::steady_clock::now();
    if (any_failed && !grace_end) grace_end = now + std::chrono::seconds(5);
    if ((grace_end && now >= *grace_end) || now >= deadline) {
      for (uint32_t b = 0; b < B; ++b) {
        if (codes[b] == -1) kill(pids[b], SIGKILL);
      }
      grace_end = now + std::chrono::hours(1);  // reap without re-killing
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }

  RunOutcome out;
  out.redist_per_node.assign(B, 0);
  for (uint32_t b = 0; b < B; ++b) {
    const std::string path = dir + "/node_" + std::to_string(b) + ".json";
    std::ifstream in(path);
    if (!in) {
      if (out.ok) {
        out.ok = false;
        out.error = "node " + std::to_string(b) + " produced no result (exit code " +
                    std::to_string(codes[b]) + ")";
        out.error_rank = b * cfg.topo.workers_per_node;
      }
      continue;
    }
    nlohmann::json j = nlohmann::json::parse(in);
    const std::string err = j.value("error", "");
    if (!err.empty() && out.ok) {
      out.ok = false;
      out.error = err;
      out.error_rank = j.value("error_rank", b * cfg.topo.workers_per_node);
    }
    if (j.contains("traffic")) out.traffic.merge(detail::traffic_from_json(j.at("traffic")));
    out.redist_per_node[b] = j.value("redist_bytes", 0ull);
    if (b == 0) {
      for (const auto& row : j.at("rows")) out.measured.push_back(detail::row_from_json(row));
    }
  }
  std::error_code ec;
  std::filesystem::remove_all(dir, ec);
  return out;
}

inline RunOutcome execute_run(const PreparedRun& pr, bool want_captures = false) {
  if (pr.cfg.backend == Backend::TCP) {
    if (want_captures) throw Error("captures are only supported on the inproc backend");
    return run_tcp(pr);
  }
  return run_inproc(pr, want_captures);
}

// --- CSV ---------------------------------------------------------------------------

inline constexpr const char* kCsvHeader =
    "fingerprint,name,mode,algorithm,nodes,workers_per_node,world_size,global_batch,seed,"
    "iteration,status,wall_time_s,global_tokens,tokens_per_sec,per_worker_tokens_per_sec,"
    "reward_mean,entropy_proxy,suppressed_puts,node_ingress_max_bytes,node_egress_max_bytes,"
    "controller_ingress_bytes,controller_egress_bytes,redist_node_max_bytes,stage_max_wall_s,"
    "speedup,error";

// Column names whose values derive from wall-clock time; the determinism
// comparison masks exactly these.
inline const std::vector<std::string>& csv_time_columns() {
  static const std::vector<std::string> cols = {"wall_time_s", "tokens_per_sec",
                                                "per_worker_tokens_per_sec", "stage_max_wall_s",
                                                "speedup"};
  return cols;
}

inline std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> csv_rows_for_run(const RunConfig& cfg, const RunOutcome& outcome,
                                                 std::optional<double> speedup = std::nullopt) {
  const std::string fp = config_fingerprint(cfg);
  const std::string base = fp + "," + csv_escape(cfg.name) + "," + to_string(cfg.mode) + "," +
                           csv_escape(cfg.dag_path.empty() ? cfg.algorithm : cfg.dag_path) + "," +
                           std::to_string(cfg.topo.num_nodes) + "," +
                           std::to_string(cfg.topo.workers_per_node) + "," +
                           std::to_string(cfg.topo.world_size()) + "," +
                           std::to_string(cfg.global_batch) + "," + std::to_string(cfg.seed) + ",";
  std::vector<std::string> lines;
  if (!outcome.ok) {
    // f10 iteration empty, f11 status, f12..f25 empty, f26 error message.
    std::string line = base + ",error";
    line.append(15, ',');
    line += csv_escape("rank " + std::to_string(outcome.error_rank) + ": " + outcome.error);
    lines.push_back(std::move(line));
    return lines;
  }
  const bool central = cfg.mode == RunMode::CENTRAL;
  const uint64_t ctrl_in = central && !outcome.traffic.node_ingress.empty()
                               ? outcome.traffic.node_ingress[0]
                               : 0;
  const uint64_t ctrl_out = central && !outcome.traffic.node_egress.empty()
                                ? outcome.traffic.node_egress[0]
                                : 0;
  for (const auto& row : outcome.measured) {
    const double tps = row.wall_s > 0 ? double(row.tokens) / row.wall_s : 0.0;
    std::string stage_times;
    for (const auto& [node_id, ns] : row.stage_max_ns) {
      if (!stage_times.empty()) stage_times += ';';
      stage_times += node_id + "=" + format_double(double(ns) / 1e9);
    }
    std::string line = base + std::to_string(row.iteration) + ",ok," +
                       format_double(row.wall_s) + "," + std::to_string(row.tokens) + "," +
                       format_double(tps) + "," +
                       format_double(tps / double(cfg.topo.world_size())) + "," +
                       format_double(row.reward_mean) + "," + format_double(row.reward_var) +
                       "," + std::to_string(row.suppressed) + "," +
                       std::to_string(outcome.max_node_ingress()) + "," +
                       std::to_string(outcome.max_node_egress()) + "," +
                       std::to_string(ctrl_in) + "," + std::to_string(ctrl_out) + "," +
                       std::to_string(outcome.max_node_redist()) + "," +
                       csv_escape(stage_times) + "," +
                       (speedup ? format_double(*speedup) : std::string()) + ",";
    lines.push_back(std::move(line));
  }
  return lines;
}

inline std::string csv_document(const std::vector<std::string>& lines) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

// --- top-level commands --------------------------------------------------------------

struct ExperimentResult {
  PreparedRun prepared;
  RunOutcome outcome;
  std::string csv;
};

inline ExperimentResult run_experiment(const RunConfig& cfg, bool want_captures = false) {
  ExperimentResult res;
  res.prepared = prepare_run(cfg);
  res.outcome = execute_run(res.prepared, want_captures);
  res.csv = csv_document(csv_rows_for_run(res.prepared.cfg, res.outcome));
  return res;
}

inline std::vector<std::pair<uint32_t, uint32_t>> parse_scales(const std::string& spec) {
  std::vector<std::pair<uint32_t, uint32_t>> scales;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos) {
      throw SchemaError("scale '" + item + "' must look like <nodes>x<workers>");
    }
    try {
      scales.emplace_back(static_cast<uint32_t>(std::stoul(item.substr(0, x))),
                          static_cast<uint32_t>(std::stoul(item.substr(x + 1))));
    } catch (const std::exception&) {
      throw SchemaError("scale '" + item + "' must look like <nodes>x<workers>");
    }
  }
  if (scales.empty()) throw SchemaError("empty scale list");
  return scales;
}

// One sub-run per scale; global batch (and a synthetic dataset) scale with
// the node count. With `paired`, each scale runs central then distributed and
// the distributed rows carry speedup = central mean wall / distributed mean.
inline std::string sweep(const RunConfig& tmpl,
                         const std::vector<std::pair<uint32_t, uint32_t>>& scales, bool paired) {
  std::vector<std::string> lines;
  for (const auto& [nodes, workers] : scales) {
    RunConfig cfg = tmpl;
    cfg.topo.num_nodes = nodes;
    cfg.topo.workers_per_node = workers;
    cfg.global_batch = tmpl.global_batch * nodes;
    if (cfg.dataset.path.empty()) {
      cfg.dataset.synthetic_n =
          tmpl.dataset.synthetic_n == 0 ? 0 : tmpl.dataset.synthetic_n * nodes;
    }
    auto run_one = [&lines](RunConfig c, std::optional<double> speedup) -> std::optional<double> {
      try {
        PreparedRun pr = prepare_run(c);
        RunOutcome outcome = execute_run(pr);
        for (auto& l : csv_rows_for_run(pr.cfg, outcome, speedup)) lines.push_back(std::move(l));
        if (!outcome.ok) return std::nullopt;
        return outcome.mean_wall_s();
      } catch (const std::exception& e) {
        RunOutcome failed;
        failed.ok = false;
        failed.error = e.what();
        for (auto& l : csv_rows_for_run(c, failed, speedup)) lines.push_back(std::move(l));
        return std::nullopt;
      }
    };
    if (paired) {
      RunConfig central = cfg;
      central.mode = RunMode::CENTRAL;
      auto central_wall = run_one(central, std::nullopt);
      RunConfig dist = cfg;
      dist.mode = RunMode::DISTRIBUTED;
      // Speedup needs both means; rerun order keeps rows grouped by scale.
      try {
        PreparedRun pr = prepare_run(dist);
        RunOutcome outcome = execute_run(pr);
        std::optional<double> speedup;
        if (outcome.ok && central_wall && outcome.mean_wall_s() > 0) {
          speedup = *central_wall / outcome.mean_wall_s();
        }
        for (auto& l : csv_rows_for_run(pr.cfg, outcome, speedup)) lines.push_back(std::move(l));
      } catch (const std::exception& e) {
        RunOutcome failed;
        failed.ok = false;
        failed.error = e.what();
        for (auto& l : csv_rows_for_run(dist, failed, std::nullopt)) {
          lines.push_back(std::move(l));
        }
      }
    } else {
      run_one(cfg, std::nullopt);
    }
  }
  return csv_document(lines);
}

struct VerifyReport {
  bool equal = false;
  std::string detail;
};

// Three-way equivalence: distributed INPROC, central INPROC, and the
// single-process oracle must produce identical per-record channel values.
inline VerifyReport verify_equivalence(const RunConfig& cfg_in) {
  VerifyReport report;
  RunConfig dist_cfg = cfg_in;
  dist_cfg.backend = Backend::INPROC;
  dist_cfg.mode = RunMode::DISTRIBUTED;
  RunConfig central_cfg = dist_cfg;
  central_cfg.mode = RunMode::CENTRAL;

  PreparedRun dist_pr = prepare_run(dist_cfg);
  PreparedRun central_pr = prepare_run(central_cfg);
  RunOutcome dist = execute_run(dist_pr, /*want_captures=*/true);
  if (!dist.ok) {
    report.detail = "distributed run failed: " + dist.error;
    return report;
  }
  RunOutcome central = execute_run(central_pr, /*want_captures=*/true);
  if (!central.ok) {
    report.detail = "central run failed: " + central.error;
    return report;
  }
  OracleResult oracle = run_oracle(dist_pr.chain, dist_pr.plan.layouts, dist_pr.cfg.dataset,
                                   dist_pr.cfg.seed, dist_pr.cfg.global_batch,
                                   dist_pr.cfg.warmup + dist_pr.cfg.iterations, dist_pr.cfg.gen,
                                   dist_pr.cfg.advantage_eps, dist_pr.cfg.shuffle);
  std::string diag;
  if (!compare_captures(dist.captures, central.captures, "distributed", "central", &diag)) {
    report.detail = diag;
    return report;
  }
  if (!compare_captures(dist.captures, oracle.by_iteration, "distributed", "oracle", &diag)) {
    report.detail = diag;
    return report;
  }
  report.equal = true;
  report.detail = "per-record channels identical across distributed, central, and oracle over " +
                  std::to_string(dist_pr.cfg.warmup + dist_pr.cfg.iterations) + " iterations";
  return report;
}

}  // namespace distflow
