// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdio>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distflow/data_plane.hpp"
#include "distflow/functions.hpp"
#include "distflow/planner.hpp"
#include "distflow/record.hpp"
#include "distflow/transport.hpp"

namespace distflow {

struct NodeTiming {
  std::string node_id;
  uint64_t start_ns = 0;
  uint64_t end_ns = 0;
  uint64_t records = 0;
  uint64_t tokens = 0;
  uint64_t bytes = 0;  // serialized size of the node's output

  uint64_t wall_ns() const { return end_ns - start_ns; }
};

struct IterationMetrics {
  uint32_t iteration = 0;
  uint32_t rank = 0;
  std::vector<NodeTiming> nodes;
  uint64_t suppressed_puts = 0;
  // Reward statistics from the node that created the channel, recorded by
  // that stage's TP-0 workers only so each group counts once.
  uint64_t reward_count = 0;
  double reward_sum = 0;
  double reward_sq_sum = 0;

  double reward_mean() const { return reward_count ? reward_sum / double(reward_count) : 0.0; }
  double reward_variance() const {
    if (!reward_count) return 0.0;
    const double m = reward_mean();
    return reward_sq_sum / double(reward_count) - m * m;
  }
};

namespace detail {

// Timestamps travel as zero-padded strings so the serialized metrics size is
// independent of the clock values; byte accounting then matches across
// backends and repeated runs.
inline std::string fixed_u64(uint64_t v) {
  char buf[21];
  std::snprintf(buf, sizeof(buf), "%020llu", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

inline nlohmann::json metrics_to_json(const IterationMetrics& m) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : m.nodes) {
    nodes.push_back({{"node_id", n.node_id},
                     {"start_ns", detail::fixed_u64(n.start_ns)},
                     {"end_ns", detail::fixed_u64(n.end_ns)},
                     {"records", n.records},
                     {"tokens", n.tokens},
                     {"bytes", n.bytes}});
  }
  return {{"iteration", m.iteration},
          {"rank", m.rank},
          {"nodes", std::move(nodes)},
          {"suppressed_puts", m.suppressed_puts},
          {"reward_count", m.reward_count},
          {"reward_sum", m.reward_sum},
          {"reward_sq_sum", m.reward_sq_sum}};
}

inline IterationMetrics metrics_from_json(const nlohmann::json& j) {
  IterationMetrics m;
  m.iteration = j.at("iteration").get<uint32_t>();
  m.rank = j.at("rank").get<uint32_t>();
  for (const auto& n : j.at("nodes")) {
    NodeTiming t;
    t.node_id = n.at("node_id").get<std::string>();
    t.start_ns = std::stoull(n.at("start_ns").get<std::string>());
    t.end_ns = std::stoull(n.at("end_ns").get<std::string>());
    t.records = n.at("records").get<uint64_t>();
    t.tokens = n.at("tokens").get<uint64_t>();
    t.bytes = n.at("bytes").get<uint64_t>();
    m.nodes.push_back(std::move(t));
  }
  m.suppressed_puts = j.at("suppressed_puts").get<uint64_t>();
  m.reward_count = j.at("reward_count").get<uint64_t>();
  m.reward_sum = j.at("reward_sum").get<double>();
  m.reward_sq_sum = j.at("reward_sq_sum").get<double>();
  return m;
}

// Collects the final-stage output records of TP-0 workers, keyed by
// iteration; the verify path compares these across modes and the oracle.
class CaptureSink {
public:
  void add(uint32_t iteration, const std::vector<SampleRecord>& records) {
    std::lock_guard lk(mu_);
    auto& dst = by_iteration_[iteration];
    dst.insert(dst.end(), records.begin(), records.end());
  }

  std::map<uint32_t, std::vector<SampleRecord>> take() {
    std::lock_guard lk(mu_);
    return std::move(by_iteration_);
  }

private:
  std::mutex mu_;
  std::map<uint32_t, std::vector<SampleRecord>> by_iteration_;
};

struct WorkerState {
  uint32_t rank = 0;
  ClusterTopology topo;
  ExecutableChain chain;
  std::optional<DataLoader> loader;
  BufferStore* store = nullptr;  // distributed mode only
  Fabric* fabric = nullptr;
  CaptureSink* capture = nullptr;
  uint64_t global_batch = 0;
  StageContext ctx;
  std::map<Role, uint64_t> model_versions;
  uint64_t rng_state = 0;  // (run_seed, rank) stream for future stochastic hooks

  void init(uint64_t run_seed) {
    rng_state = keyed_hash(run_seed, "rng", rank);
    ctx.run_seed = run_seed;
    ctx.model_versions = &model_versions;
  }
};

namespace detail {

inline uint64_t now_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

inline uint64_t batch_tokens(const SampleBatch& batch) {
  uint64_t t = 0;
  for (const auto& rec : batch.records) {
    for (const auto& r : rec.rollouts) t += r.token_count;
  }
  return t;
}

inline bool batch_has_channel(const SampleBatch& batch, const std::string& name) {
  for (const auto& rec : batch.records) {
    for (const auto& r : rec.rollouts) {
      if (r.channels.count(name)) return true;
    }
  }
  return false;
}

inline void apply_cost(const CostModel& cost, NodeType type, uint64_t tokens) {
  const double s = cost.busy_seconds(type, tokens);
  if (s > 0) std::this_thread::sleep_for(std::chrono::duration<double>(s));
}

inline void record_reward_stats(IterationMetrics& m, const SampleBatch& batch) {
  m.reward_count = 0;
  m.reward_sum = 0;
  m.reward_sq_sum = 0;
  for (const auto& rec : batch.records) {
    for (const auto& r : rec.rollouts) {
      auto it = r.channels.find("reward");
      if (it == r.channels.end()) continue;
      ++m.reward_count;
      m.reward_sum += it->second;
      m.reward_sq_sum += it->second * it->second;
    }
  }
}

inline void invoke_node(const BoundNode& bn, SampleBatch& batch, StageContext& ctx) {
  try {
    bn.fn(bn.spec, batch, ctx);
  } catch (const FunctionError&) {
    throw;
  } catch (const std::exception& e) {
    throw FunctionError(bn.spec.node_id, e.what());
  }
}

}  // namespace detail

// One full pass over the worker's chain. Node i consumes the output of node
// i-1 through the local store (the chain is a linearized pipeline; graph
// edges only constrain the order). Node 0 draws from the loader. Every node's
// output is put back under its own stage id.
inline IterationMetrics run_iteration(WorkerState& state, uint32_t iteration) {
  IterationMetrics metrics;
  metrics.iteration = iteration;
  metrics.rank = state.rank;
  if (state.chain.empty()) throw Error("worker chain is empty");
  if (!state.store) throw Error("distributed iteration requires a store");

  for (size_t i = 0; i < state.chain.size(); ++i) {
    const BoundNode& bn = state.chain.nodes[i];
    const uint32_t dp = bn.layout.dp_rank(state.rank);
    const uint32_t tp = bn.layout.tp_rank(state.rank);
    NodeTiming timing;
    timing.node_id = bn.spec.node_id;
    timing.start_ns = detail::now_ns();

    SampleBatch batch;
    if (i == 0) {
      if (!state.loader) throw Error("first chain node requires a loader");
      batch.records = state.loader->next_batch(iteration, state.global_batch);
      batch.iteration = iteration;
    } else {
      const std::string& prev = state.chain.nodes[i - 1].spec.node_id;
      batch = state.store->get(prev, iteration, dp, bn.layout);
    }
    const bool had_reward = detail::batch_has_channel(batch, "reward");

    detail::invoke_node(bn, batch, state.ctx);
    batch.stage_id = bn.spec.node_id;
    batch.iteration = iteration;

    timing.records = batch.records.size();
    timing.tokens = detail::batch_tokens(batch);
    timing.bytes = serialized_records_size(batch.records);
    detail::apply_cost(state.ctx.cost, bn.spec.node_type, timing.tokens);

    if (!had_reward && tp == 0 && detail::batch_has_channel(batch, "reward")) {
      detail::record_reward_stats(metrics, batch);
    }
    if (state.capture && tp == 0 && i + 1 == state.chain.size()) {
      state.capture->add(iteration, batch.records);
    }

    if (!state.store->put(bn.spec.node_id, iteration, dp, tp, std::move(batch))) {
      ++metrics.suppressed_puts;
    }
    timing.end_ns = detail::now_ns();
    metrics.nodes.push_back(std::move(timing));
  }
  state.store->worker_done(iteration);
  return metrics;
}

// Cluster-level reductions computed at rank 0 from the gathered per-rank
// metrics of one iteration.
struct RunMetrics {
  uint32_t iteration = 0;
  std::vector<IterationMetrics> per_rank;
  uint64_t global_tokens = 0;  // generation-stage tokens, each group counted once
  uint64_t suppressed_total = 0;
  uint64_t reward_count = 0;
  double reward_mean = 0;
  double reward_variance = 0;  // entropy proxy
  std::map<std::string, uint64_t> max_node_wall_ns;
};

// All-to-one metrics: every worker rank calls once per iteration; rank 0
// returns the reductions, everyone else returns nullopt.
inline std::optional<RunMetrics> aggregate_metrics(Fabric& fabric, const WorkerState& state,
                                                   const IterationMetrics& metrics,
                                                   std::chrono::milliseconds timeout =
                                                       kDefaultRecvTimeout) {
  const uint32_t world = state.topo.world_size();
  std::vector<uint32_t> participants(world);
  for (uint32_t r = 0; r < world; ++r) participants[r] = r;
  const std::string self_json = metrics_to_json(metrics).dump();
  auto gathered = gather_to(fabric, state.rank, 0, participants,
                            std::vector<uint8_t>(self_json.begin(), self_json.end()),
                            tags::kMetrics, metrics.iteration, timeout);
  if (state.rank != 0) return std::nullopt;

  RunMetrics run;
  run.iteration = metrics.iteration;
  run.per_rank.reserve(world);
  for (uint32_t r = 0; r < world; ++r) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(gathered[r].begin(), gathered[r].end());
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("metrics from rank " + std::to_string(r) + ": " + e.what());
    }
    run.per_rank.push_back(metrics_from_json(j));
  }
  const ParallelLayout& gen_layout = state.chain.nodes.front().layout;
  for (uint32_t r = 0; r < world; ++r) {
    const IterationMetrics& m = run.per_rank[r];
    run.suppressed_total += m.suppressed_puts;
    run.reward_count += m.reward_count;
    run.reward_mean += m.reward_sum;
    run.reward_variance += m.reward_sq_sum;
    for (const auto& n : m.nodes) {
      auto& mx = run.max_node_wall_ns[n.node_id];
      mx = std::max(mx, n.wall_ns());
    }
    if (!m.nodes.empty() && gen_layout.tp_rank(r) == 0) {
      run.global_tokens += m.nodes.front().tokens;
    }
  }
  if (run.reward_count) {
    const double sum = run.reward_mean;
    const double sq = run.reward_variance;
    run.reward_mean = sum / double(run.reward_count);
    run.reward_variance = sq / double(run.reward_count) - run.reward_mean * run.reward_mean;
  } else {
    run.reward_mean = 0;
    run.reward_variance = 0;
  }
  return run;
}

}  // namespace distflow
