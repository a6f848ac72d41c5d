// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "distflow/data_plane.hpp"
#include "distflow/functions.hpp"
#include "distflow/transport.hpp"
#include "distflow/worker.hpp"

namespace distflow {

// Single-controller dataflow: every stage transition routes the full global
// batch through rank 0. The controller is rank 0 of node 0; it runs its own
// worker chain and the staging logic on the same thread.
struct ControllerState {
  std::optional<uint64_t> capacity_bytes;
  uint64_t staged_bytes = 0;

  struct Staged {
    std::vector<SampleRecord> records;
    uint64_t bytes = 0;
  };
  std::map<std::pair<std::string, uint32_t>, Staged> staging;
};

// Rank 0 assembles the stage's global batch in dp-rank order from the TP-0
// leads (its own group's output passed in directly).
inline void central_collect(Fabric& fabric, ControllerState& cs, const std::string& stage_id,
                            const ParallelLayout& from_layout, uint32_t iteration,
                            std::vector<SampleRecord> own_records, uint32_t tag,
                            std::chrono::milliseconds timeout = kDefaultRecvTimeout) {
  std::vector<SampleRecord> assembled = std::move(own_records);
  std::vector<uint32_t> missing;
  for (uint32_t g = 1; g < from_layout.dp_size; ++g) {
    const uint32_t lead = from_layout.group_lead(g);
    try {
      Envelope env = fabric.recv(0, lead, tag, iteration, timeout);
      for (auto& rec : deserialize_records(env.payload)) assembled.push_back(std::move(rec));
    } catch (const TimeoutError&) {
      missing.push_back(lead);
    }
  }
  if (!missing.empty()) {
    std::string ids;
    for (uint32_t r : missing) {
      if (!ids.empty()) ids += ", ";
      ids += std::to_string(r);
    }
    throw TimeoutError("central collect timed out; missing ranks: " + ids);
  }
  ControllerState::Staged staged;
  staged.bytes = serialized_records_size(assembled);
  staged.records = std::move(assembled);
  if (cs.capacity_bytes && cs.staged_bytes + staged.bytes > *cs.capacity_bytes) {
    throw CapacityExceededError("controller staging area over capacity: " +
                                std::to_string(cs.staged_bytes + staged.bytes) + " > " +
                                std::to_string(*cs.capacity_bytes) + " bytes");
  }
  cs.staged_bytes += staged.bytes;
  cs.staging[{stage_id, iteration}] = std::move(staged);
}

// Rank 0 scatters contiguous G/d slices of the staged batch to the consuming
// layout's TP-0 leads; returns its own group-0 slice.
inline std::vector<SampleRecord> central_dispatch(Fabric& fabric, ControllerState& cs,
                                                  const std::string& stage_id,
                                                  const ParallelLayout& to_layout,
                                                  uint32_t iteration, uint32_t tag) {
  auto it = cs.staging.find({stage_id, iteration});
  if (it == cs.staging.end()) {
    throw UnknownStageError("nothing staged for stage '" + stage_id + "' iteration " +
                            std::to_string(iteration));
  }
  std::vector<SampleRecord>& staged = it->second.records;
  if (staged.size() % to_layout.dp_size != 0) {
    throw IndivisibleError("staged batch", staged.size(), to_layout.dp_size);
  }
  const uint64_t per = staged.size() / to_layout.dp_size;
  std::vector<SampleRecord> own(staged.begin(), staged.begin() + static_cast<ptrdiff_t>(per));
  for (uint32_t g = 1; g < to_layout.dp_size; ++g) {
    std::vector<SampleRecord> slice(
        staged.begin() + static_cast<ptrdiff_t>(uint64_t(g) * per),
        staged.begin() + static_cast<ptrdiff_t>(uint64_t(g + 1) * per));
    fabric.send({0, to_layout.group_lead(g), tag, iteration, serialize_records(slice)});
  }
  cs.staged_bytes -= it->second.bytes;
  cs.staging.erase(it);
  return own;
}

// Init-phase dataset distribution: rank 0 loads everything, scatters per-group
// shards to the leads, and each lead relays node-locally to its TP peers.
// Every rank returns a loader equivalent to the distributed one.
inline DataLoader central_load(Fabric& fabric, uint32_t rank, const ClusterTopology& topo,
                               const ParallelLayout& layout, const DatasetSpec& dataset,
                               uint64_t seed, bool shuffle = false) {
  const uint32_t dp = layout.dp_rank(rank);
  const uint32_t tp = layout.tp_rank(rank);
  const uint32_t lead = layout.group_lead(dp);
  std::vector<SampleRecord> shard;
  if (rank == 0) {
    auto all = load_dataset(dataset, seed);
    auto ranges = shard_dataset(all.size(), layout);
    for (uint32_t g = 1; g < layout.dp_size; ++g) {
      std::vector<SampleRecord> slice(
          all.begin() + static_cast<ptrdiff_t>(ranges[g].first),
          all.begin() + static_cast<ptrdiff_t>(ranges[g].last));
      fabric.send({0, layout.group_lead(g), tags::kLoadScatter, 0, serialize_records(slice)});
    }
    shard.assign(all.begin() + static_cast<ptrdiff_t>(ranges[0].first),
                 all.begin() + static_cast<ptrdiff_t>(ranges[0].last));
  } else if (tp == 0) {
    shard = deserialize_records(fabric.recv(rank, 0, tags::kLoadScatter, 0).payload);
  }
  if (tp == 0) {
    if (layout.tp_size > 1) {
      auto blob = serialize_records(shard);
      for (uint32_t p = 1; p < layout.tp_size; ++p) {
        fabric.send({rank, lead + p, tags::kLoadRelay, 0, blob});
      }
    }
  } else {
    shard = deserialize_records(fabric.recv(rank, lead, tags::kLoadRelay, 0).payload);
  }
  return DataLoader(std::move(shard), layout, dp, seed, shuffle);
}

// Central-mode analogue of run_iteration. Same chain walk, same functions,
// same metrics shape; inter-stage movement goes through the controller
// instead of the stores. `controller` is non-null exactly at rank 0.
inline IterationMetrics run_central_iteration(WorkerState& state, uint32_t iteration,
                                              ControllerState* controller) {
  IterationMetrics metrics;
  metrics.iteration = iteration;
  metrics.rank = state.rank;
  if (state.chain.empty()) throw Error("worker chain is empty");
  if (!state.fabric) throw Error("central iteration requires a fabric");
  if ((state.rank == 0) != (controller != nullptr)) {
    throw Error("controller state must be present exactly at rank 0");
  }
  Fabric& fabric = *state.fabric;
  std::vector<SampleRecord> pending;  // rank 0's own next-stage slice

  for (size_t i = 0; i < state.chain.size(); ++i) {
    const BoundNode& bn = state.chain.nodes[i];
    const uint32_t dp = bn.layout.dp_rank(state.rank);
    const uint32_t tp = bn.layout.tp_rank(state.rank);
    const uint32_t lead = bn.layout.group_lead(dp);
    const uint32_t chain_tag = static_cast<uint32_t>(i);
    NodeTiming timing;
    timing.node_id = bn.spec.node_id;
    timing.start_ns = detail::now_ns();

    SampleBatch batch;
    batch.iteration = iteration;
    if (i == 0) {
      if (!state.loader) throw Error("first chain node requires a loader");
      batch.records = state.loader->next_batch(iteration, state.global_batch);
    } else if (tp == 0) {
      if (state.rank == 0) {
        batch.records = std::move(pending);
      } else {
        batch.records = deserialize_records(
            fabric.recv(state.rank, 0, tags::kDispatchBase + chain_tag, iteration).payload);
      }
      if (bn.layout.tp_size > 1) {
        auto blob = serialize_records(batch.records);
        for (uint32_t p = 1; p < bn.layout.tp_size; ++p) {
          fabric.send({state.rank, lead + p, tags::kRelayBase + chain_tag, iteration, blob});
        }
      }
    } else {
      batch.records = deserialize_records(
          fabric.recv(state.rank, lead, tags::kRelayBase + chain_tag, iteration).payload);
    }
    const bool had_reward = detail::batch_has_channel(batch, "reward");

    detail::invoke_node(bn, batch, state.ctx);
    batch.stage_id = bn.spec.node_id;

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
    if (tp != 0) ++metrics.suppressed_puts;

    if (i + 1 < state.chain.size()) {
      const uint32_t next_tag = static_cast<uint32_t>(i + 1);
      if (state.rank == 0) {
        central_collect(fabric, *controller, bn.spec.node_id, bn.layout, iteration,
                        std::move(batch.records), tags::kCollectBase + chain_tag);
        pending = central_dispatch(fabric, *controller, bn.spec.node_id,
                                   state.chain.nodes[i + 1].layout, iteration,
                                   tags::kDispatchBase + next_tag);
      } else if (tp == 0) {
        fabric.send({state.rank, 0, tags::kCollectBase + chain_tag, iteration,
                     serialize_records(batch.records)});
      }
    }
    timing.end_ns = detail::now_ns();
    metrics.nodes.push_back(std::move(timing));
  }
  return metrics;
}

}  // namespace distflow
