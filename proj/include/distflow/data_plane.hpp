// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <condition_variable>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distflow/errors.hpp"
#include "distflow/hash.hpp"
#include "distflow/record.hpp"
#include "distflow/topology.hpp"
#include "distflow/transport.hpp"

namespace distflow {

// Tag namespaces. Per-stage tags add the node's chain index so concurrent
// collectives for different stages never collide in the mailboxes.
namespace tags {
inline constexpr uint32_t kRedistBase = 0x52440000;
inline constexpr uint32_t kCollectBase = 0x43430000;
inline constexpr uint32_t kDispatchBase = 0x43440000;
inline constexpr uint32_t kRelayBase = 0x524C0000;
inline constexpr uint32_t kLoadScatter = 0x4C440000;
inline constexpr uint32_t kLoadRelay = 0x4C520000;
inline constexpr uint32_t kMetrics = 0x4D540000;
inline constexpr uint32_t kResult = 0x52530000;
}  // namespace tags

// --- dataset -----------------------------------------------------------------

// Either a JSONL file (one {"id", "prompt"} object per line) or a synthetic
// corpus of `synthetic_n` prompts derived from the run seed.
struct DatasetSpec {
  std::string path;
  uint64_t synthetic_n = 0;
  uint32_t prompt_tokens = 8;
};

namespace detail {

inline std::string synthetic_prompt(uint64_t seed, uint64_t sample_index, uint32_t tokens) {
  std::string prompt;
  for (uint32_t j = 0; j < tokens; ++j) {
    if (j) prompt += ' ';
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%04x",
                  static_cast<unsigned>(keyed_hash(seed, "prompt", sample_index, j) & 0xFFFF));
    prompt += buf;
  }
  return prompt;
}

}  // namespace detail

inline std::vector<SampleRecord> load_dataset(const DatasetSpec& spec, uint64_t seed) {
  std::vector<SampleRecord> records;
  if (spec.path.empty()) {
    records.reserve(spec.synthetic_n);
    for (uint64_t i = 0; i < spec.synthetic_n; ++i) {
      SampleRecord rec;
      rec.sample_id = i;
      rec.meta["prompt"] = detail::synthetic_prompt(seed, i, spec.prompt_tokens);
      records.push_back(std::move(rec));
    }
    return records;
  }
  std::ifstream in(spec.path);
  if (!in) throw IoError("cannot open dataset '" + spec.path + "'");
  std::string line;
  uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("id") || !obj.contains("prompt") ||
        !obj["id"].is_number_unsigned() || !obj["prompt"].is_string()) {
      throw ParseError("dataset line " + std::to_string(line_no) +
                       ": expected {\"id\": u64, \"prompt\": string}");
    }
    SampleRecord rec;
    rec.sample_id = obj["id"].get<uint64_t>();
    rec.meta["prompt"] = obj["prompt"].get<std::string>();
    records.push_back(std::move(rec));
  }
  return records;
}

inline uint64_t dataset_size(const DatasetSpec& spec) {
  if (spec.path.empty()) return spec.synthetic_n;
  std::ifstream in(spec.path);
  if (!in) throw IoError("cannot open dataset '" + spec.path + "'");
  uint64_t n = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) ++n;
  }
  return n;
}

// --- sharding ----------------------------------------------------------------

struct ShardRange {
  uint64_t first = 0;
  uint64_t last = 0;  // exclusive
  uint64_t size() const { return last - first; }
  bool operator==(const ShardRange&) const = default;
};

inline std::vector<ShardRange> shard_dataset(uint64_t dataset_size, const ParallelLayout& layout) {
  if (layout.dp_size == 0 || dataset_size % layout.dp_size != 0) {
    throw IndivisibleError("dataset size", dataset_size, layout.dp_size);
  }
  const uint64_t per = dataset_size / layout.dp_size;
  std::vector<ShardRange> ranges;
  ranges.reserve(layout.dp_size);
  for (uint32_t g = 0; g < layout.dp_size; ++g) {
    ranges.push_back({g * per, (g + 1) * per});
  }
  return ranges;
}

// Positional shard: rows [range.first, range.last) of the dataset. Every TP
// rank of a group loads the same range, so their copies are byte-identical.
inline std::vector<SampleRecord> load_shard(const DatasetSpec& spec, const ShardRange& range,
                                            uint64_t seed) {
  if (spec.path.empty()) {
    std::vector<SampleRecord> records;
    records.reserve(range.size());
    for (uint64_t i = range.first; i < range.last; ++i) {
      SampleRecord rec;
      rec.sample_id = i;
      rec.meta["prompt"] = detail::synthetic_prompt(seed, i, spec.prompt_tokens);
      records.push_back(std::move(rec));
    }
    return records;
  }
  auto all = load_dataset(spec, seed);
  if (range.last > all.size()) {
    throw IoError("shard range beyond dataset end");
  }
  return {all.begin() + static_cast<ptrdiff_t>(range.first),
          all.begin() + static_cast<ptrdiff_t>(range.last)};
}

// --- loader --------------------------------------------------------------------

// One DP group's slice of the dataset. Reads are a pure function of
// (iteration, batch size): the cursor wraps at the shard end without
// reshuffling unless the shuffle flag permutes the shard once up front.
class DataLoader {
public:
  DataLoader(std::vector<SampleRecord> shard, ParallelLayout layout, uint32_t dp_rank,
             uint64_t seed, bool shuffle = false)
      : shard_(std::move(shard)), layout_(layout), dp_rank_(dp_rank) {
    order_.resize(shard_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    if (shuffle) {
      for (size_t i = order_.size(); i > 1; --i) {
        const uint64_t j = keyed_hash(seed, "shuffle", dp_rank_, i) % i;
        std::swap(order_[i - 1], order_[j]);
      }
    }
  }

  std::vector<SampleRecord> next_batch(uint32_t iteration, uint64_t global_batch) const {
    if (global_batch % layout_.dp_size != 0) {
      throw IndivisibleError("global batch", global_batch, layout_.dp_size);
    }
    const uint64_t per_group = global_batch / layout_.dp_size;
    if (shard_.empty()) throw Error("loader shard is empty");
    std::vector<SampleRecord> out;
    out.reserve(per_group);
    for (uint64_t j = 0; j < per_group; ++j) {
      const uint64_t idx = (uint64_t(iteration) * per_group + j) % shard_.size();
      out.push_back(shard_[order_[idx]]);
    }
    return out;
  }

  uint32_t dp_rank() const { return dp_rank_; }
  uint64_t shard_size() const { return shard_.size(); }

private:
  std::vector<SampleRecord> shard_;
  ParallelLayout layout_;
  uint32_t dp_rank_;
  std::vector<size_t> order_;
};

inline DataLoader make_group_loader(const DatasetSpec& spec, const ParallelLayout& layout,
                                    uint32_t dp_rank, uint64_t seed, bool shuffle = false) {
  auto ranges = shard_dataset(dataset_size(spec), layout);
  return DataLoader(load_shard(spec, ranges.at(dp_rank), seed), layout, dp_rank, seed, shuffle);
}

// --- databuffer ----------------------------------------------------------------

// What a store knows about one stage: the layout its producers ran under and
// the layout the redistribution decision is made against (the earliest
// consumer in chain order). Terminal stages have no consumer.
struct StoreStagePlan {
  ParallelLayout produced;
  std::optional<ParallelLayout> consumed;
  uint32_t tag = tags::kRedistBase;
};

// Per-node store mediating inter-stage flow. Producers append under their
// stage id; the first consumer triggers the (once-per-stage-per-iteration)
// redistribution; consumers then read their DP group's contiguous slice.
class BufferStore {
public:
  BufferStore(const ClusterTopology& topo, uint32_t node_index, Fabric* fabric,
              std::map<std::string, StoreStagePlan> stages)
      : topo_(topo), node_(node_index), fabric_(fabric), stages_(std::move(stages)) {
    if (node_ >= topo_.num_nodes) throw Error("store node index out of range");
  }

  uint32_t node_index() const { return node_; }

  // Returns true when the put took effect, false for a suppressed TP
  // duplicate. One effective put per producing DP group per iteration.
  bool put(const std::string& stage_id, uint32_t iteration, uint32_t dp_rank, uint32_t tp_rank,
           SampleBatch batch) {
    std::unique_lock lk(mu_);
    const StoreStagePlan& plan = stage_plan(stage_id);
    if (iteration < low_water_) {
      throw StaleIterationError("put for iteration " + std::to_string(iteration) +
                                " below low water " + std::to_string(low_water_));
    }
    if (tp_rank != 0) {
      ++suppressed_;
      return false;
    }
    const uint32_t gpn = topo_.workers_per_node / plan.produced.tp_size;
    const uint32_t first_group = node_ * gpn;
    if (dp_rank < first_group || dp_rank >= first_group + gpn) {
      throw Error("put from dp group " + std::to_string(dp_rank) + " not local to node " +
                  std::to_string(node_));
    }
    Entry& e = entries_[{stage_id, iteration}];
    if (e.by_group.count(dp_rank)) {
      throw Error("duplicate put for stage '" + stage_id + "' group " + std::to_string(dp_rank));
    }
    e.by_group[dp_rank] = std::move(batch.records);
    ++e.effective_puts;
    lk.unlock();
    cv_.notify_all();
    return true;
  }

  // Blocks until the stage's holdings for this iteration are redistributed,
  // then returns the slice for `dest_dp_rank` under `to_layout`. TP peers of
  // one group receive identical batches.
  SampleBatch get(const std::string& stage_id, uint32_t iteration, uint32_t dest_dp_rank,
                  const ParallelLayout& to_layout,
                  std::chrono::milliseconds timeout = kDefaultRecvTimeout) {
    ensure_ready(stage_id, iteration, to_layout, timeout);
    std::lock_guard lk(mu_);
    const Entry& e = entries_.at({stage_id, iteration});
    const uint32_t gpn = topo_.workers_per_node / to_layout.tp_size;
    const uint32_t first_group = node_ * gpn;
    if (dest_dp_rank < first_group || dest_dp_rank >= first_group + gpn) {
      throw Error("dp group " + std::to_string(dest_dp_rank) + " not local to node " +
                  std::to_string(node_));
    }
    if (e.holdings.size() % gpn != 0) {
      throw IndivisibleError("store holdings", e.holdings.size(), gpn);
    }
    const uint64_t per = e.holdings.size() / gpn;
    const uint64_t at = uint64_t(dest_dp_rank - first_group) * per;
    SampleBatch out;
    out.stage_id = stage_id;
    out.iteration = iteration;
    out.records.assign(e.holdings.begin() + static_cast<ptrdiff_t>(at),
                       e.holdings.begin() + static_cast<ptrdiff_t>(at + per));
    return out;
  }

  // Waits for collection to complete and runs the slice/exchange/concat once.
  // SPMD across stores: every store must eventually call this for the pair.
  void ensure_ready(const std::string& stage_id, uint32_t iteration,
                    const ParallelLayout& fallback_to_layout,
                    std::chrono::milliseconds timeout = kDefaultRecvTimeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lk(mu_);
    const StoreStagePlan& plan = stage_plan(stage_id);
    const ParallelLayout to_layout = plan.consumed.value_or(fallback_to_layout);
    const uint32_t expected = topo_.workers_per_node / plan.produced.tp_size;
    for (;;) {
      if (iteration < low_water_) {
        throw StaleIterationError("get for iteration " + std::to_string(iteration) +
                                  " below low water " + std::to_string(low_water_));
      }
      Entry& e = entries_[{stage_id, iteration}];
      if (!e.error.empty()) throw Error("redistribution failed: " + e.error);
      if (e.state == Entry::State::READY) return;
      if (e.state == Entry::State::COLLECTING && e.effective_puts == expected) {
        e.state = Entry::State::EXCHANGING;
        lk.unlock();
        std::exception_ptr failure;
        std::vector<SampleRecord> holdings;
        try {
          holdings = exchange(stage_id, iteration, plan, to_layout);
        } catch (...) {
          failure = std::current_exception();
        }
        lk.lock();
        Entry& e2 = entries_[{stage_id, iteration}];
        if (!failure) {
          e2.holdings = std::move(holdings);
          e2.by_group.clear();
          e2.state = Entry::State::READY;
        } else {
          try {
            std::rethrow_exception(failure);
          } catch (const std::exception& ex) {
            e2.error = ex.what();
          }
        }
        lk.unlock();
        cv_.notify_all();
        if (failure) std::rethrow_exception(failure);
        return;
      }
      if (cv_.wait_until(lk, deadline) == std::cv_status::timeout) {
        throw NotReadyError("stage '" + stage_id + "' iteration " + std::to_string(iteration) +
                            " not ready: " + std::to_string(expected - std::min(expected, entries_[{stage_id, iteration}].effective_puts)) +
                            " puts outstanding");
      }
    }
  }

  // A worker reports it has finished the iteration. When every local worker
  // has, holdings at or below that iteration are purged and the low-water
  // mark advances; later puts/gets below it raise StaleIterationError.
  void worker_done(uint32_t iteration) {
    {
      std::lock_guard lk(mu_);
      const uint32_t c = ++done_counts_[iteration];
      if (c < topo_.workers_per_node) return;
      done_counts_.erase(iteration);
      low_water_ = std::max(low_water_, iteration + 1);
      for (auto it = entries_.begin(); it != entries_.end();) {
        if (it->first.second < low_water_) {
          it = entries_.erase(it);
        } else {
          ++it;
        }
      }
    }
    cv_.notify_all();
  }

  uint64_t suppressed_count() const {
    std::lock_guard lk(mu_);
    return suppressed_;
  }
  uint64_t redistribution_bytes_sent() const {
    std::lock_guard lk(mu_);
    return redist_sent_;
  }
  uint64_t redistribution_bytes_received() const {
    std::lock_guard lk(mu_);
    return redist_recv_;
  }

private:
  struct Entry {
    std::map<uint32_t, std::vector<SampleRecord>> by_group;
    uint32_t effective_puts = 0;
    enum class State { COLLECTING, EXCHANGING, READY } state = State::COLLECTING;
    std::vector<SampleRecord> holdings;
    std::string error;
  };

  const StoreStagePlan& stage_plan(const std::string& stage_id) const {
    auto it = stages_.find(stage_id);
    if (it == stages_.end()) throw UnknownStageError("stage '" + stage_id + "' not in plan");
    return it->second;
  }

  // Caller holds no lock. Orders holdings by (source dp_rank, local position),
  // then either passes them through (DP unchanged) or slices into B equal
  // partitions and exchanges them all-to-all among the stores.
  std::vector<SampleRecord> exchange(const std::string& stage_id, uint32_t iteration,
                                     const StoreStagePlan& plan, const ParallelLayout& to_layout) {
    std::vector<SampleRecord> ordered;
    {
      std::lock_guard lk(mu_);
      Entry& e = entries_.at({stage_id, iteration});
      for (auto& [group, recs] : e.by_group) {
        for (auto& r : recs) ordered.push_back(std::move(r));
      }
    }
    const uint32_t B = topo_.num_nodes;
    if (to_layout.dp_size == plan.produced.dp_size) {
      return ordered;  // fast path: no inter-node traffic
    }
    if (ordered.size() % B != 0) {
      throw IndivisibleError("per-store record count", ordered.size(), B);
    }
    if (fabric_ == nullptr) throw Error("store has no fabric for redistribution");
    const uint64_t part = ordered.size() / B;
    std::vector<std::vector<uint8_t>> parts(B);
    for (uint32_t j = 0; j < B; ++j) {
      std::vector<SampleRecord> slice(
          ordered.begin() + static_cast<ptrdiff_t>(uint64_t(j) * part),
          ordered.begin() + static_cast<ptrdiff_t>(uint64_t(j + 1) * part));
      parts[j] = serialize_records(slice);
    }
    std::vector<uint32_t> participants(B);
    for (uint32_t j = 0; j < B; ++j) participants[j] = topo_.store_rank(j);
    CollectiveStats stats;
    auto incoming = all_to_all(*fabric_, topo_.store_rank(node_), participants, std::move(parts),
                               plan.tag, iteration, &stats);
    std::vector<SampleRecord> holdings;
    holdings.reserve(ordered.size());
    for (auto& blob : incoming) {
      for (auto& rec : deserialize_records(blob)) holdings.push_back(std::move(rec));
    }
    {
      std::lock_guard lk(mu_);
      redist_sent_ += stats.cross_node_bytes_sent;
      redist_recv_ += stats.cross_node_bytes_received;
    }
    return holdings;
  }

  ClusterTopology topo_;
  uint32_t node_;
  Fabric* fabric_;
  std::map<std::string, StoreStagePlan> stages_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::pair<std::string, uint32_t>, Entry> entries_;
  std::map<uint32_t, uint32_t> done_counts_;
  uint32_t low_water_ = 0;
  uint64_t suppressed_ = 0;
  uint64_t redist_sent_ = 0;
  uint64_t redist_recv_ = 0;
};

// Drives the SPMD exchange across a set of in-process stores (test harness
// convenience; the runtime path triggers it from worker threads instead).
inline void redistribute(const std::vector<BufferStore*>& stores, const std::string& stage_id,
                         uint32_t iteration, const ParallelLayout& to_layout) {
  std::vector<std::thread> threads;
  std::vector<std::string> errors(stores.size());
  threads.reserve(stores.size());
  for (size_t i = 0; i < stores.size(); ++i) {
    threads.emplace_back([&, i] {
      try {
        stores[i]->ensure_ready(stage_id, iteration, to_layout);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& err : errors) {
    if (!err.empty()) throw Error(err);
  }
}

}  // namespace distflow
