// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distflow/central.hpp"
#include "distflow/data_plane.hpp"
#include "distflow/functions.hpp"
#include "distflow/planner.hpp"
#include "distflow/record.hpp"

namespace distflow {

// Ground truth for the equivalence checks: the same chain applied to the
// same global batches by one thread, no stores, no fabric, no cost model.
struct OracleResult {
  std::map<uint32_t, std::vector<SampleRecord>> by_iteration;  // final-stage records
  std::map<uint32_t, uint64_t> gen_tokens;                     // generation output tokens
};

inline OracleResult run_oracle(const TaskChain& chain,
                               const std::map<std::string, ParallelLayout>& layouts,
                               const DatasetSpec& dataset, uint64_t seed, uint64_t global_batch,
                               uint32_t iterations, const GenParams& gen, double advantage_eps,
                               bool shuffle = false) {
  if (chain.nodes.empty()) throw Error("oracle needs a non-empty chain");
  ExecutableChain bound = registry_bind(chain, builtin_registry(), layouts);

  // Batch composition must match the sharded loaders exactly, including the
  // per-shard wrap, so build one loader per DP group of the first stage.
  const ParallelLayout& layout0 = bound.nodes.front().layout;
  std::vector<DataLoader> loaders;
  loaders.reserve(layout0.dp_size);
  for (uint32_t g = 0; g < layout0.dp_size; ++g) {
    loaders.push_back(make_group_loader(dataset, layout0, g, seed, shuffle));
  }

  StageContext ctx;
  ctx.run_seed = seed;
  ctx.gen = gen;
  ctx.advantage_eps = advantage_eps;
  std::map<Role, uint64_t> versions;
  ctx.model_versions = &versions;

  OracleResult result;
  for (uint32_t iter = 0; iter < iterations; ++iter) {
    SampleBatch batch;
    batch.iteration = iter;
    for (auto& loader : loaders) {
      auto part = loader.next_batch(iter, global_batch);
      for (auto& rec : part) batch.records.push_back(std::move(rec));
    }
    for (size_t i = 0; i < bound.nodes.size(); ++i) {
      const BoundNode& bn = bound.nodes[i];
      detail::invoke_node(bn, batch, ctx);
      batch.stage_id = bn.spec.node_id;
      if (i == 0) result.gen_tokens[iter] = detail::batch_tokens(batch);
    }
    result.by_iteration[iter] = batch.records;
  }
  return result;
}

// Canonical order for multiset comparison: records sort by their serialized
// bytes, so identical multisets line up element by element.
inline void canonicalize_records(std::vector<SampleRecord>& records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const SampleRecord& a, const SampleRecord& b) {
                     if (a.sample_id != b.sample_id) return a.sample_id < b.sample_id;
                     std::vector<uint8_t> ba, bb;
                     serialize_record(a, ba);
                     serialize_record(b, bb);
                     return ba < bb;
                   });
}

// Exact per-record comparison of two captured runs. On mismatch, writes a
// short description to `diag` and returns false.
inline bool compare_captures(std::map<uint32_t, std::vector<SampleRecord>> lhs,
                             std::map<uint32_t, std::vector<SampleRecord>> rhs,
                             const std::string& lhs_name, const std::string& rhs_name,
                             std::string* diag) {
  auto fail = [&](const std::string& msg) {
    if (diag) *diag = msg;
    return false;
  };
  if (lhs.size() != rhs.size()) {
    return fail(lhs_name + " has " + std::to_string(lhs.size()) + " iterations, " + rhs_name +
                " has " + std::to_string(rhs.size()));
  }
  for (auto& [iter, lrecs] : lhs) {
    auto rit = rhs.find(iter);
    if (rit == rhs.end()) {
      return fail(rhs_name + " missing iteration " + std::to_string(iter));
    }
    auto& rrecs = rit->second;
    if (lrecs.size() != rrecs.size()) {
      return fail("iteration " + std::to_string(iter) + ": " + lhs_name + " has " +
                  std::to_string(lrecs.size()) + " records, " + rhs_name + " has " +
                  std::to_string(rrecs.size()));
    }
    canonicalize_records(lrecs);
    canonicalize_records(rrecs);
    for (size_t i = 0; i < lrecs.size(); ++i) {
      if (!(lrecs[i] == rrecs[i])) {
        return fail("iteration " + std::to_string(iter) + ": record with sample_id " +
                    std::to_string(lrecs[i].sample_id) + " differs between " + lhs_name +
                    " and " + rhs_name);
      }
    }
  }
  return true;
}

}  // namespace distflow
