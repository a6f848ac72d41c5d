// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distflow/dag.hpp"
#include "distflow/errors.hpp"
#include "distflow/hash.hpp"
#include "distflow/planner.hpp"
#include "distflow/record.hpp"

namespace distflow {

struct TokenDist {
  enum class Kind { CONSTANT, UNIFORM } kind = Kind::CONSTANT;
  uint32_t value = 128;  // CONSTANT
  uint32_t min = 64;     // UNIFORM, inclusive
  uint32_t max = 192;
};

struct GenParams {
  uint32_t rollouts_per_prompt = 1;
  TokenDist response_tokens;
  uint32_t bytes_per_token = 2;
};

// Busy time per node invocation: base + per_token * tokens, by node type.
// Sleep-based so the model holds on a single hardware thread.
struct CostModel {
  double inference_base_s = 0.0005;
  double inference_per_token_s = 2e-6;
  double train_base_s = 0.0005;
  double train_per_token_s = 1e-6;
  double compute_base_s = 0.0001;
  double compute_per_token_s = 1e-7;

  double busy_seconds(NodeType type, uint64_t tokens) const {
    switch (type) {
      case NodeType::MODEL_INFERENCE: return inference_base_s + inference_per_token_s * double(tokens);
      case NodeType::MODEL_TRAIN: return train_base_s + train_per_token_s * double(tokens);
      case NodeType::COMPUTE: return compute_base_s + compute_per_token_s * double(tokens);
    }
    return 0.0;
  }
};

// Shared context handed to every stage function. All synthetic values are
// keyed by (run_seed, domain, sample_id, rollout index) and never by
// iteration or rank, so every mode and backend reproduces them bit-exactly.
struct StageContext {
  uint64_t run_seed = 0;
  GenParams gen;
  CostModel cost;
  double advantage_eps = 1e-6;
  std::map<Role, uint64_t>* model_versions = nullptr;
};

using StageFn = std::function<void(const NodeSpec&, SampleBatch&, StageContext&)>;

namespace detail {

inline uint32_t draw_tokens(const TokenDist& dist, uint64_t seed, uint64_t sample_id,
                            uint32_t rollout) {
  switch (dist.kind) {
    case TokenDist::Kind::CONSTANT:
      return dist.value;
    case TokenDist::Kind::UNIFORM: {
      if (dist.max < dist.min) throw Error("token distribution max < min");
      const uint64_t span = uint64_t(dist.max) - dist.min + 1;
      return dist.min +
             static_cast<uint32_t>(keyed_hash(seed, "gen_tokens", sample_id, rollout) % span);
    }
  }
  return dist.value;
}

inline void require_rollouts(const SampleRecord& rec) {
  if (rec.rollouts.empty()) {
    throw MissingRolloutsError("record " + std::to_string(rec.sample_id) +
                               " has no rollouts; generation has not run");
  }
}

inline double channel_of(const Rollout& r, const std::string& name) {
  auto it = r.channels.find(name);
  if (it == r.channels.end()) throw MissingChannelError(name);
  return it->second;
}

inline void fill_channel(SampleBatch& batch, StageContext& ctx, const std::string& name,
                         bool unit_range) {
  for (auto& rec : batch.records) {
    require_rollouts(rec);
    for (uint32_t r = 0; r < rec.rollouts.size(); ++r) {
      const uint64_t h = keyed_hash(ctx.run_seed, name.c_str(), rec.sample_id, r);
      rec.rollouts[r].channels[name] = unit_range ? unit_from_hash(h) : symmetric_from_hash(h);
    }
  }
}

}  // namespace detail

inline void fn_generate(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)node;
  if (ctx.gen.rollouts_per_prompt < 1) throw Error("rollouts_per_prompt must be >= 1");
  for (auto& rec : batch.records) {
    rec.rollouts.clear();
    rec.rollouts.reserve(ctx.gen.rollouts_per_prompt);
    for (uint32_t r = 0; r < ctx.gen.rollouts_per_prompt; ++r) {
      Rollout rollout;
      rollout.token_count = detail::draw_tokens(ctx.gen.response_tokens, ctx.run_seed,
                                                rec.sample_id, r);
      rollout.payload = hash_bytes(keyed_hash(ctx.run_seed, "payload", rec.sample_id, r),
                                   uint64_t(rollout.token_count) * ctx.gen.bytes_per_token);
      rec.rollouts.push_back(std::move(rollout));
    }
  }
}

inline void fn_ref_logprob(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)node;
  detail::fill_channel(batch, ctx, "ref_logprob", /*unit_range=*/false);
}

inline void fn_value(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)node;
  detail::fill_channel(batch, ctx, "value", /*unit_range=*/false);
}

inline void fn_reward(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)node;
  detail::fill_channel(batch, ctx, "reward", /*unit_range=*/true);
}

// Group-normalized advantage: a_i = (r_i - mean) / (pop_std + eps), with a
// zero numerator short-circuited so zero-variance groups stay finite even at
// eps = 0.
inline void fn_group_advantage(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)node;
  for (auto& rec : batch.records) {
    detail::require_rollouts(rec);
    double sum = 0;
    for (const auto& r : rec.rollouts) sum += detail::channel_of(r, "reward");
    const double mean = sum / double(rec.rollouts.size());
    double var = 0;
    for (const auto& r : rec.rollouts) {
      const double d = r.channels.at("reward") - mean;
      var += d * d;
    }
    const double std_dev = std::sqrt(var / double(rec.rollouts.size()));
    for (auto& r : rec.rollouts) {
      const double d = r.channels.at("reward") - mean;
      r.channels["advantage"] = d == 0.0 ? 0.0 : d / (std_dev + ctx.advantage_eps);
    }
  }
}

inline void fn_ppo_advantage(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)node;
  (void)ctx;
  for (auto& rec : batch.records) {
    detail::require_rollouts(rec);
    for (auto& r : rec.rollouts) {
      r.channels["advantage"] = detail::channel_of(r, "reward") - detail::channel_of(r, "value");
    }
  }
}

// Pass-through train step: bumps the role's version counter. Only ACTOR and
// CRITIC are trainable; the other roles are frozen.
inline void fn_train(const NodeSpec& node, SampleBatch& batch, StageContext& ctx) {
  (void)batch;
  if (node.role != Role::ACTOR && node.role != Role::CRITIC) {
    throw Error("role " + std::string(to_string(node.role)) + " is frozen and cannot train");
  }
  if (ctx.model_versions) ++(*ctx.model_versions)[node.role];
}

class FunctionRegistry {
public:
  void register_fn(const std::string& key, StageFn fn) {
    if (!fns_.emplace(key, std::move(fn)).second) {
      throw Error("duplicate registration for key '" + key + "'");
    }
  }

  const StageFn* find(const std::string& key) const {
    auto it = fns_.find(key);
    return it == fns_.end() ? nullptr : &it->second;
  }

private:
  std::map<std::string, StageFn> fns_;
};

inline FunctionRegistry builtin_registry() {
  FunctionRegistry reg;
  reg.register_fn("actor_generate", fn_generate);
  reg.register_fn("ref_logprob", fn_ref_logprob);
  reg.register_fn("value_inference", fn_value);
  reg.register_fn("reward_compute", fn_reward);
  reg.register_fn("group_advantage", fn_group_advantage);
  reg.register_fn("ppo_advantage", fn_ppo_advantage);
  reg.register_fn("train_actor", fn_train);
  reg.register_fn("train_critic", fn_train);
  // Role/type fallbacks for DAGs without func tags.
  reg.register_fn("ACTOR/MODEL_INFERENCE", fn_generate);
  reg.register_fn("REFERENCE/MODEL_INFERENCE", fn_ref_logprob);
  reg.register_fn("CRITIC/MODEL_INFERENCE", fn_value);
  reg.register_fn("REWARD/COMPUTE", fn_reward);
  reg.register_fn("ACTOR/MODEL_TRAIN", fn_train);
  reg.register_fn("CRITIC/MODEL_TRAIN", fn_train);
  return reg;
}

struct BoundNode {
  NodeSpec spec;
  std::string key;
  StageFn fn;
  ParallelLayout layout;
};

struct ExecutableChain {
  std::vector<BoundNode> nodes;
  bool empty() const { return nodes.empty(); }
  size_t size() const { return nodes.size(); }
};

inline ExecutableChain registry_bind(const TaskChain& chain, const FunctionRegistry& registry,
                                     const std::map<std::string, ParallelLayout>& layouts) {
  ExecutableChain out;
  out.nodes.reserve(chain.nodes.size());
  for (const auto& spec : chain.nodes) {
    const std::string key = spec.dispatch_key();
    const StageFn* fn = registry.find(key);
    if (!fn) throw UnboundNodeError(spec.node_id, key);
    auto lit = layouts.find(spec.node_id);
    if (lit == layouts.end()) {
      throw LayoutError("no layout for stage '" + spec.node_id + "'");
    }
    out.nodes.push_back({spec, key, *fn, lit->second});
  }
  return out;
}

}  // namespace distflow
