// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "distflow/errors.hpp"

namespace distflow {

// The node x worker grid. Ranks are dense: rank = node_index * workers_per_node + local_rank.
struct ClusterTopology {
  uint32_t num_nodes = 1;
  uint32_t workers_per_node = 1;

  uint32_t world_size() const { return num_nodes * workers_per_node; }
  uint32_t node_of(uint32_t rank) const { return rank / workers_per_node; }
  uint32_t local_of(uint32_t rank) const { return rank % workers_per_node; }

  // Databuffers get their own endpoint address space above the worker ranks.
  uint32_t store_rank(uint32_t node_index) const { return world_size() + node_index; }
  bool is_store_rank(uint32_t rank) const { return rank >= world_size(); }
  // Node index of any endpoint, worker or store.
  uint32_t endpoint_node(uint32_t rank) const {
    return is_store_rank(rank) ? rank - world_size() : node_of(rank);
  }
  uint32_t endpoint_count() const { return world_size() + num_nodes; }

  void validate() const {
    if (num_nodes == 0 || workers_per_node == 0) {
      throw LayoutError("topology must have at least one node and one worker per node");
    }
  }

  bool operator==(const ClusterTopology&) const = default;
};

// DP x TP decomposition of one stage. dp_size * tp_size must equal world_size;
// the planner additionally requires tp_size | workers_per_node so that every
// DP group is node-local.
struct ParallelLayout {
  uint32_t dp_size = 1;
  uint32_t tp_size = 1;

  // Fixed rank mapping: consecutive ranks form a TP group.
  uint32_t dp_rank(uint32_t global_rank) const { return global_rank / tp_size; }
  uint32_t tp_rank(uint32_t global_rank) const { return global_rank % tp_size; }
  // Lead (TP rank 0) worker of a DP group.
  uint32_t group_lead(uint32_t dp_rank) const { return dp_rank * tp_size; }

  bool operator==(const ParallelLayout&) const = default;
};

inline void check_layout(const ParallelLayout& l, const ClusterTopology& topo,
                         const char* stage = nullptr) {
  const std::string where = stage ? std::string(" for stage '") + stage + "'" : std::string();
  if (l.dp_size == 0 || l.tp_size == 0) {
    throw LayoutError("dp_size and tp_size must be positive" + where);
  }
  if (l.dp_size * l.tp_size != topo.world_size()) {
    throw LayoutError("dp_size * tp_size = " + std::to_string(l.dp_size * l.tp_size) +
                      " != world_size " + std::to_string(topo.world_size()) + where);
  }
  if (topo.workers_per_node % l.tp_size != 0) {
    throw LayoutError("tp_size " + std::to_string(l.tp_size) +
                      " does not divide workers_per_node " +
                      std::to_string(topo.workers_per_node) + where);
  }
}

// Number of DP groups hosted on each node (layout must satisfy tp | W).
inline uint32_t groups_per_node(const ParallelLayout& l, const ClusterTopology& topo) {
  return topo.workers_per_node / l.tp_size;
}

// First DP group hosted on a node.
inline uint32_t first_group_of_node(const ParallelLayout& l, const ClusterTopology& topo,
                                    uint32_t node_index) {
  return node_index * groups_per_node(l, topo);
}

}  // namespace distflow
