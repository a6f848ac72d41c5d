// SPDX-License-Identifier: Apache-2.0
#include "distflow/transport.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <functional>
#include <random>
#include <thread>
#include <vector>

using namespace distflow;
using namespace std::chrono_literals;

namespace {

std::vector<uint8_t> bytes_of(std::initializer_list<uint8_t> v) { return {v}; }

std::vector<uint8_t> patterned(size_t n, uint8_t seed = 1) {
  std::vector<uint8_t> out(n);
  for (size_t i = 0; i < n; ++i) out[i] = uint8_t(seed + i * 7);
  return out;
}

// Run one callable per rank on its own thread and rethrow the first failure.
void run_ranks(uint32_t world, const std::function<void(uint32_t)>& body) {
  std::vector<std::thread> threads;
  std::mutex mu;
  std::string first_error;
  for (uint32_t r = 0; r < world; ++r) {
    threads.emplace_back([&, r] {
      try {
        body(r);
      } catch (const std::exception& e) {
        std::lock_guard lk(mu);
        if (first_error.empty()) first_error = e.what();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (!first_error.empty()) throw std::runtime_error(first_error);
}

}  // namespace

TEST(Mailbox, FifoPerMatchKeyAndTagIsolation) {
  InprocFabric fabric(ClusterTopology{1, 2});
  fabric.send({0, 1, 7, 0, bytes_of({'a'})});
  fabric.send({0, 1, 9, 0, bytes_of({'x'})});
  fabric.send({0, 1, 7, 0, bytes_of({'b'})});
  fabric.send({0, 1, 7, 0, bytes_of({'c'})});
  EXPECT_EQ(fabric.recv(1, 0, 7, 0).payload, bytes_of({'a'}));
  EXPECT_EQ(fabric.recv(1, 0, 7, 0).payload, bytes_of({'b'}));
  EXPECT_EQ(fabric.recv(1, 0, 7, 0).payload, bytes_of({'c'}));
  EXPECT_EQ(fabric.recv(1, 0, 9, 0).payload, bytes_of({'x'}));
}

TEST(Mailbox, RecvTimeoutAfterDeadline) {
  InprocFabric fabric(ClusterTopology{1, 2});
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_THROW(fabric.recv(1, 0, 7, 0, 100ms), TimeoutError);
  const auto elapsed = std::chrono::steady_clock::now() - t0;
  EXPECT_GE(elapsed, 100ms);
}

TEST(Mailbox, CloseSourceFailsWaitButKeepsQueued) {
  detail::Mailbox box;
  box.push({5, 0, 1, 0, bytes_of({'q'})});
  box.close_source(5);
  EXPECT_EQ(box.pop_match(5, 1, 0, 100ms).payload, bytes_of({'q'}));
  EXPECT_THROW(box.pop_match(5, 1, 0, 10s), PeerClosedError);
  // Other sources are unaffected.
  box.push({6, 0, 1, 0, bytes_of({'r'})});
  EXPECT_EQ(box.pop_match(6, 1, 0, 100ms).payload, bytes_of({'r'}));
}

TEST(Traffic, CrossNodeEnvelopeCountsFramedBytes) {
  InprocFabric fabric(ClusterTopology{2, 1});
  fabric.send({0, 1, 3, 0, patterned(100)});
  EXPECT_EQ(fabric.recv(1, 0, 3, 0).payload, patterned(100));
  const TrafficReport t = fabric.traffic();
  EXPECT_EQ(t.node_egress[0], 120u);
  EXPECT_EQ(t.node_ingress[1], 120u);
  EXPECT_EQ(t.node_egress[1], 0u);
  EXPECT_EQ(t.node_ingress[0], 0u);
  EXPECT_EQ(t.endpoint_egress[0], 120u);
  EXPECT_EQ(t.endpoint_ingress[1], 120u);
  EXPECT_EQ(t.pair_bytes.at({0, 1}), 120u);
}

TEST(Traffic, IntraNodeDeliveryIsFree) {
  InprocFabric fabric(ClusterTopology{1, 2});
  fabric.send({0, 1, 3, 0, patterned(100)});
  EXPECT_EQ(fabric.recv(1, 0, 3, 0).payload, patterned(100));
  const TrafficReport t = fabric.traffic();
  EXPECT_EQ(t.total_egress(), 0u);
  EXPECT_EQ(t.total_ingress(), 0u);
  EXPECT_TRUE(t.pair_bytes.empty());
}

TEST(Traffic, ChunkedPayloadCountsHeaderPerChunk) {
  // 89 bytes at max_frame 64 is three chunks: 89 + 3 * 20 = 149.
  InprocFabric fabric(ClusterTopology{2, 1}, 64);
  fabric.send({0, 1, 3, 0, patterned(89)});
  EXPECT_EQ(fabric.recv(1, 0, 3, 0).payload, patterned(89));
  EXPECT_EQ(fabric.traffic().node_egress[0], 149u);
}

TEST(Traffic, ConservationAcrossRandomExchange) {
  const ClusterTopology topo{2, 2};
  InprocFabric fabric(topo);
  std::mt19937_64 rng(4242);
  // Random sends between all endpoint pairs, stores included.
  std::vector<Envelope> sent;
  for (int i = 0; i < 60; ++i) {
    Envelope env;
    env.src_rank = uint32_t(rng() % topo.endpoint_count());
    do {
      env.dst_rank = uint32_t(rng() % topo.endpoint_count());
    } while (env.dst_rank == env.src_rank);
    env.tag = 11;
    env.iteration = uint32_t(i);
    env.payload = patterned(rng() % 500, uint8_t(i));
    sent.push_back(env);
    fabric.send(env);
  }
  for (const auto& env : sent) {
    EXPECT_EQ(fabric.recv(env.dst_rank, env.src_rank, 11, env.iteration).payload, env.payload);
  }
  const TrafficReport t = fabric.traffic();
  EXPECT_EQ(t.total_egress(), t.total_ingress());
  // Node counters must equal the sum of their endpoints' counters.
  std::vector<uint64_t> node_in(topo.num_nodes, 0), node_out(topo.num_nodes, 0);
  for (uint32_t ep = 0; ep < topo.endpoint_count(); ++ep) {
    node_in[topo.endpoint_node(ep)] += t.endpoint_ingress[ep];
    node_out[topo.endpoint_node(ep)] += t.endpoint_egress[ep];
  }
  EXPECT_EQ(node_in, t.node_ingress);
  EXPECT_EQ(node_out, t.node_egress);
  // Pair rows sum to the node counters as well.
  std::vector<uint64_t> pair_out(topo.num_nodes, 0), pair_in(topo.num_nodes, 0);
  for (const auto& [sd, v] : t.pair_bytes) {
    pair_out[sd.first] += v;
    pair_in[sd.second] += v;
  }
  EXPECT_EQ(pair_out, t.node_egress);
  EXPECT_EQ(pair_in, t.node_ingress);
}

TEST(Collectives, AllToAllFourParticipants) {
  const ClusterTopology topo{1, 4};
  InprocFabric fabric(topo);
  const std::vector<uint32_t> participants{0, 1, 2, 3};
  std::vector<std::vector<std::vector<uint8_t>>> results(4);
  run_ranks(4, [&](uint32_t r) {
    std::vector<std::vector<uint8_t>> outgoing(4);
    for (uint32_t j = 0; j < 4; ++j) outgoing[j] = bytes_of({uint8_t(10 * r + j)});
    results[r] = all_to_all(fabric, r, participants, std::move(outgoing), 5, 0);
  });
  for (uint32_t j = 0; j < 4; ++j) {
    ASSERT_EQ(results[j].size(), 4u);
    for (uint32_t i = 0; i < 4; ++i) {
      EXPECT_EQ(results[j][i], bytes_of({uint8_t(10 * i + j)})) << "i=" << i << " j=" << j;
    }
  }
}

TEST(Collectives, AllToAllSingleParticipantIsIdentity) {
  InprocFabric fabric(ClusterTopology{1, 1});
  CollectiveStats stats;
  auto in = all_to_all(fabric, 0, {0}, {patterned(64)}, 5, 0, &stats);
  ASSERT_EQ(in.size(), 1u);
  EXPECT_EQ(in[0], patterned(64));
  EXPECT_EQ(stats.cross_node_bytes_sent, 0u);
  EXPECT_EQ(stats.cross_node_bytes_received, 0u);
  EXPECT_EQ(fabric.traffic().total_egress(), 0u);
}

TEST(Collectives, AllToAllTwoNodesKibPayloads) {
  const ClusterTopology topo{2, 1};
  InprocFabric fabric(topo);
  std::vector<CollectiveStats> stats(2);
  run_ranks(2, [&](uint32_t r) {
    std::vector<std::vector<uint8_t>> outgoing{patterned(1024, uint8_t(r)),
                                               patterned(1024, uint8_t(r + 10))};
    auto in = all_to_all(fabric, r, {0, 1}, std::move(outgoing), 6, 0, &stats[r]);
    ASSERT_EQ(in.size(), 2u);
  });
  const TrafficReport t = fabric.traffic();
  EXPECT_EQ(t.node_egress[0], 1044u);
  EXPECT_EQ(t.node_egress[1], 1044u);
  EXPECT_EQ(t.node_ingress[0], 1044u);
  EXPECT_EQ(t.node_ingress[1], 1044u);
  for (uint32_t r = 0; r < 2; ++r) {
    EXPECT_EQ(stats[r].cross_node_bytes_sent, 1044u);
    EXPECT_EQ(stats[r].cross_node_bytes_received, 1044u);
  }
}

TEST(Collectives, GatherEightRemoteKibToRoot) {
  const ClusterTopology topo{8, 1};
  InprocFabric fabric(topo);
  std::vector<uint32_t> participants;
  for (uint32_t r = 0; r < 8; ++r) participants.push_back(r);
  std::vector<std::vector<std::vector<uint8_t>>> out(8);
  run_ranks(8, [&](uint32_t r) {
    out[r] = gather_to(fabric, r, 0, participants, patterned(1024, uint8_t(r)), 8, 1);
  });
  ASSERT_EQ(out[0].size(), 8u);
  for (uint32_t r = 0; r < 8; ++r) EXPECT_EQ(out[0][r], patterned(1024, uint8_t(r)));
  for (uint32_t r = 1; r < 8; ++r) EXPECT_TRUE(out[r].empty());
  const TrafficReport t = fabric.traffic();
  EXPECT_EQ(t.node_ingress[0], 7u * 1044u);
  EXPECT_EQ(t.node_egress[0], 0u);
}

TEST(Collectives, GatherSingleParticipantIsLocal) {
  InprocFabric fabric(ClusterTopology{1, 1});
  auto out = gather_to(fabric, 0, 0, {0}, patterned(256), 8, 0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], patterned(256));
  EXPECT_EQ(fabric.traffic().total_ingress(), 0u);
}

TEST(Collectives, GatherTimeoutNamesMissingRanks) {
  InprocFabric fabric(ClusterTopology{1, 4});
  fabric.send({1, 0, 8, 0, patterned(4)});
  fabric.send({3, 0, 8, 0, patterned(4)});
  try {
    gather_to(fabric, 0, 0, {0, 1, 2, 3}, patterned(4), 8, 0, 200ms);
    FAIL() << "expected TimeoutError";
  } catch (const TimeoutError& e) {
    EXPECT_NE(std::string(e.what()).find("missing ranks: 2"), std::string::npos) << e.what();
  }
}

TEST(Collectives, ScatterHandsEachRankItsPart) {
  const ClusterTopology topo{1, 4};
  InprocFabric fabric(topo);
  std::vector<std::vector<uint8_t>> got(4);
  run_ranks(4, [&](uint32_t r) {
    std::vector<std::vector<uint8_t>> parts;
    if (r == 0) {
      for (uint32_t i = 0; i < 4; ++i) parts.push_back(patterned(i + 1, uint8_t(i)));
    }
    got[r] = scatter_from(fabric, r, 0, {0, 1, 2, 3}, std::move(parts), 9, 2);
  });
  for (uint32_t r = 0; r < 4; ++r) {
    EXPECT_EQ(got[r].size(), size_t(r + 1));
    EXPECT_EQ(got[r], patterned(r + 1, uint8_t(r)));
  }
}

namespace {

// Builds one TcpFabric per node on loopback, runs the body, merges traffic.
struct TcpPair {
  ClusterTopology topo;
  std::vector<std::unique_ptr<TcpFabric>> fabrics;

  explicit TcpPair(const ClusterTopology& t, uint32_t max_frame = kDefaultMaxFrameBytes)
      : topo(t) {
    const auto ports = pick_free_ports(topo.num_nodes);
    fabrics.resize(topo.num_nodes);
    run_ranks(topo.num_nodes, [&](uint32_t node) {
      fabrics[node] = std::make_unique<TcpFabric>(topo, node, ports, max_frame);
    });
  }

  TrafficReport merged_traffic() const {
    TrafficReport t;
    for (const auto& f : fabrics) t.merge(f->traffic());
    return t;
  }
};

}  // namespace

TEST(Tcp, CrossNodeRoundTripAndCounters) {
  const ClusterTopology topo{2, 2};
  TcpPair cluster(topo);
  // rank 0,1 on node 0; rank 2,3 on node 1.
  cluster.fabrics[0]->send({0, 2, 4, 0, patterned(100)});
  cluster.fabrics[1]->send({3, 1, 4, 0, patterned(50)});
  cluster.fabrics[0]->send({0, 1, 4, 0, patterned(25)});  // intra-node, free
  EXPECT_EQ(cluster.fabrics[1]->recv(2, 0, 4, 0).payload, patterned(100));
  EXPECT_EQ(cluster.fabrics[0]->recv(1, 3, 4, 0).payload, patterned(50));
  EXPECT_EQ(cluster.fabrics[0]->recv(1, 0, 4, 0).payload, patterned(25));
  const TrafficReport t = cluster.merged_traffic();
  EXPECT_EQ(t.node_egress[0], 120u);
  EXPECT_EQ(t.node_ingress[1], 120u);
  EXPECT_EQ(t.node_egress[1], 70u);
  EXPECT_EQ(t.node_ingress[0], 70u);
  EXPECT_EQ(t.pair_bytes.at({0, 1}), 120u);
  EXPECT_EQ(t.pair_bytes.at({1, 0}), 70u);
}

TEST(Tcp, CountersMatchInprocForSamePlan) {
  const ClusterTopology topo{2, 2};
  struct Send {
    uint32_t src, dst;
    size_t n;
  };
  const std::vector<Send> plan = {{0, 2, 100}, {1, 3, 999}, {2, 1, 1}, {3, 0, 4096}, {0, 1, 77}};

  InprocFabric inproc(topo);
  for (const auto& s : plan) inproc.send({s.src, s.dst, 2, 0, patterned(s.n)});
  for (const auto& s : plan) inproc.recv(s.dst, s.src, 2, 0);

  TcpPair cluster(topo);
  for (const auto& s : plan) {
    cluster.fabrics[topo.node_of(s.src)]->send({s.src, s.dst, 2, 0, patterned(s.n)});
  }
  for (const auto& s : plan) {
    EXPECT_EQ(cluster.fabrics[topo.node_of(s.dst)]->recv(s.dst, s.src, 2, 0).payload,
              patterned(s.n));
  }

  const TrafficReport a = inproc.traffic();
  const TrafficReport b = cluster.merged_traffic();
  EXPECT_EQ(a.node_ingress, b.node_ingress);
  EXPECT_EQ(a.node_egress, b.node_egress);
  EXPECT_EQ(a.endpoint_ingress, b.endpoint_ingress);
  EXPECT_EQ(a.endpoint_egress, b.endpoint_egress);
  EXPECT_EQ(a.pair_bytes, b.pair_bytes);
}

TEST(Tcp, ChunkedTransferReassembles) {
  const ClusterTopology topo{2, 1};
  TcpPair cluster(topo, /*max_frame=*/64);  // 44-byte chunks
  const auto payload = patterned(1000, 3);
  cluster.fabrics[0]->send({0, 1, 5, 7, payload});
  EXPECT_EQ(cluster.fabrics[1]->recv(1, 0, 5, 7).payload, payload);
  // 1000 bytes / 44 per chunk = 23 chunks; 1000 + 23 * 20 counted bytes.
  const TrafficReport t = cluster.merged_traffic();
  EXPECT_EQ(t.node_egress[0], 1000u + 23u * 20u);
  EXPECT_EQ(t.node_ingress[1], 1000u + 23u * 20u);
}

TEST(Tcp, WorldSizeMismatchFailsHandshake) {
  const auto ports = pick_free_ports(2);
  std::atomic<int> handshake_errors{0};
  std::thread a([&] {
    try {
      TcpFabric f(ClusterTopology{2, 2}, 0, ports);
    } catch (const HandshakeError&) {
      handshake_errors++;
    }
  });
  std::thread b([&] {
    try {
      TcpFabric f(ClusterTopology{2, 4}, 1, ports);
    } catch (const HandshakeError&) {
      handshake_errors++;
    }
  });
  a.join();
  b.join();
  EXPECT_EQ(handshake_errors.load(), 2);
}

TEST(Tcp, GracefulPeerShutdownOnlyClosesThatPeer) {
  const ClusterTopology topo{2, 2};
  TcpPair cluster(topo);
  cluster.fabrics[1]->send({2, 0, 4, 0, patterned(10)});
  // Node 1 finishes and closes. Node 0 must still read what was sent, then
  // see PeerClosedError for node 1 sources, while intra-node traffic flows.
  EXPECT_EQ(cluster.fabrics[0]->recv(0, 2, 4, 0).payload, patterned(10));
  cluster.fabrics[1]->close();
  EXPECT_THROW(cluster.fabrics[0]->recv(0, 3, 4, 0, 10s), PeerClosedError);
  cluster.fabrics[0]->send({0, 1, 4, 0, patterned(5)});
  EXPECT_EQ(cluster.fabrics[0]->recv(1, 0, 4, 0).payload, patterned(5));
}
