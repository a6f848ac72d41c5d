// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Each test prints exactly one
// "criterion N: PASS/FAIL - ..." line so the suite doubles as a checklist.
#include <gtest/gtest.h>

#include <distflow/oracle.hpp>
#include <distflow/runner.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

using namespace distflow;

namespace {

struct Criterion {
  int index;
  std::string detail;
  Criterion(int i, std::string d) : index(i), detail(std::move(d)) {}
  void note(std::string d) { detail = std::move(d); }
  ~Criterion() {
    std::printf("criterion %d: %s - %s\n", index,
                ::testing::Test::HasFailure() ? "FAIL" : "PASS", detail.c_str());
    std::fflush(stdout);
  }
};

std::vector<SampleRecord> records_with_ids(uint64_t first, uint64_t count) {
  std::vector<SampleRecord> recs;
  for (uint64_t i = 0; i < count; ++i) {
    SampleRecord r;
    r.sample_id = first + i;
    recs.push_back(std::move(r));
  }
  return recs;
}

SampleBatch batch_of(std::string stage, uint32_t iteration, std::vector<SampleRecord> recs) {
  SampleBatch b;
  b.stage_id = std::move(stage);
  b.iteration = iteration;
  b.records = std::move(recs);
  return b;
}

CostModel zero_cost() {
  CostModel c;
  c.inference_base_s = c.inference_per_token_s = 0;
  c.train_base_s = c.train_per_token_s = 0;
  c.compute_base_s = c.compute_per_token_s = 0;
  return c;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> split_lines(const std::string& doc) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : doc) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  return lines;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

// Blanks the wall-clock-derived columns so runs can be compared byte for byte.
std::string mask_time_columns(const std::string& doc) {
  const auto header = split_fields(kCsvHeader);
  std::set<size_t> masked;
  for (const auto& name : csv_time_columns()) {
    for (size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) masked.insert(i);
    }
  }
  std::string out;
  for (const auto& line : split_lines(doc)) {
    auto fields = split_fields(line);
    if (line != kCsvHeader) {
      for (size_t i : masked) {
        if (i < fields.size()) fields[i] = "-";
      }
    }
    for (size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += fields[i];
    }
    out += '\n';
  }
  return out;
}

double fit_log2_slope(const std::vector<std::pair<double, double>>& points) {
  double xm = 0, ym = 0;
  for (const auto& [x, y] : points) {
    xm += std::log2(x);
    ym += std::log2(y);
  }
  xm /= double(points.size());
  ym /= double(points.size());
  double num = 0, den = 0;
  for (const auto& [x, y] : points) {
    num += (std::log2(x) - xm) * (std::log2(y) - ym);
    den += (std::log2(x) - xm) * (std::log2(x) - xm);
  }
  return num / den;
}

NodeSpec make_node(std::string id, std::vector<std::string> deps) {
  NodeSpec n;
  n.node_id = std::move(id);
  n.role = Role::NONE;
  n.node_type = NodeType::COMPUTE;
  n.deps = std::move(deps);
  return n;
}

bool respects_all_edges(const DagGraph& g, const TaskChain& chain) {
  std::map<std::string, size_t> pos;
  for (size_t i = 0; i < chain.nodes.size(); ++i) pos[chain.nodes[i].node_id] = i;
  if (pos.size() != g.nodes.size()) return false;
  for (const auto& n : g.nodes) {
    if (!pos.count(n.node_id)) return false;
    for (const auto& d : n.deps) {
      if (!pos.count(d) || pos[d] >= pos[n.node_id]) return false;
    }
  }
  return true;
}

DagGraph random_acyclic_graph(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size_dist(1, 12);
  std::uniform_real_distribution<double> edge_dist(0.0, 1.0);
  const int n = size_dist(rng);
  DagGraph g;
  g.name = "random";
  for (int i = 0; i < n; ++i) g.nodes.push_back(make_node("n" + std::to_string(i), {}));
  const double p = 0.1 + 0.4 * edge_dist(rng);
  for (int i = 1; i < n; ++i) {
    for (int j = 0; j < i; ++j) {
      if (edge_dist(rng) < p) g.nodes[i].deps.push_back("n" + std::to_string(j));
    }
  }
  std::shuffle(g.nodes.begin(), g.nodes.end(), rng);
  return g;
}

}  // namespace

// Randomized resharding: the sample multiset is preserved exactly and every
// destination group receives exactly global_batch / dest_dp records.
TEST(Acceptance, Criterion1RedistributionCorrectness) {
  Criterion report(1, "redistribution property check did not finish");
  const auto t0 = std::chrono::steady_clock::now();

  std::mt19937_64 rng(912662);
  const int kTrials = 220;
  uint64_t records_moved = 0;
  for (int trial = 0; trial < kTrials; ++trial) {
    const uint32_t B = std::vector<uint32_t>{1, 2, 4}[rng() % 3];
    const uint32_t W = std::vector<uint32_t>{2, 4}[rng() % 2];
    const uint32_t tp_p = std::vector<uint32_t>{1, 2}[rng() % 2];
    const uint32_t tp_c = std::vector<uint32_t>{1, 2}[rng() % 2];
    const ClusterTopology topo{B, W};
    const uint32_t world = topo.world_size();
    const ParallelLayout produced{world / tp_p, tp_p};
    const ParallelLayout consumed{world / tp_c, tp_c};

    // G must divide by both dp sizes (multiples of world do) and slice evenly
    // across stores (multiples of B*B do); draw from that lattice within
    // [8, 256].
    const uint64_t step = std::lcm<uint64_t>(world, uint64_t(B) * B);
    const uint64_t k_min = (8 + step - 1) / step;
    const uint64_t k_max = 256 / step;
    ASSERT_LE(k_min, k_max);
    const uint64_t G = step * (k_min + rng() % (k_max - k_min + 1));

    InprocFabric fabric(topo);
    std::map<std::string, StoreStagePlan> stages;
    stages["s"] = StoreStagePlan{produced, consumed, tags::kRedistBase};
    std::vector<std::unique_ptr<BufferStore>> stores;
    std::vector<BufferStore*> ptrs;
    for (uint32_t b = 0; b < B; ++b) {
      stores.push_back(std::make_unique<BufferStore>(topo, b, &fabric, stages));
      ptrs.push_back(stores.back().get());
    }

    std::multiset<uint64_t> sent;
    const uint64_t per_group = G / produced.dp_size;
    const uint32_t gpn_p = W / tp_p;
    for (uint32_t b = 0; b < B; ++b) {
      for (uint32_t g = b * gpn_p; g < (b + 1) * gpn_p; ++g) {
        auto recs = records_with_ids(uint64_t(g) * 10000, per_group);
        for (const auto& r : recs) sent.insert(r.sample_id);
        ASSERT_TRUE(stores[b]->put("s", 0, g, 0, batch_of("s", 0, std::move(recs))));
      }
    }
    redistribute(ptrs, "s", 0, consumed);

    std::multiset<uint64_t> got;
    const uint32_t gpn_c = W / tp_c;
    const uint64_t per_dest = G / consumed.dp_size;
    for (uint32_t b = 0; b < B; ++b) {
      for (uint32_t g = b * gpn_c; g < (b + 1) * gpn_c; ++g) {
        const auto batch = stores[b]->get("s", 0, g, consumed);
        ASSERT_EQ(batch.records.size(), per_dest)
            << "trial " << trial << " B=" << B << " W=" << W << " G=" << G << " tp " << tp_p
            << "->" << tp_c;
        for (const auto& r : batch.records) got.insert(r.sample_id);
      }
    }
    ASSERT_EQ(got, sent) << "trial " << trial;
    records_moved += G;
  }

  const double secs = elapsed_s(t0);
  EXPECT_LT(secs, 60.0);
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d random configs, %llu records: multisets and per-group counts exact (%.1fs)",
                kTrials, static_cast<unsigned long long>(records_moved), secs);
  report.note(buf);
}

// The two documented walkthroughs: a 512-sample dataset splits into shards
// [0,255] and [256,511] for two groups, and a 64-record batch produced by two
// TP-squared groups lands as 16 records on each of four training workers.
TEST(Acceptance, Criterion2DocumentedShardAndReshardExamples) {
  Criterion report(2, "documented walkthroughs did not finish");

  DatasetSpec spec;
  spec.synthetic_n = 512;
  const auto ranges = shard_dataset(512, ParallelLayout{2, 1});
  ASSERT_EQ(ranges.size(), 2u);
  EXPECT_EQ(ranges[0], (ShardRange{0, 256}));
  EXPECT_EQ(ranges[1], (ShardRange{256, 512}));
  const auto shard0 = load_shard(spec, ranges[0], 42);
  const auto shard1 = load_shard(spec, ranges[1], 42);
  ASSERT_EQ(shard0.size(), 256u);
  ASSERT_EQ(shard1.size(), 256u);
  for (uint64_t i = 0; i < 256; ++i) {
    ASSERT_EQ(shard0[i].sample_id, i);
    ASSERT_EQ(shard1[i].sample_id, 256 + i);
  }

  // Workers 0 and 1 form DP group 0 under dp=2, tp=2 and read identical bytes.
  const ParallelLayout gen{2, 2};
  EXPECT_EQ(gen.dp_rank(0), 0u);
  EXPECT_EQ(gen.dp_rank(1), 0u);
  const auto w0 = make_group_loader(spec, gen, gen.dp_rank(0), 42).next_batch(0, 512);
  const auto w1 = make_group_loader(spec, gen, gen.dp_rank(1), 42).next_batch(0, 512);
  EXPECT_EQ(serialize_records(w0), serialize_records(w1));
  EXPECT_EQ(w0.front().sample_id, 0u);
  EXPECT_EQ(w0.back().sample_id, 255u);

  // 64 records: two TP-0 puts of 32, then 16 per worker under dp=4.
  const ClusterTopology topo{1, 4};
  const ParallelLayout train{4, 1};
  std::map<std::string, StoreStagePlan> stages;
  stages["gen"] = StoreStagePlan{gen, train, tags::kRedistBase};
  InprocFabric fabric(topo);
  BufferStore store(topo, 0, &fabric, stages);
  EXPECT_TRUE(store.put("gen", 0, 0, 0, batch_of("gen", 0, records_with_ids(0, 32))));
  EXPECT_FALSE(store.put("gen", 0, 0, 1, batch_of("gen", 0, records_with_ids(0, 32))));
  EXPECT_TRUE(store.put("gen", 0, 1, 0, batch_of("gen", 0, records_with_ids(32, 32))));
  redistribute({&store}, "gen", 0, train);
  for (uint32_t g = 0; g < 4; ++g) {
    const auto batch = store.get("gen", 0, g, train);
    ASSERT_EQ(batch.records.size(), 16u);
    for (uint64_t i = 0; i < 16; ++i) {
      ASSERT_EQ(batch.records[i].sample_id, uint64_t(g) * 16 + i) << "group " << g;
    }
  }

  report.note(
      "512-sample split gives shards [0,255]/[256,511]; 64-record regroup gives 16 per "
      "training worker");
}

// Central-mode controller traffic grows about linearly with world size while
// the distributed per-node redistribution traffic stays near flat.
TEST(Acceptance, Criterion3ControllerBottleneckScaling) {
  Criterion report(3, "scaling sweep did not finish");
  const auto t0 = std::chrono::steady_clock::now();

  auto config_at = [](uint32_t nodes) {
    RunConfig cfg;
    cfg.name = "scaling";
    cfg.topo = ClusterTopology{nodes, 2};
    cfg.backend = Backend::TCP;
    cfg.algorithm = "grpo";
    cfg.layouts["actor_generate"] = ParallelLayout{0, 2};
    cfg.global_batch = uint64_t(32) * nodes * 2;  // 64 records per gen group
    cfg.iterations = 1;
    cfg.warmup = 0;
    cfg.seed = 5;
    cfg.gen.bytes_per_token = 32;  // 128 tokens * 32 = 4 KiB per record
    cfg.cost = zero_cost();
    return cfg;
  };

  std::vector<std::pair<double, double>> controller_points;
  std::map<uint32_t, uint64_t> redist_max;
  for (uint32_t nodes : {2u, 4u, 8u, 16u}) {
    RunConfig central = config_at(nodes);
    central.mode = RunMode::CENTRAL;
    const ExperimentResult c = run_experiment(central);
    ASSERT_TRUE(c.outcome.ok) << "central " << nodes << " nodes: " << c.outcome.error;
    const uint64_t controller_bytes =
        c.outcome.traffic.node_ingress.at(0) + c.outcome.traffic.node_egress.at(0);
    ASSERT_GT(controller_bytes, 0u);
    controller_points.emplace_back(double(nodes) * 2, double(controller_bytes));

    RunConfig dist = config_at(nodes);
    dist.mode = RunMode::DISTRIBUTED;
    const ExperimentResult d = run_experiment(dist);
    ASSERT_TRUE(d.outcome.ok) << "distributed " << nodes << " nodes: " << d.outcome.error;
    redist_max[nodes * 2] = d.outcome.max_node_redist();
    ASSERT_GT(redist_max[nodes * 2], 0u);
  }

  const double slope = fit_log2_slope(controller_points);
  EXPECT_GE(slope, 0.9);
  const double ratio = double(redist_max.at(32)) / double(redist_max.at(4));
  EXPECT_LE(ratio, 2.0);

  const double secs = elapsed_s(t0);
  EXPECT_LT(secs, 300.0);
  char buf[200];
  std::snprintf(buf, sizeof(buf),
                "controller traffic slope %.2f on log2-log2 over worlds 4..32; distributed "
                "max-node redistribution at 32 workers is %.2fx its 4-worker value (%.0fs TCP)",
                slope, ratio, secs);
  report.note(buf);
}

// With payload-dominated iterations, cutting out the controller hop must not
// make iterations slower.
TEST(Acceptance, Criterion4DistributedNotSlowerThanCentral) {
  Criterion report(4, "wall-clock comparison did not finish");

  RunConfig cfg;
  cfg.name = "walls";
  cfg.topo = ClusterTopology{4, 4};
  cfg.backend = Backend::TCP;
  cfg.algorithm = "grpo";
  cfg.global_batch = 64;
  cfg.iterations = 5;
  cfg.warmup = 2;
  cfg.seed = 3;
  cfg.gen.bytes_per_token = 128;  // 128 tokens * 128 = 16 KiB per record
  cfg.cost = zero_cost();

  RunConfig central = cfg;
  central.mode = RunMode::CENTRAL;
  const ExperimentResult c = run_experiment(central);
  ASSERT_TRUE(c.outcome.ok) << c.outcome.error;
  ASSERT_EQ(c.outcome.measured.size(), 5u);

  RunConfig dist = cfg;
  dist.mode = RunMode::DISTRIBUTED;
  const ExperimentResult d = run_experiment(dist);
  ASSERT_TRUE(d.outcome.ok) << d.outcome.error;
  ASSERT_EQ(d.outcome.measured.size(), 5u);

  const double central_mean = c.outcome.mean_wall_s();
  const double dist_mean = d.outcome.mean_wall_s();
  EXPECT_LE(dist_mean, central_mean);

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "4x4 TCP, 16 KiB records: distributed mean %.4fs <= central mean %.4fs over 5 "
                "measured iterations",
                dist_mean, central_mean);
  report.note(buf);
}

// Distributed mode, central mode, and the single-process oracle agree on
// every per-record channel value for both presets at two cluster shapes.
TEST(Acceptance, Criterion5ModeAndOracleEquivalence) {
  Criterion report(5, "equivalence runs did not finish");

  int checked = 0;
  for (const std::string& algo : {std::string("grpo"), std::string("ppo")}) {
    for (const auto& [nodes, workers] : std::vector<std::pair<uint32_t, uint32_t>>{{2, 2}, {1, 8}}) {
      RunConfig cfg;
      cfg.name = "equivalence";
      cfg.topo = ClusterTopology{nodes, workers};
      cfg.algorithm = algo;
      cfg.layouts["actor_generate"] = ParallelLayout{0, 2};
      cfg.global_batch = 16;
      cfg.iterations = 20;
      cfg.warmup = 0;
      cfg.seed = 17;
      cfg.gen.rollouts_per_prompt = 2;
      cfg.cost = zero_cost();
      const VerifyReport vr = verify_equivalence(cfg);
      EXPECT_TRUE(vr.equal) << algo << " " << nodes << "x" << workers << ": " << vr.detail;
      EXPECT_NE(vr.detail.find("20 iterations"), std::string::npos) << vr.detail;
      ++checked;
    }
  }

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "%d preset/shape combinations: per-record channels identical across distributed, "
                "central, and oracle over 20 iterations",
                checked);
  report.note(buf);
}

// Chain orders must respect every DAG edge, and one worker never runs two
// chain nodes at overlapping times.
TEST(Acceptance, Criterion6PlannerValidityAndSerialExecution) {
  Criterion report(6, "planner checks did not finish");

  std::mt19937_64 rng(131001);
  for (int trial = 0; trial < 100; ++trial) {
    const DagGraph g = random_acyclic_graph(rng);
    const TaskChain chain = serialize_graph(g);
    ASSERT_TRUE(respects_all_edges(g, chain)) << "trial " << trial;
  }

  RunConfig cfg;
  cfg.name = "intervals";
  cfg.topo = ClusterTopology{1, 4};
  cfg.algorithm = "grpo";
  cfg.global_batch = 16;
  cfg.iterations = 2;
  cfg.warmup = 1;
  cfg.seed = 29;
  const ExperimentResult res = run_experiment(cfg);
  ASSERT_TRUE(res.outcome.ok) << res.outcome.error;
  ASSERT_FALSE(res.outcome.per_rank_metrics.empty());

  uint64_t intervals = 0;
  for (const auto& per_rank : res.outcome.per_rank_metrics) {
    ASSERT_EQ(per_rank.size(), 4u);
    for (const auto& m : per_rank) {
      ASSERT_EQ(m.nodes.size(), res.prepared.chain.nodes.size());
      for (size_t i = 0; i < m.nodes.size(); ++i) {
        ASSERT_LE(m.nodes[i].start_ns, m.nodes[i].end_ns);
        if (i > 0) {
          ASSERT_GE(m.nodes[i].start_ns, m.nodes[i - 1].end_ns)
              << "rank " << m.rank << " node " << i << " overlaps its predecessor";
        }
        ++intervals;
      }
    }
  }

  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "100 random DAGs serialize to edge-respecting orders; %llu node intervals with "
                "zero overlap per worker",
                static_cast<unsigned long long>(intervals));
  report.note(buf);
}

// The same config must yield byte-identical CSV rows, within one backend and
// across backends, once wall-clock columns are masked.
TEST(Acceptance, Criterion7CsvDeterminismAcrossBackends) {
  Criterion report(7, "determinism comparison did not finish");

  RunConfig cfg;
  cfg.name = "deterministic";
  cfg.topo = ClusterTopology{2, 2};
  cfg.algorithm = "ppo";
  cfg.layouts["actor_generate"] = ParallelLayout{2, 2};
  cfg.global_batch = 16;
  cfg.iterations = 3;
  cfg.warmup = 1;
  cfg.seed = 11;
  cfg.gen.bytes_per_token = 8;
  cfg.cost = zero_cost();

  const ExperimentResult inproc_a = run_experiment(cfg);
  const ExperimentResult inproc_b = run_experiment(cfg);
  RunConfig over_tcp = cfg;
  over_tcp.backend = Backend::TCP;
  const ExperimentResult tcp = run_experiment(over_tcp);
  ASSERT_TRUE(inproc_a.outcome.ok) << inproc_a.outcome.error;
  ASSERT_TRUE(inproc_b.outcome.ok) << inproc_b.outcome.error;
  ASSERT_TRUE(tcp.outcome.ok) << tcp.outcome.error;

  const std::string masked = mask_time_columns(inproc_a.csv);
  EXPECT_EQ(masked, mask_time_columns(inproc_b.csv));
  EXPECT_EQ(masked, mask_time_columns(tcp.csv));

  // The comparison covers real traffic: this config reshards dp 2 -> dp 4.
  const auto row = split_fields(split_lines(inproc_a.csv).at(1));
  ASSERT_EQ(row.size(), 26u);
  EXPECT_NE(row[22], "0") << "redistribution column should be nonzero";

  report.note(
      "INPROC twice and TCP once: CSVs byte-identical outside wall-time columns, including "
      "traffic bytes");
}

// The framed wire layout is bit-exact: little-endian fields in documented
// order, 20 counted header bytes per chunk.
TEST(Acceptance, Criterion8WireFormatGolden) {
  Criterion report(8, "wire golden comparison did not finish");

  const uint8_t payload[4] = {0xDE, 0xAD, 0xBE, 0xEF};
  const auto frame = wire::encode_frame(2, 5, 0x524C0007u, 4, 2, 3, payload, 4);
  const std::vector<uint8_t> expected = {
      0x18, 0x00, 0x00, 0x00,  // length = 20 + 4
      0x02, 0x00, 0x00, 0x00,  // src_rank
      0x05, 0x00, 0x00, 0x00,  // dst_rank
      0x07, 0x00, 0x4C, 0x52,  // tag
      0x04, 0x00, 0x00, 0x00,  // iteration
      0x02, 0x00,              // chunk_index
      0x03, 0x00,              // chunk_count
      0xDE, 0xAD, 0xBE, 0xEF,
  };
  EXPECT_EQ(frame, expected);

  const auto hello = wire::encode_handshake(1, 1, 4);
  const std::vector<uint8_t> expected_hello = {
      0x22, 0x00, 0x00, 0x00,             // length = 20 + 14
      0x01, 0x00, 0x00, 0x00,             // src_rank
      0x00, 0x00, 0x00, 0x00,             // dst_rank
      0xFF, 0xFF, 0xFF, 0xFF,             // tag
      0x00, 0x00, 0x00, 0x00,             // iteration
      0x00, 0x00,                         // chunk_index
      0x01, 0x00,                         // chunk_count
      'D',  'F',  'S',  'I',  'M',  '1',  // magic
      0x01, 0x00, 0x00, 0x00,             // rank
      0x04, 0x00, 0x00, 0x00,             // world_size
  };
  EXPECT_EQ(hello, expected_hello);

  EXPECT_EQ(wire::framed_size(100, kDefaultMaxFrameBytes), 120u);
  EXPECT_EQ(wire::framed_size(1000, 64), 1000u + 23u * 20u);

  report.note("framed envelope and handshake bytes match the documented layout bit for bit");
}
