// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "distflow/errors.hpp"

namespace distflow {

// One generated response. Scalar channels (reward, ref_logprob, value,
// advantage, ...) attach to the rollout as named f64 values; std::map keeps
// them in sorted order so serialization is deterministic.
struct Rollout {
  std::vector<uint8_t> payload;
  uint32_t token_count = 0;
  std::map<std::string, double> channels;

  bool operator==(const Rollout&) const = default;
};

// A prompt and its rollout group. The group is the atomic unit of data
// movement: resharding never splits it.
struct SampleRecord {
  uint64_t sample_id = 0;
  std::vector<Rollout> rollouts;
  std::map<std::string, std::string> meta;

  bool operator==(const SampleRecord&) const = default;
};

struct SampleBatch {
  std::string stage_id;
  uint32_t iteration = 0;
  std::vector<SampleRecord> records;

  bool operator==(const SampleBatch&) const = default;
};

namespace blob {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 24));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  put_u32(out, uint32_t(v));
  put_u32(out, uint32_t(v >> 32));
}

inline void put_f64(std::vector<uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<uint64_t>(v));
}

inline void put_str(std::vector<uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

class Reader {
public:
  Reader(const uint8_t* data, size_t size) : data_(data), size_(size) {}

  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(data_[pos_]) | uint32_t(data_[pos_ + 1]) << 8 |
                 uint32_t(data_[pos_ + 2]) << 16 | uint32_t(data_[pos_ + 3]) << 24;
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    uint64_t lo = u32();
    uint64_t hi = u32();
    return lo | hi << 32;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<uint8_t> bytes(uint64_t n) {
    need(n);
    std::vector<uint8_t> b(data_ + pos_, data_ + pos_ + n);
    pos_ += n;
    return b;
  }
  bool done() const { return pos_ == size_; }

private:
  void need(uint64_t n) {
    if (pos_ + n > size_) throw ParseError("record blob truncated");
  }
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace blob

inline void serialize_record(const SampleRecord& rec, std::vector<uint8_t>& out) {
  blob::put_u64(out, rec.sample_id);
  blob::put_u32(out, static_cast<uint32_t>(rec.meta.size()));
  for (const auto& [k, v] : rec.meta) {
    blob::put_str(out, k);
    blob::put_str(out, v);
  }
  blob::put_u32(out, static_cast<uint32_t>(rec.rollouts.size()));
  for (const auto& r : rec.rollouts) {
    blob::put_u32(out, r.token_count);
    blob::put_u64(out, r.payload.size());
    out.insert(out.end(), r.payload.begin(), r.payload.end());
    blob::put_u32(out, static_cast<uint32_t>(r.channels.size()));
    for (const auto& [name, val] : r.channels) {
      blob::put_str(out, name);
      blob::put_f64(out, val);
    }
  }
}

inline SampleRecord deserialize_record(blob::Reader& in) {
  SampleRecord rec;
  rec.sample_id = in.u64();
  const uint32_t nmeta = in.u32();
  for (uint32_t i = 0; i < nmeta; ++i) {
    std::string k = in.str();
    rec.meta[k] = in.str();
  }
  const uint32_t nroll = in.u32();
  rec.rollouts.resize(nroll);
  for (auto& r : rec.rollouts) {
    r.token_count = in.u32();
    r.payload = in.bytes(in.u64());
    const uint32_t nch = in.u32();
    for (uint32_t c = 0; c < nch; ++c) {
      std::string name = in.str();
      r.channels[name] = in.f64();
    }
  }
  return rec;
}

inline std::vector<uint8_t> serialize_records(const std::vector<SampleRecord>& recs) {
  std::vector<uint8_t> out;
  blob::put_u32(out, static_cast<uint32_t>(recs.size()));
  for (const auto& r : recs) serialize_record(r, out);
  return out;
}

inline std::vector<SampleRecord> deserialize_records(const std::vector<uint8_t>& data) {
  blob::Reader in(data.data(), data.size());
  const uint32_t n = in.u32();
  std::vector<SampleRecord> recs;
  recs.reserve(n);
  for (uint32_t i = 0; i < n; ++i) recs.push_back(deserialize_record(in));
  return recs;
}

inline std::vector<uint8_t> serialize_batch(const SampleBatch& batch) {
  std::vector<uint8_t> out;
  blob::put_str(out, batch.stage_id);
  blob::put_u32(out, batch.iteration);
  blob::put_u32(out, static_cast<uint32_t>(batch.records.size()));
  for (const auto& r : batch.records) serialize_record(r, out);
  return out;
}

inline SampleBatch deserialize_batch(const std::vector<uint8_t>& data) {
  blob::Reader in(data.data(), data.size());
  SampleBatch batch;
  batch.stage_id = in.str();
  batch.iteration = in.u32();
  const uint32_t n = in.u32();
  batch.records.reserve(n);
  for (uint32_t i = 0; i < n; ++i) batch.records.push_back(deserialize_record(in));
  return batch;
}

inline uint64_t serialized_records_size(const std::vector<SampleRecord>& recs) {
  uint64_t total = 4;
  for (const auto& rec : recs) {
    total += 8 + 4 + 4;
    for (const auto& [k, v] : rec.meta) total += 8 + k.size() + v.size();
    for (const auto& r : rec.rollouts) {
      total += 4 + 8 + r.payload.size() + 4;
      for (const auto& [name, val] : r.channels) {
        (void)val;
        total += 4 + name.size() + 8;
      }
    }
  }
  return total;
}

}  // namespace distflow
