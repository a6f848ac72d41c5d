// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "distflow/errors.hpp"

namespace distflow {

// On-wire frame layout, all integers little-endian:
//
//   length      u32   bytes after this field (header remainder + payload)
//   src_rank    u32
//   dst_rank    u32
//   tag         u32
//   iteration   u32
//   chunk_index u16
//   chunk_count u16
//   payload     bytes
//
// `length` therefore equals kFrameHeaderBytes + payload size. Traffic counters
// account the `length` value per frame.
inline constexpr uint32_t kFrameHeaderBytes = 20;
inline constexpr uint32_t kDefaultMaxFrameBytes = 64u * 1024 * 1024;
inline constexpr uint32_t kHandshakeTag = 0xFFFFFFFFu;
inline constexpr char kHandshakeMagic[6] = {'D', 'F', 'S', 'I', 'M', '1'};

struct FrameHeader {
  uint32_t length = 0;  // bytes after the length field
  uint32_t src_rank = 0;
  uint32_t dst_rank = 0;
  uint32_t tag = 0;
  uint32_t iteration = 0;
  uint16_t chunk_index = 0;
  uint16_t chunk_count = 1;

  uint32_t payload_bytes() const { return length - kFrameHeaderBytes; }
};

namespace wire {

inline void put_u16(std::vector<uint8_t>& buf, uint16_t v) {
  buf.push_back(static_cast<uint8_t>(v));
  buf.push_back(static_cast<uint8_t>(v >> 8));
}

inline void put_u32(std::vector<uint8_t>& buf, uint32_t v) {
  buf.push_back(static_cast<uint8_t>(v));
  buf.push_back(static_cast<uint8_t>(v >> 8));
  buf.push_back(static_cast<uint8_t>(v >> 16));
  buf.push_back(static_cast<uint8_t>(v >> 24));
}

inline uint16_t get_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

inline uint32_t get_u32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

// Full on-wire bytes for one frame, length prefix included.
inline std::vector<uint8_t> encode_frame(uint32_t src_rank, uint32_t dst_rank, uint32_t tag,
                                         uint32_t iteration, uint16_t chunk_index,
                                         uint16_t chunk_count, const uint8_t* payload,
                                         uint32_t payload_len) {
  std::vector<uint8_t> buf;
  buf.reserve(4 + kFrameHeaderBytes + payload_len);
  put_u32(buf, kFrameHeaderBytes + payload_len);
  put_u32(buf, src_rank);
  put_u32(buf, dst_rank);
  put_u32(buf, tag);
  put_u32(buf, iteration);
  put_u16(buf, chunk_index);
  put_u16(buf, chunk_count);
  buf.insert(buf.end(), payload, payload + payload_len);
  return buf;
}

// Decode the 20 header bytes that follow the length prefix.
inline FrameHeader decode_header(uint32_t length, const uint8_t* p) {
  if (length < kFrameHeaderBytes) {
    throw ParseError("frame length " + std::to_string(length) + " below header size");
  }
  FrameHeader h;
  h.length = length;
  h.src_rank = get_u32(p);
  h.dst_rank = get_u32(p + 4);
  h.tag = get_u32(p + 8);
  h.iteration = get_u32(p + 12);
  h.chunk_index = get_u16(p + 16);
  h.chunk_count = get_u16(p + 18);
  return h;
}

inline std::vector<uint8_t> encode_handshake(uint32_t self_rank, uint32_t rank,
                                             uint32_t world_size) {
  std::vector<uint8_t> payload;
  payload.insert(payload.end(), kHandshakeMagic, kHandshakeMagic + sizeof(kHandshakeMagic));
  put_u32(payload, rank);
  put_u32(payload, world_size);
  return encode_frame(self_rank, 0, kHandshakeTag, 0, 0, 1, payload.data(),
                      static_cast<uint32_t>(payload.size()));
}

struct Handshake {
  uint32_t rank = 0;
  uint32_t world_size = 0;
};

inline Handshake decode_handshake(const uint8_t* payload, uint32_t payload_len) {
  if (payload_len != sizeof(kHandshakeMagic) + 8) {
    throw HandshakeError("handshake payload has wrong size " + std::to_string(payload_len));
  }
  if (std::memcmp(payload, kHandshakeMagic, sizeof(kHandshakeMagic)) != 0) {
    throw HandshakeError("handshake magic mismatch");
  }
  Handshake h;
  h.rank = get_u32(payload + sizeof(kHandshakeMagic));
  h.world_size = get_u32(payload + sizeof(kHandshakeMagic) + 4);
  return h;
}

// Chunking arithmetic shared by both backends so byte accounting is identical
// whether or not frames actually hit a socket.
inline uint32_t max_chunk_payload(uint32_t max_frame_bytes) {
  return max_frame_bytes - kFrameHeaderBytes;
}

inline uint32_t chunk_count_for(uint64_t payload_len, uint32_t max_frame_bytes) {
  const uint64_t per_chunk = max_chunk_payload(max_frame_bytes);
  const uint64_t chunks = payload_len == 0 ? 1 : (payload_len + per_chunk - 1) / per_chunk;
  if (chunks > 0xFFFF) {
    throw FrameTooLargeError("payload of " + std::to_string(payload_len) +
                             " bytes exceeds " + std::to_string(0xFFFFull * per_chunk) +
                             " chunked bytes");
  }
  return static_cast<uint32_t>(chunks);
}

// Counted size of a payload once framed: every chunk contributes its header.
inline uint64_t framed_size(uint64_t payload_len, uint32_t max_frame_bytes) {
  return payload_len + uint64_t(kFrameHeaderBytes) * chunk_count_for(payload_len, max_frame_bytes);
}

}  // namespace wire
}  // namespace distflow
