// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "distflow/errors.hpp"
#include "distflow/topology.hpp"
#include "distflow/wire.hpp"

namespace distflow {

inline constexpr std::chrono::milliseconds kDefaultRecvTimeout{120000};

enum class Backend { INPROC, TCP };

inline const char* to_string(Backend b) { return b == Backend::INPROC ? "inproc" : "tcp"; }

inline Backend backend_from_string(const std::string& s) {
  if (s == "inproc" || s == "INPROC") return Backend::INPROC;
  if (s == "tcp" || s == "TCP") return Backend::TCP;
  throw SchemaError("unknown backend '" + s + "'");
}

struct Envelope {
  uint32_t src_rank = 0;
  uint32_t dst_rank = 0;
  uint32_t tag = 0;
  uint32_t iteration = 0;
  std::vector<uint8_t> payload;
};

// Snapshot of the byte counters. Only envelopes crossing a node boundary are
// counted; intra-node delivery is the modeled shared-memory fast path and
// contributes nothing. Counted size per frame is its `length` field value
// (header remainder + payload), summed over chunks.
struct TrafficReport {
  uint32_t num_nodes = 0;
  std::vector<uint64_t> node_ingress;
  std::vector<uint64_t> node_egress;
  std::vector<uint64_t> endpoint_ingress;  // worker ranks then store endpoints
  std::vector<uint64_t> endpoint_egress;
  std::map<std::pair<uint32_t, uint32_t>, uint64_t> pair_bytes;  // (src_node, dst_node)

  uint64_t total_egress() const {
    uint64_t s = 0;
    for (auto v : node_egress) s += v;
    return s;
  }
  uint64_t total_ingress() const {
    uint64_t s = 0;
    for (auto v : node_ingress) s += v;
    return s;
  }

  // Combine per-process reports (TCP backend) into a cluster-wide view.
  void merge(const TrafficReport& other) {
    if (node_ingress.size() < other.node_ingress.size()) {
      node_ingress.resize(other.node_ingress.size(), 0);
      node_egress.resize(other.node_egress.size(), 0);
    }
    if (endpoint_ingress.size() < other.endpoint_ingress.size()) {
      endpoint_ingress.resize(other.endpoint_ingress.size(), 0);
      endpoint_egress.resize(other.endpoint_egress.size(), 0);
    }
    num_nodes = std::max(num_nodes, other.num_nodes);
    for (size_t i = 0; i < other.node_ingress.size(); ++i) node_ingress[i] += other.node_ingress[i];
    for (size_t i = 0; i < other.node_egress.size(); ++i) node_egress[i] += other.node_egress[i];
    for (size_t i = 0; i < other.endpoint_ingress.size(); ++i) {
      endpoint_ingress[i] += other.endpoint_ingress[i];
    }
    for (size_t i = 0; i < other.endpoint_egress.size(); ++i) {
      endpoint_egress[i] += other.endpoint_egress[i];
    }
    for (const auto& [k, v] : other.pair_bytes) pair_bytes[k] += v;
  }
};

namespace detail {

class TrafficCounters {
public:
  explicit TrafficCounters(const ClusterTopology& topo) : topo_(topo) {
    report_.num_nodes = topo.num_nodes;
    report_.node_ingress.assign(topo.num_nodes, 0);
    report_.node_egress.assign(topo.num_nodes, 0);
    report_.endpoint_ingress.assign(topo.endpoint_count(), 0);
    report_.endpoint_egress.assign(topo.endpoint_count(), 0);
  }

  void on_sent(uint32_t src_rank, uint32_t dst_rank, uint64_t framed_bytes) {
    const uint32_t sn = topo_.endpoint_node(src_rank);
    const uint32_t dn = topo_.endpoint_node(dst_rank);
    std::lock_guard lk(mu_);
    report_.node_egress[sn] += framed_bytes;
    report_.endpoint_egress[src_rank] += framed_bytes;
    report_.pair_bytes[{sn, dn}] += framed_bytes;
  }

  void on_received(uint32_t src_rank, uint32_t dst_rank, uint64_t framed_bytes) {
    (void)src_rank;
    const uint32_t dn = topo_.endpoint_node(dst_rank);
    std::lock_guard lk(mu_);
    report_.node_ingress[dn] += framed_bytes;
    report_.endpoint_ingress[dst_rank] += framed_bytes;
  }

  TrafficReport snapshot() const {
    std::lock_guard lk(mu_);
    return report_;
  }

private:
  ClusterTopology topo_;
  mutable std::mutex mu_;
  TrafficReport report_;
};

// Per-endpoint queue with (src, tag, iteration) matching. FIFO per match key:
// a matching recv always takes the earliest-arrived matching envelope.
class Mailbox {
public:
  void push(Envelope env) {
    {
      std::lock_guard lk(mu_);
      if (closed_) return;  // teardown race; drop
      items_.push_back(std::move(env));
    }
    cv_.notify_all();
  }

  Envelope pop_match(uint32_t src, uint32_t tag, uint32_t iteration,
                     std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lk(mu_);
    for (;;) {
      for (auto it = items_.begin(); it != items_.end(); ++it) {
        if (it->src_rank == src && it->tag == tag && it->iteration == iteration) {
          Envelope env = std::move(*it);
          items_.erase(it);
          return env;
        }
      }
      if (closed_ || closed_srcs_.count(src)) {
        throw PeerClosedError("fabric closed while waiting for src=" + std::to_string(src) +
                              " tag=" + std::to_string(tag) +
                              " iteration=" + std::to_string(iteration));
      }
      if (cv_.wait_until(lk, deadline) == std::cv_status::timeout) {
        // One final scan in case the notify raced the deadline.
        for (auto it = items_.begin(); it != items_.end(); ++it) {
          if (it->src_rank == src && it->tag == tag && it->iteration == iteration) {
            Envelope env = std::move(*it);
            items_.erase(it);
            return env;
          }
        }
        throw TimeoutError("timed out waiting for envelope src=" + std::to_string(src) +
                           " tag=" + std::to_string(tag) +
                           " iteration=" + std::to_string(iteration));
      }
    }
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  // Fail only waits on one source endpoint; messages already queued from it
  // stay consumable.
  void close_source(uint32_t src) {
    {
      std::lock_guard lk(mu_);
      closed_srcs_.insert(src);
    }
    cv_.notify_all();
  }

private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Envelope> items_;
  bool closed_ = false;
  std::set<uint32_t> closed_srcs_;
};

}  // namespace detail

// Message fabric. One instance hosts a set of endpoints: the INPROC backend
// hosts every endpoint of the cluster in-process; the TCP backend hosts one
// node's endpoints and reaches the rest over loopback sockets.
class Fabric {
public:
  explicit Fabric(const ClusterTopology& topo, uint32_t max_frame_bytes)
      : topo_(topo), max_frame_bytes_(max_frame_bytes) {
    topo_.validate();
    if (max_frame_bytes_ <= kFrameHeaderBytes) {
      throw Error("max frame size must exceed the header size");
    }
  }
  virtual ~Fabric() = default;

  const ClusterTopology& topology() const { return topo_; }
  uint32_t max_frame_bytes() const { return max_frame_bytes_; }

  virtual void send(Envelope env) = 0;
  virtual Envelope recv(uint32_t self_rank, uint32_t src_rank, uint32_t tag, uint32_t iteration,
                        std::chrono::milliseconds timeout = kDefaultRecvTimeout) = 0;
  // This process's counter view. Under TCP each node process sees its own
  // node's ingress/egress plus the pair rows it sent.
  virtual TrafficReport traffic() const = 0;
  virtual void close() = 0;

protected:
  void check_endpoint(uint32_t rank, const char* what) const {
    if (rank >= topo_.endpoint_count()) {
      throw Error(std::string(what) + " rank " + std::to_string(rank) + " out of range");
    }
  }

  ClusterTopology topo_;
  uint32_t max_frame_bytes_;
};

// --- in-process backend ------------------------------------------------------

class InprocFabric final : public Fabric {
public:
  explicit InprocFabric(const ClusterTopology& topo,
                        uint32_t max_frame_bytes = kDefaultMaxFrameBytes)
      : Fabric(topo, max_frame_bytes), counters_(topo) {
    boxes_.resize(topo_.endpoint_count());
    for (auto& b : boxes_) b = std::make_unique<detail::Mailbox>();
  }

  ~InprocFabric() override { close(); }

  void send(Envelope env) override {
    check_endpoint(env.src_rank, "src");
    check_endpoint(env.dst_rank, "dst");
    const uint64_t framed = wire::framed_size(env.payload.size(), max_frame_bytes_);
    if (topo_.endpoint_node(env.src_rank) != topo_.endpoint_node(env.dst_rank)) {
      counters_.on_sent(env.src_rank, env.dst_rank, framed);
      counters_.on_received(env.src_rank, env.dst_rank, framed);
    }
    boxes_[env.dst_rank]->push(std::move(env));
  }

  Envelope recv(uint32_t self_rank, uint32_t src_rank, uint32_t tag, uint32_t iteration,
                std::chrono::milliseconds timeout = kDefaultRecvTimeout) override {
    check_endpoint(self_rank, "self");
    check_endpoint(src_rank, "src");
    return boxes_[self_rank]->pop_match(src_rank, tag, iteration, timeout);
  }

  TrafficReport traffic() const override { return counters_.snapshot(); }

  void close() override {
    for (auto& b : boxes_) b->close();
  }

private:
  std::vector<std::unique_ptr<detail::Mailbox>> boxes_;
  detail::TrafficCounters counters_;
};

// --- TCP backend ---------------------------------------------------------------

namespace detail {

inline void throw_errno(const std::string& what) {
  throw BindError(what + ": " + std::strerror(errno));
}

class Socket {
public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  Socket& operator=(Socket&& o) noexcept {
    reset();
    fd_ = o.fd_;
    o.fd_ = -1;
    return *this;
  }
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  int release() {
    int f = fd_;
    fd_ = -1;
    return f;
  }

private:
  int fd_ = -1;
};

inline void write_all(int fd, const uint8_t* data, size_t len) {
  size_t off = 0;
  while (off < len) {
    ssize_t n = ::send(fd, data + off, len - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw PeerClosedError(std::string("socket write failed: ") + std::strerror(errno));
    }
    off += static_cast<size_t>(n);
  }
}

// Returns false on clean EOF at a frame boundary.
inline bool read_all(int fd, uint8_t* data, size_t len) {
  size_t off = 0;
  while (off < len) {
    ssize_t n = ::recv(fd, data + off, len - off, 0);
    if (n == 0) {
      if (off == 0) return false;
      throw PeerClosedError("socket closed mid-frame");
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw PeerClosedError(std::string("socket read failed: ") + std::strerror(errno));
    }
    off += static_cast<size_t>(n);
  }
  return true;
}

}  // namespace detail

// Probe the kernel for n currently-free loopback ports. Best effort: the
// ports are released again before use, so callers should bind soon after.
inline std::vector<uint16_t> pick_free_ports(size_t n) {
  std::vector<detail::Socket> holders;
  std::vector<uint16_t> ports;
  for (size_t i = 0; i < n; ++i) {
    detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) detail::throw_errno("socket");
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      detail::throw_errno("bind");
    }
    socklen_t len = sizeof(addr);
    if (::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
      detail::throw_errno("getsockname");
    }
    ports.push_back(ntohs(addr.sin_port));
    holders.push_back(std::move(s));  // hold until all picked so ports are distinct
  }
  return ports;
}

// One node's endpoints, connected to peer nodes over loopback TCP. One duplex
// socket per node pair carries all rank-to-rank envelopes between the pair;
// intra-node envelopes never touch a socket (and are not counted).
class TcpFabric final : public Fabric {
public:
  TcpFabric(const ClusterTopology& topo, uint32_t node_index, std::vector<uint16_t> ports,
            uint32_t max_frame_bytes = kDefaultMaxFrameBytes,
            std::chrono::milliseconds connect_timeout = std::chrono::milliseconds(15000))
      : Fabric(topo, max_frame_bytes), node_(node_index), ports_(std::move(ports)),
        counters_(topo) {
    if (node_ >= topo_.num_nodes) throw Error("node index out of range");
    if (ports_.size() != topo_.num_nodes) {
      throw BindError("expected " + std::to_string(topo_.num_nodes) + " ports, got " +
                      std::to_string(ports_.size()));
    }
    const uint32_t local_endpoints = topo_.workers_per_node + 1;  // workers + store
    boxes_.resize(local_endpoints);
    for (auto& b : boxes_) b = std::make_unique<detail::Mailbox>();
    peers_.resize(topo_.num_nodes);
    peer_write_mu_ = std::vector<std::mutex>(topo_.num_nodes);

    if (topo_.num_nodes > 1) {
      open_listener();
      connect_mesh(connect_timeout);
      for (uint32_t p = 0; p < topo_.num_nodes; ++p) {
        if (p == node_) continue;
        readers_.emplace_back([this, p] { reader_loop(p); });
      }
    }
  }

  ~TcpFabric() override {
    close();
    for (auto& t : readers_) {
      if (t.joinable()) t.join();
    }
  }

  void send(Envelope env) override {
    check_endpoint(env.src_rank, "src");
    check_endpoint(env.dst_rank, "dst");
    const uint32_t src_node = topo_.endpoint_node(env.src_rank);
    const uint32_t dst_node = topo_.endpoint_node(env.dst_rank);
    if (src_node != node_) {
      throw Error("send from rank " + std::to_string(env.src_rank) + " not hosted on node " +
                  std::to_string(node_));
    }
    if (dst_node == node_) {
      // Same node: deliver through the local mailbox, no framing, no counting.
      wire::chunk_count_for(env.payload.size(), max_frame_bytes_);  // size limit still applies
      boxes_[local_index(env.dst_rank)]->push(std::move(env));
      return;
    }
    const uint32_t chunks = wire::chunk_count_for(env.payload.size(), max_frame_bytes_);
    const uint32_t per_chunk = wire::max_chunk_payload(max_frame_bytes_);
    uint64_t framed = 0;
    {
      std::lock_guard lk(peer_write_mu_[dst_node]);
      if (!peers_[dst_node].valid()) throw PeerClosedError("no connection to peer node");
      for (uint32_t c = 0; c < chunks; ++c) {
        const uint64_t off = uint64_t(c) * per_chunk;
        const uint32_t len = static_cast<uint32_t>(
            std::min<uint64_t>(per_chunk, env.payload.size() - off));
        auto frame = wire::encode_frame(env.src_rank, env.dst_rank, env.tag, env.iteration,
                                        static_cast<uint16_t>(c), static_cast<uint16_t>(chunks),
                                        env.payload.data() + off, len);
        detail::write_all(peers_[dst_node].fd(), frame.data(), frame.size());
        framed += frame.size() - 4;  // counted size excludes the length prefix
      }
    }
    counters_.on_sent(env.src_rank, env.dst_rank, framed);
  }

  Envelope recv(uint32_t self_rank, uint32_t src_rank, uint32_t tag, uint32_t iteration,
                std::chrono::milliseconds timeout = kDefaultRecvTimeout) override {
    check_endpoint(self_rank, "self");
    check_endpoint(src_rank, "src");
    if (topo_.endpoint_node(self_rank) != node_) {
      throw Error("recv for rank " + std::to_string(self_rank) + " not hosted on node " +
                  std::to_string(node_));
    }
    return boxes_[local_index(self_rank)]->pop_match(src_rank, tag, iteration, timeout);
  }

  TrafficReport traffic() const override { return counters_.snapshot(); }

  void close() override {
    bool expected = false;
    if (!closing_.compare_exchange_strong(expected, true)) {
      for (auto& b : boxes_) b->close();
      return;
    }
    for (auto& p : peers_) {
      if (p.valid()) ::shutdown(p.fd(), SHUT_RDWR);
    }
    if (listener_.valid()) ::shutdown(listener_.fd(), SHUT_RDWR);
    for (auto& b : boxes_) b->close();
  }

  uint32_t node_index() const { return node_; }

private:
  uint32_t local_index(uint32_t rank) const {
    return topo_.is_store_rank(rank) ? topo_.workers_per_node : topo_.local_of(rank);
  }

  void open_listener() {
    detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
    if (!s.valid()) detail::throw_errno("socket");
    int one = 1;
    ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(ports_[node_]);
    if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      throw BindError("cannot bind port " + std::to_string(ports_[node_]) + ": " +
                      std::strerror(errno));
    }
    if (::listen(s.fd(), static_cast<int>(topo_.num_nodes)) != 0) detail::throw_errno("listen");
    listener_ = std::move(s);
  }

  // Lower-index nodes dial higher-index nodes; every unordered pair ends up
  // with exactly one socket. Accepting runs concurrently with dialing.
  void connect_mesh(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    const uint32_t expected_inbound = node_;
    std::string accept_error;
    std::thread acceptor([&] {
      try {
        for (uint32_t i = 0; i < expected_inbound; ++i) accept_one(deadline);
      } catch (const std::exception& e) {
        accept_error = e.what();
      }
    });
    try {
      for (uint32_t peer = node_ + 1; peer < topo_.num_nodes; ++peer) dial(peer, deadline);
    } catch (...) {
      acceptor.join();
      throw;
    }
    acceptor.join();
    if (!accept_error.empty()) throw HandshakeError(accept_error);
  }

  void accept_one(std::chrono::steady_clock::time_point deadline) {
    pollfd pfd{listener_.fd(), POLLIN, 0};
    for (;;) {
      const auto remain = std::chrono::duration_cast<std::chrono::milliseconds>(
          deadline - std::chrono::steady_clock::now());
      if (remain.count() <= 0) throw TimeoutError("timed out waiting for peer connections");
      int rc = ::poll(&pfd, 1, static_cast<int>(std::min<int64_t>(remain.count(), 200)));
      if (rc < 0 && errno != EINTR) detail::throw_errno("poll");
      if (rc > 0) break;
    }
    detail::Socket conn(::accept(listener_.fd(), nullptr, nullptr));
    if (!conn.valid()) detail::throw_errno("accept");
    configure(conn.fd());

    Envelope hs = read_frame_blocking(conn.fd(), /*expect_handshake=*/true);
    auto peer_hello = wire::decode_handshake(hs.payload.data(),
                                             static_cast<uint32_t>(hs.payload.size()));
    if (peer_hello.world_size != topo_.world_size()) {
      throw HandshakeError("peer world_size " + std::to_string(peer_hello.world_size) +
                           " != " + std::to_string(topo_.world_size()));
    }
    const uint32_t peer_node = topo_.node_of(peer_hello.rank);
    if (peer_node >= node_ || peers_[peer_node].valid()) {
      throw HandshakeError("unexpected connection from rank " + std::to_string(peer_hello.rank));
    }
    auto reply = wire::encode_handshake(lead_rank(), lead_rank(), topo_.world_size());
    detail::write_all(conn.fd(), reply.data(), reply.size());
    peers_[peer_node] = std::move(conn);
  }

  void dial(uint32_t peer, std::chrono::steady_clock::time_point deadline) {
    for (;;) {
      detail::Socket s(::socket(AF_INET, SOCK_STREAM, 0));
      if (!s.valid()) detail::throw_errno("socket");
      sockaddr_in addr{};
      addr.sin_family = AF_INET;
      addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
      addr.sin_port = htons(ports_[peer]);
      if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) {
        configure(s.fd());
        auto hello = wire::encode_handshake(lead_rank(), lead_rank(), topo_.world_size());
        detail::write_all(s.fd(), hello.data(), hello.size());
        Envelope reply;
        try {
          reply = read_frame_blocking(s.fd(), /*expect_handshake=*/true);
        } catch (const PeerClosedError&) {
          throw HandshakeError("peer node " + std::to_string(peer) + " rejected handshake");
        }
        auto peer_hello = wire::decode_handshake(reply.payload.data(),
                                                 static_cast<uint32_t>(reply.payload.size()));
        if (peer_hello.world_size != topo_.world_size()) {
          throw HandshakeError("peer world_size " + std::to_string(peer_hello.world_size) +
                               " != " + std::to_string(topo_.world_size()));
        }
        if (topo_.node_of(peer_hello.rank) != peer) {
          throw HandshakeError("dialed node " + std::to_string(peer) + " but got rank " +
                               std::to_string(peer_hello.rank));
        }
        peers_[peer] = std::move(s);
        return;
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        throw TimeoutError("timed out connecting to node " + std::to_string(peer));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
  }

  static void configure(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  uint32_t lead_rank() const { return node_ * topo_.workers_per_node; }

  // Reads one complete frame. During handshake no chunked frames are legal.
  Envelope read_frame_blocking(int fd, bool expect_handshake) {
    uint8_t len_buf[4];
    if (!detail::read_all(fd, len_buf, 4)) throw PeerClosedError("peer closed during handshake");
    const uint32_t length = wire::get_u32(len_buf);
    if (length < kFrameHeaderBytes || length > max_frame_bytes_) {
      throw ParseError("bad frame length " + std::to_string(length));
    }
    std::vector<uint8_t> rest(length);
    if (!detail::read_all(fd, rest.data(), rest.size())) {
      throw PeerClosedError("peer closed mid-frame");
    }
    FrameHeader h = wire::decode_header(length, rest.data());
    if (expect_handshake && h.tag != kHandshakeTag) {
      throw HandshakeError("expected handshake frame, got tag " + std::to_string(h.tag));
    }
    Envelope env;
    env.src_rank = h.src_rank;
    env.dst_rank = h.dst_rank;
    env.tag = h.tag;
    env.iteration = h.iteration;
    env.payload.assign(rest.begin() + kFrameHeaderBytes, rest.end());
    return env;
  }

  void reader_loop(uint32_t peer) {
    try {
      const int fd = peers_[peer].fd();
      for (;;) {
        uint8_t len_buf[4];
        if (!detail::read_all(fd, len_buf, 4)) break;  // peer done
        const uint32_t length = wire::get_u32(len_buf);
        if (length < kFrameHeaderBytes || length > max_frame_bytes_) {
          throw ParseError("bad frame length " + std::to_string(length));
        }
        std::vector<uint8_t> rest(length);
        if (!detail::read_all(fd, rest.data(), rest.size())) {
          throw PeerClosedError("peer closed mid-frame");
        }
        FrameHeader h = wire::decode_header(length, rest.data());
        uint64_t framed = length;
        Envelope env;
        env.src_rank = h.src_rank;
        env.dst_rank = h.dst_rank;
        env.tag = h.tag;
        env.iteration = h.iteration;
        env.payload.assign(rest.begin() + kFrameHeaderBytes, rest.end());
        // Chunks of one envelope are written back to back under the sender's
        // lock, so the continuation frames are next on this socket.
        for (uint16_t c = 1; c < h.chunk_count; ++c) {
          if (!detail::read_all(fd, len_buf, 4)) throw PeerClosedError("peer closed mid-chunk");
          const uint32_t clen = wire::get_u32(len_buf);
          std::vector<uint8_t> crest(clen);
          if (!detail::read_all(fd, crest.data(), crest.size())) {
            throw PeerClosedError("peer closed mid-chunk");
          }
          FrameHeader ch = wire::decode_header(clen, crest.data());
          if (ch.src_rank != h.src_rank || ch.dst_rank != h.dst_rank || ch.tag != h.tag ||
              ch.iteration != h.iteration || ch.chunk_index != c) {
            throw ParseError("interleaved chunk sequence");
          }
          env.payload.insert(env.payload.end(), crest.begin() + kFrameHeaderBytes, crest.end());
          framed += clen;
        }
        counters_.on_received(env.src_rank, env.dst_rank, framed);
        boxes_[local_index(env.dst_rank)]->push(std::move(env));
      }
    } catch (const std::exception&) {
      // fall through to teardown
    }
    if (!closing_.load()) {
      // The peer is gone. A node that finished its run closes its sockets
      // while we may still have local work in flight, so only waits on that
      // node's endpoints fail; everything else keeps running.
      for (auto& b : boxes_) {
        for (uint32_t w = 0; w < topo_.workers_per_node; ++w) {
          b->close_source(peer * topo_.workers_per_node + w);
        }
        b->close_source(topo_.store_rank(peer));
      }
    }
  }

  uint32_t node_;
  std::vector<uint16_t> ports_;
  detail::TrafficCounters counters_;
  std::vector<std::unique_ptr<detail::Mailbox>> boxes_;
  detail::Socket listener_;
  std::vector<detail::Socket> peers_;
  std::vector<std::mutex> peer_write_mu_;
  std::vector<std::thread> readers_;
  std::atomic<bool> closing_{false};
};

inline std::unique_ptr<Fabric> create_inproc_fabric(const ClusterTopology& topo,
                                                    uint32_t max_frame = kDefaultMaxFrameBytes) {
  return std::make_unique<InprocFabric>(topo, max_frame);
}

// --- collectives ---------------------------------------------------------------

struct CollectiveStats {
  uint64_t cross_node_bytes_sent = 0;
  uint64_t cross_node_bytes_received = 0;
};

// SPMD all-to-all: each participant contributes one payload per participant
// (self included) and receives payloads ordered by source position. The self
// payload is moved through memory, never the fabric.
inline std::vector<std::vector<uint8_t>> all_to_all(Fabric& fabric, uint32_t self_rank,
                                                    const std::vector<uint32_t>& participants,
                                                    std::vector<std::vector<uint8_t>> outgoing,
                                                    uint32_t tag, uint32_t iteration,
                                                    CollectiveStats* stats = nullptr) {
  if (outgoing.size() != participants.size()) {
    throw Error("all_to_all: expected one payload per participant");
  }
  size_t self_idx = participants.size();
  for (size_t i = 0; i < participants.size(); ++i) {
    if (participants[i] == self_rank) self_idx = i;
  }
  if (self_idx == participants.size()) throw Error("all_to_all: self not in participants");

  const auto& topo = fabric.topology();
  const uint32_t self_node = topo.endpoint_node(self_rank);
  std::vector<std::vector<uint8_t>> incoming(participants.size());
  for (size_t j = 0; j < participants.size(); ++j) {
    if (j == self_idx) continue;
    if (stats && topo.endpoint_node(participants[j]) != self_node) {
      stats->cross_node_bytes_sent +=
          wire::framed_size(outgoing[j].size(), fabric.max_frame_bytes());
    }
    fabric.send({self_rank, participants[j], tag, iteration, std::move(outgoing[j])});
  }
  incoming[self_idx] = std::move(outgoing[self_idx]);
  for (size_t j = 0; j < participants.size(); ++j) {
    if (j == self_idx) continue;
    Envelope env = fabric.recv(self_rank, participants[j], tag, iteration);
    if (stats && topo.endpoint_node(participants[j]) != self_node) {
      stats->cross_node_bytes_received +=
          wire::framed_size(env.payload.size(), fabric.max_frame_bytes());
    }
    incoming[j] = std::move(env.payload);
  }
  return incoming;
}

// Root collects one payload per participant, ordered by participant position.
// Non-roots get an empty result.
inline std::vector<std::vector<uint8_t>> gather_to(Fabric& fabric, uint32_t self_rank,
                                                   uint32_t root,
                                                   const std::vector<uint32_t>& participants,
                                                   std::vector<uint8_t> payload, uint32_t tag,
                                                   uint32_t iteration,
                                                   std::chrono::milliseconds timeout =
                                                       kDefaultRecvTimeout) {
  if (self_rank != root) {
    fabric.send({self_rank, root, tag, iteration, std::move(payload)});
    return {};
  }
  std::vector<std::vector<uint8_t>> out(participants.size());
  std::vector<uint32_t> missing;
  for (size_t i = 0; i < participants.size(); ++i) {
    if (participants[i] == root) {
      out[i] = std::move(payload);
      continue;
    }
    try {
      out[i] = fabric.recv(root, participants[i], tag, iteration, timeout).payload;
    } catch (const TimeoutError&) {
      missing.push_back(participants[i]);
    }
  }
  if (!missing.empty()) {
    std::string ids;
    for (uint32_t r : missing) {
      if (!ids.empty()) ids += ", ";
      ids += std::to_string(r);
    }
    throw TimeoutError("gather timed out; missing ranks: " + ids);
  }
  return out;
}

// Root hands participant i the i-th part; everyone returns with their own part.
inline std::vector<uint8_t> scatter_from(Fabric& fabric, uint32_t self_rank, uint32_t root,
                                         const std::vector<uint32_t>& participants,
                                         std::vector<std::vector<uint8_t>> parts, uint32_t tag,
                                         uint32_t iteration) {
  if (self_rank == root) {
    if (parts.size() != participants.size()) {
      throw Error("scatter_from: expected one part per participant");
    }
    std::vector<uint8_t> own;
    for (size_t i = 0; i < participants.size(); ++i) {
      if (participants[i] == root) {
        own = std::move(parts[i]);
      } else {
        fabric.send({root, participants[i], tag, iteration, std::move(parts[i])});
      }
    }
    return own;
  }
  return fabric.recv(self_rank, root, tag, iteration).payload;
}

}  // namespace distflow
