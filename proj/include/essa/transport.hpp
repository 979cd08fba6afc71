#pragma once

// Byte-stream connections carrying wire frames. The in-process pipe and the
// TCP socket behave identically: blocking reads, whole-frame writes, and
// close() wakes any reader on either end with TransportError.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>

#include "essa/wire.hpp"

namespace essa {

class Connection {
 public:
  virtual ~Connection() = default;
  virtual void write(std::span<const std::uint8_t> bytes) = 0;
  virtual void read_exact(std::span<std::uint8_t> out) = 0;
  virtual void close() = 0;
};

// One frame per write() call.
void send_message(Connection& c, const wire::Message& m);
// Throws CorruptFrame on a bad header or checksum, TransportError on EOF.
wire::Message receive_message(Connection& c);

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_pipe();

// Counts everything written through it; shares counters across copies.
struct ByteCounters {
  std::atomic<std::uint64_t> bytes{0};
  std::atomic<std::uint64_t> frames{0};

  // Bytes excluding the fixed per-frame header.
  std::uint64_t payload_bytes() const { return bytes.load() - frames.load() * wire::kHeaderSize; }
  void reset() {
    bytes = 0;
    frames = 0;
  }
};

class ByteCountingConnection final : public Connection {
 public:
  ByteCountingConnection(std::unique_ptr<Connection> inner, std::shared_ptr<ByteCounters> counters)
      : inner_(std::move(inner)), counters_(std::move(counters)) {}

  void write(std::span<const std::uint8_t> bytes) override;
  void read_exact(std::span<std::uint8_t> out) override { inner_->read_exact(out); }
  void close() override { inner_->close(); }

 private:
  std::unique_ptr<Connection> inner_;
  std::shared_ptr<ByteCounters> counters_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
};

// Accepts "host:port" or "tcp://host:port".
Endpoint parse_endpoint(const std::string& text);
std::string to_string(const Endpoint& e);

class TcpListener {
 public:
  explicit TcpListener(const Endpoint& bind_to);  // port 0 picks a free port
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  // Returns nullptr when the timeout expires first.
  std::unique_ptr<Connection> accept(std::chrono::milliseconds timeout);
  void close();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

struct RetryPolicy {
  int attempts = 10;
  std::chrono::milliseconds initial_backoff{50};
  std::chrono::milliseconds max_backoff{2000};
};

// Exponential backoff between attempts; TransportError once they run out.
std::unique_ptr<Connection> tcp_connect(const Endpoint& e, const RetryPolicy& retry = {});

}  // namespace essa
