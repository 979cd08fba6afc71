#include "essa/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

#include "essa/error.hpp"

namespace essa {
namespace {

[[noreturn]] void transport_fail(const std::string& what) { throw Error(ErrorCode::kTransportError, what); }

// One direction of an in-process pipe.
struct Channel {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> bytes;
  bool closed = false;
};

struct PipeShared {
  Channel a_to_b;
  Channel b_to_a;

  void close_all() {
    for (Channel* c : {&a_to_b, &b_to_a}) {
      std::lock_guard lock(c->mu);
      c->closed = true;
      c->cv.notify_all();
    }
  }
};

class PipeEnd final : public Connection {
 public:
  PipeEnd(std::shared_ptr<PipeShared> shared, Channel* out, Channel* in)
      : shared_(std::move(shared)), out_(out), in_(in) {}
  ~PipeEnd() override { close(); }

  void write(std::span<const std::uint8_t> bytes) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) transport_fail("write on closed pipe");
    out_->bytes.insert(out_->bytes.end(), bytes.begin(), bytes.end());
    out_->cv.notify_all();
  }

  void read_exact(std::span<std::uint8_t> out) override {
    std::unique_lock lock(in_->mu);
    in_->cv.wait(lock, [&] { return in_->bytes.size() >= out.size() || in_->closed; });
    if (in_->bytes.size() < out.size()) transport_fail("pipe closed");
    std::copy_n(in_->bytes.begin(), out.size(), out.begin());
    in_->bytes.erase(in_->bytes.begin(), in_->bytes.begin() + static_cast<std::ptrdiff_t>(out.size()));
  }

  void close() override { shared_->close_all(); }

 private:
  std::shared_ptr<PipeShared> shared_;
  Channel* out_;
  Channel* in_;
};

class SocketConnection final : public Connection {
 public:
  explicit SocketConnection(int fd) : fd_(fd) {
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~SocketConnection() override {
    close();
    ::close(fd_);
  }

  void write(std::span<const std::uint8_t> bytes) override {
    std::lock_guard lock(write_mu_);
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const auto n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) transport_fail(std::string("send failed: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(n);
    }
  }

  void read_exact(std::span<std::uint8_t> out) override {
    std::size_t got = 0;
    while (got < out.size()) {
      const auto n = ::recv(fd_, out.data() + got, out.size() - got, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n == 0) transport_fail("connection closed by peer");
      if (n < 0) transport_fail(std::string("recv failed: ") + std::strerror(errno));
      got += static_cast<std::size_t>(n);
    }
  }

  void close() override {
    if (!shut_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_;
  std::mutex write_mu_;
  std::atomic<bool> shut_{false};
};

sockaddr_in resolve(const Endpoint& e) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(e.host.c_str(), nullptr, &hints, &res);
  if (rc != 0 || res == nullptr) transport_fail("cannot resolve " + e.host + ": " + ::gai_strerror(rc));
  sockaddr_in addr{};
  std::memcpy(&addr, res->ai_addr, sizeof addr);
  ::freeaddrinfo(res);
  addr.sin_port = htons(e.port);
  return addr;
}

}  // namespace

void send_message(Connection& c, const wire::Message& m) { c.write(wire::encode_frame(m)); }

wire::Message receive_message(Connection& c) {
  std::array<std::uint8_t, wire::kHeaderSize> header_bytes{};
  c.read_exact(header_bytes);
  const auto header = wire::decode_header(header_bytes);
  std::vector<std::uint8_t> payload(header.length);
  c.read_exact(payload);
  return wire::decode_frame_body(header, payload);
}

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_pipe() {
  auto shared = std::make_shared<PipeShared>();
  auto a = std::make_unique<PipeEnd>(shared, &shared->a_to_b, &shared->b_to_a);
  auto b = std::make_unique<PipeEnd>(shared, &shared->b_to_a, &shared->a_to_b);
  return {std::move(a), std::move(b)};
}

void ByteCountingConnection::write(std::span<const std::uint8_t> bytes) {
  inner_->write(bytes);
  counters_->bytes += bytes.size();
  counters_->frames += 1;
}

Endpoint parse_endpoint(const std::string& text) {
  std::string rest = text;
  if (rest.starts_with("tcp://")) rest = rest.substr(6);
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
    throw Error(ErrorCode::kInvalidConfig, "endpoint '" + text + "' is not host:port");
  }
  Endpoint e;
  e.host = rest.substr(0, colon);
  try {
    std::size_t used = 0;
    const auto port = std::stoul(rest.substr(colon + 1), &used);
    if (used != rest.size() - colon - 1 || port > 65535) throw std::out_of_range("port");
    e.port = static_cast<std::uint16_t>(port);
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kInvalidConfig, "endpoint '" + text + "' has an invalid port");
  }
  return e;
}

std::string to_string(const Endpoint& e) { return e.host + ":" + std::to_string(e.port); }

TcpListener::TcpListener(const Endpoint& bind_to) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) transport_fail(std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  auto addr = resolve(bind_to);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 64) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd_);
    transport_fail("cannot listen on " + to_string(bind_to) + ": " + err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { close(); }

void TcpListener::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

std::unique_ptr<Connection> TcpListener::accept(std::chrono::milliseconds timeout) {
  pollfd p{fd_, POLLIN, 0};
  const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
  if (rc == 0) return nullptr;
  if (rc < 0) transport_fail(std::string("poll: ") + std::strerror(errno));
  const int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) transport_fail(std::string("accept: ") + std::strerror(errno));
  return std::make_unique<SocketConnection>(fd);
}

std::unique_ptr<Connection> tcp_connect(const Endpoint& e, const RetryPolicy& retry) {
  const auto addr = resolve(e);
  auto backoff = retry.initial_backoff;
  std::string last_error;
  for (int attempt = 0; attempt < std::max(1, retry.attempts); ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff = std::min(backoff * 2, retry.max_backoff);
    }
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) transport_fail(std::string("socket: ") + std::strerror(errno));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
      return std::make_unique<SocketConnection>(fd);
    }
    last_error = std::strerror(errno);
    ::close(fd);
  }
  transport_fail("cannot connect to " + to_string(e) + ": " + last_error);
}

}  // namespace essa
