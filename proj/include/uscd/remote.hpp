#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "uscd/backends.hpp"

namespace uscd {

inline constexpr int kProtocolVersion = 1;

/// Newline-delimited frames over a pair of file descriptors (a socket, or
/// the pipes of a child process). Owns the descriptors.
class LineChannel {
 public:
  LineChannel(int read_fd, int write_fd);
  ~LineChannel();
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;

  /// Throws BackendError when the peer is gone.
  void send_line(const std::string& line);

  /// Next frame without its newline. std::nullopt on orderly EOF.
  /// Throws BackendTimeout when nothing complete arrives in time.
  std::optional<std::string> recv_line(std::chrono::milliseconds timeout);

  void close();

 private:
  int read_fd_;
  int write_fd_;
  std::string pending_;
};

std::unique_ptr<LineChannel> connect_tcp(const std::string& host, std::uint16_t port,
                                         std::chrono::milliseconds timeout);

/// Loopback-friendly TCP listener. Port 0 binds an ephemeral port.
class TcpListener {
 public:
  TcpListener(const std::string& host, std::uint16_t port);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }

  /// Blocks up to `timeout`; nullptr when nothing connected.
  std::unique_ptr<LineChannel> accept(std::chrono::milliseconds timeout);

 private:
  int fd_;
  std::uint16_t port_;
};

/// Answers protocol frames for one connection until "bye", EOF or `stop`.
/// Returns the number of score requests served.
std::size_t serve_connection(Backend& backend, LineChannel& channel,
                             const std::atomic<bool>* stop = nullptr);

/// Accepts connections until `stop` is set, one thread per connection.
/// Non-shareable backends are cloned per connection.
void serve_tcp(Backend& backend, TcpListener& listener, const std::atomic<bool>& stop);

/// Where a remote backend lives: "HOST:PORT", "tcp:HOST:PORT" or
/// "exec:COMMAND" (the command speaks the protocol on stdin/stdout).
struct RemoteEndpoint {
  enum class Transport { kTcp, kExec };
  Transport transport = Transport::kTcp;
  std::string host;
  std::uint16_t port = 0;
  std::string command;
  std::chrono::milliseconds timeout{10000};
  int protocol_version = kProtocolVersion;

  static RemoteEndpoint parse(const std::string& address);
  std::string address() const;
};

/// Client side of the wire protocol. One in-flight request per instance.
class RemoteBackend : public Backend {
 public:
  /// Connects and completes the hello handshake. Throws VocabMismatch when
  /// the server's vocabulary size differs from the local vocabulary.
  RemoteBackend(RemoteEndpoint endpoint, std::shared_ptr<const Vocab> vocab);
  ~RemoteBackend() override;

  const Vocab& vocab() const override { return *vocab_; }
  std::vector<double> score(std::span<const TokenId> context) override;
  bool shareable() const override { return false; }
  std::unique_ptr<Backend> clone() const override;

  /// Transport retries after the first attempt of a score request.
  static constexpr int kMaxRetries = 2;

 private:
  void open();
  std::string request(const std::string& frame);

  RemoteEndpoint endpoint_;
  std::shared_ptr<const Vocab> vocab_;
  std::unique_ptr<LineChannel> channel_;
  int child_pid_ = -1;
};

}  // namespace uscd
