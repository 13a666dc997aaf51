#include "uscd/remote.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <thread>

#include <nlohmann/json.hpp>

#include "uscd/error.hpp"

namespace uscd {

using nlohmann::json;

namespace {

std::string errno_text() { return std::strerror(errno); }

int poll_one(int fd, short events, std::chrono::milliseconds timeout) {
  pollfd pfd{fd, events, 0};
  int rc;
  do {
    rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
  } while (rc < 0 && errno == EINTR);
  if (rc < 0) throw BackendError("poll failed: " + errno_text());
  return rc;
}

json hello_frame() { return {{"v", kProtocolVersion}, {"type", "hello"}}; }

json error_frame(const std::string& message) {
  return {{"v", kProtocolVersion}, {"type", "error"}, {"message", message}};
}

}  // namespace

LineChannel::LineChannel(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) {}

LineChannel::~LineChannel() { close(); }

void LineChannel::close() {
  if (read_fd_ >= 0) ::close(read_fd_);
  if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
  read_fd_ = write_fd_ = -1;
}

void LineChannel::send_line(const std::string& line) {
  if (write_fd_ < 0) throw BackendError("channel is closed");
  std::string frame = line + '\n';
  std::size_t sent = 0;
  while (sent < frame.size()) {
    ssize_t n;
    if (write_fd_ == read_fd_) {
      n = ::send(write_fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
    } else {
      n = ::write(write_fd_, frame.data() + sent, frame.size() - sent);
    }
    if (n < 0) {
      if (errno == EINTR) continue;
      throw BackendError("send failed: " + errno_text());
    }
    sent += static_cast<std::size_t>(n);
  }
}

std::optional<std::string> LineChannel::recv_line(std::chrono::milliseconds timeout) {
  if (read_fd_ < 0) throw BackendError("channel is closed");
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (auto nl = pending_.find('\n'); nl != std::string::npos) {
      std::string line = pending_.substr(0, nl);
      pending_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0 || poll_one(read_fd_, POLLIN, left) == 0) {
      throw BackendTimeout("no frame within " + std::to_string(timeout.count()) + " ms");
    }
    char buf[65536];
    ssize_t n = ::read(read_fd_, buf, sizeof(buf));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw BackendError("read failed: " + errno_text());
    }
    if (n == 0) {
      if (pending_.empty()) return std::nullopt;
      std::string line = std::move(pending_);
      pending_.clear();
      return line;
    }
    pending_.append(buf, static_cast<std::size_t>(n));
  }
}

std::unique_ptr<LineChannel> connect_tcp(const std::string& host, std::uint16_t port,
                                         std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  std::string service = std::to_string(port);
  if (int rc = ::getaddrinfo(host.c_str(), service.c_str(), &hints, &found); rc != 0) {
    throw BackendError("cannot resolve '" + host + "': " + gai_strerror(rc));
  }
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(found, ::freeaddrinfo);
  std::string last_error = "no addresses";
  for (addrinfo* ai = found; ai != nullptr; ai = ai->ai_next) {
    int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) continue;
    int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      if (poll_one(fd, POLLOUT, timeout) == 0) {
        ::close(fd);
        throw BackendTimeout("connect to " + host + ":" + service + " timed out");
      }
      int err = 0;
      socklen_t len = sizeof(err);
      ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
      rc = err == 0 ? 0 : -1;
      errno = err;
    }
    if (rc < 0) {
      last_error = errno_text();
      ::close(fd);
      continue;
    }
    ::fcntl(fd, F_SETFL, flags);
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return std::make_unique<LineChannel>(fd, fd);
  }
  throw BackendError("cannot connect to " + host + ":" + service + ": " + last_error);
}

TcpListener::TcpListener(const std::string& host, std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (fd_ < 0) throw BackendError("socket failed: " + errno_text());
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw ConfigError("listen address must be an IPv4 literal, got '" + host + "'");
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 || ::listen(fd_, 16) < 0) {
    std::string why = errno_text();
    ::close(fd_);
    throw BackendError("cannot listen on " + host + ":" + std::to_string(port) + ": " + why);
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<LineChannel> TcpListener::accept(std::chrono::milliseconds timeout) {
  if (poll_one(fd_, POLLIN, timeout) == 0) return nullptr;
  int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
  if (fd < 0) {
    if (errno == EINTR || errno == EAGAIN || errno == ECONNABORTED) return nullptr;
    throw BackendError("accept failed: " + errno_text());
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<LineChannel>(fd, fd);
}

std::size_t serve_connection(Backend& backend, LineChannel& channel,
                             const std::atomic<bool>* stop) {
  std::size_t served = 0;
  const auto tick = std::chrono::milliseconds(100);
  for (;;) {
    std::optional<std::string> line;
    try {
      line = channel.recv_line(tick);
    } catch (const BackendTimeout&) {
      if (stop && stop->load()) return served;
      continue;
    } catch (const BackendError&) {
      return served;
    }
    if (!line) return served;
    if (line->empty()) continue;

    json reply;
    try {
      json msg = json::parse(*line);
      if (!msg.is_object() || msg.value("v", 0) != kProtocolVersion) {
        reply = error_frame("unsupported protocol version");
      } else {
        const std::string type = msg.value("type", "");
        if (type == "hello") {
          const Vocab& vocab = backend.vocab();
          reply = {{"v", kProtocolVersion},
                   {"type", "hello"},
                   {"vocab_size", vocab.size()},
                   {"eos_id", vocab.eos_id() ? json(*vocab.eos_id()) : json(nullptr)}};
        } else if (type == "score") {
          auto ctx = msg.at("ctx").get<std::vector<TokenId>>();
          for (TokenId id : ctx) backend.vocab().token(id);
          reply = {{"v", kProtocolVersion}, {"type", "logits"}, {"values", backend.score(ctx)}};
          ++served;
        } else if (type == "bye") {
          channel.close();
          return served;
        } else {
          reply = error_frame("unknown frame type '" + type + "'");
        }
      }
    } catch (const json::exception& e) {
      reply = error_frame(std::string("malformed frame: ") + e.what());
    } catch (const Error& e) {
      reply = error_frame(e.what());
    }
    try {
      channel.send_line(reply.dump());
    } catch (const BackendError&) {
      return served;
    }
  }
}

void serve_tcp(Backend& backend, TcpListener& listener, const std::atomic<bool>& stop) {
  std::vector<std::thread> workers;
  while (!stop.load()) {
    auto channel = listener.accept(std::chrono::milliseconds(50));
    if (!channel) continue;
    std::shared_ptr<Backend> own = backend.clone();
    workers.emplace_back([&backend, &stop, own, ch = std::move(channel)]() mutable {
      serve_connection(own ? *own : backend, *ch, &stop);
    });
  }
  for (auto& t : workers) t.join();
}

RemoteEndpoint RemoteEndpoint::parse(const std::string& address) {
  RemoteEndpoint ep;
  std::string rest = address;
  if (rest.rfind("exec:", 0) == 0) {
    ep.transport = Transport::kExec;
    ep.command = rest.substr(5);
    if (ep.command.empty()) throw ConfigError("exec endpoint needs a command");
    return ep;
  }
  if (rest.rfind("tcp:", 0) == 0) rest = rest.substr(4);
  auto colon = rest.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == rest.size()) {
    throw ConfigError("remote address must be HOST:PORT, tcp:HOST:PORT or exec:CMD, got '" +
                      address + "'");
  }
  ep.host = rest.substr(0, colon);
  std::string port = rest.substr(colon + 1);
  try {
    std::size_t used = 0;
    int value = std::stoi(port, &used);
    if (used != port.size() || value <= 0 || value > 65535) throw std::out_of_range("port");
    ep.port = static_cast<std::uint16_t>(value);
  } catch (const std::exception&) {
    throw ConfigError("invalid port in remote address '" + address + "'");
  }
  return ep;
}

std::string RemoteEndpoint::address() const {
  if (transport == Transport::kExec) return "exec:" + command;
  return host + ":" + std::to_string(port);
}

RemoteBackend::RemoteBackend(RemoteEndpoint endpoint, std::shared_ptr<const Vocab> vocab)
    : endpoint_(std::move(endpoint)), vocab_(std::move(vocab)) {
  open();
}

RemoteBackend::~RemoteBackend() {
  if (channel_) {
    try {
      channel_->send_line(json{{"v", kProtocolVersion}, {"type", "bye"}}.dump());
    } catch (const Error&) {
    }
    channel_->close();
  }
  if (child_pid_ > 0) {
    int status = 0;
    ::waitpid(child_pid_, &status, 0);
  }
}

std::unique_ptr<Backend> RemoteBackend::clone() const {
  return std::make_unique<RemoteBackend>(endpoint_, vocab_);
}

void RemoteBackend::open() {
  channel_.reset();
  if (child_pid_ > 0) {
    ::kill(child_pid_, SIGTERM);
    int status = 0;
    ::waitpid(child_pid_, &status, 0);
    child_pid_ = -1;
  }

  if (endpoint_.transport == RemoteEndpoint::Transport::kTcp) {
    channel_ = connect_tcp(endpoint_.host, endpoint_.port, endpoint_.timeout);
  } else {
    int to_child[2];
    int from_child[2];
    if (::pipe2(to_child, O_CLOEXEC) < 0 || ::pipe2(from_child, O_CLOEXEC) < 0) {
      throw BackendError("pipe failed: " + errno_text());
    }
    ::signal(SIGPIPE, SIG_IGN);
    pid_t pid = ::fork();
    if (pid < 0) throw BackendError("fork failed: " + errno_text());
    if (pid == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::execl("/bin/sh", "sh", "-c", endpoint_.command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    child_pid_ = pid;
    channel_ = std::make_unique<LineChannel>(from_child[0], to_child[1]);
  }

  channel_->send_line(hello_frame().dump());
  auto line = channel_->recv_line(endpoint_.timeout);
  if (!line) throw BackendError("server closed the connection during handshake");
  json reply;
  try {
    reply = json::parse(*line);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed hello reply: ") + e.what());
  }
  if (!reply.is_object() || reply.value("type", "") != "hello" ||
      !reply.contains("vocab_size") || !reply.at("vocab_size").is_number_unsigned()) {
    throw ProtocolError("unexpected handshake reply: " + *line);
  }
  if (reply.value("v", 0) != endpoint_.protocol_version) {
    throw ProtocolError("server speaks protocol version " + std::to_string(reply.value("v", 0)));
  }
  auto remote_size = reply.at("vocab_size").get<std::size_t>();
  if (remote_size != vocab_->size()) {
    throw VocabMismatch("server vocabulary has " + std::to_string(remote_size) +
                        " tokens, local vocabulary has " + std::to_string(vocab_->size()));
  }
  if (reply.contains("eos_id") && reply.at("eos_id").is_number_integer() && vocab_->eos_id() &&
      reply.at("eos_id").get<TokenId>() != *vocab_->eos_id()) {
    throw VocabMismatch("server eos id differs from the local vocabulary");
  }
}

std::string RemoteBackend::request(const std::string& frame) {
  for (int attempt = 0;; ++attempt) {
    try {
      if (!channel_) open();
      channel_->send_line(frame);
      auto line = channel_->recv_line(endpoint_.timeout);
      if (!line) throw BackendError("server closed the connection");
      return *line;
    } catch (const BackendTimeout&) {
      channel_.reset();
      throw;
    } catch (const ProtocolError&) {
      throw;
    } catch (const VocabMismatch&) {
      throw;
    } catch (const BackendError&) {
      channel_.reset();
      if (attempt >= kMaxRetries) throw;
    }
  }
}

std::vector<double> RemoteBackend::score(std::span<const TokenId> context) {
  json frame = {{"v", kProtocolVersion},
                {"type", "score"},
                {"ctx", std::vector<TokenId>(context.begin(), context.end())}};
  std::string line = request(frame.dump());

  json reply;
  try {
    reply = json::parse(line);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("malformed logits frame: ") + e.what());
  }
  if (!reply.is_object()) throw ProtocolError("logits frame is not an object");
  if (reply.value("type", "") == "error") {
    throw BackendError("server error: " + reply.value("message", std::string("unspecified")));
  }
  if (reply.value("type", "") != "logits" || !reply.contains("values") ||
      !reply.at("values").is_array()) {
    throw ProtocolError("expected a logits frame, got: " + line.substr(0, 200));
  }
  const json& values = reply.at("values");
  if (values.size() != vocab_->size()) {
    throw ProtocolError("logits frame has " + std::to_string(values.size()) +
                        " values, expected " + std::to_string(vocab_->size()));
  }
  std::vector<double> logits;
  logits.reserve(values.size());
  for (const json& v : values) {
    if (!v.is_number()) throw ProtocolError("non-numeric logit in frame");
    double x = v.get<double>();
    if (!std::isfinite(x)) throw ProtocolError("non-finite logit in frame");
    logits.push_back(x);
  }
  return logits;
}

}  // namespace uscd
