#include "net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

#include "hyperrag/error.hpp"

namespace hyperrag::net {

std::pair<std::string, std::uint16_t> split_address(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::kUsage, "address '" + address + "' is not host:port");
  std::string host = address.substr(0, colon);
  if (host.empty()) host = "127.0.0.1";
  unsigned port = 0;
  const char* b = address.data() + colon + 1;
  const char* e = address.data() + address.size();
  auto [p, ec] = std::from_chars(b, e, port);
  if (ec != std::errc() || p != e || b == e || port > 65535)
    throw Error(ErrorCode::kUsage, "address '" + address + "' has a bad port");
  return {host, static_cast<std::uint16_t>(port)};
}

namespace {

addrinfo* resolve(const std::string& host, std::uint16_t port, bool passive, ErrorCode code) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0) throw Error(code, "cannot resolve '" + host + "': " + ::gai_strerror(rc));
  return res;
}

}  // namespace

int connect_tcp(const std::string& address) {
  const auto [host, port] = split_address(address);
  addrinfo* res = resolve(host, port, false, ErrorCode::kStore);
  int fd = -1;
  int err = 0;
  for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
    if (fd < 0) {
      err = errno;
      continue;
    }
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    err = errno;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw Error(ErrorCode::kStore, "cannot connect to " + address + ": " + std::strerror(err));
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return fd;
}

int listen_tcp(const std::string& address, int backlog) {
  const auto [host, port] = split_address(address);
  addrinfo* res = resolve(host, port, true, ErrorCode::kIo);
  int fd = ::socket(res->ai_family, res->ai_socktype | SOCK_CLOEXEC, res->ai_protocol);
  if (fd < 0) {
    ::freeaddrinfo(res);
    throw Error(ErrorCode::kIo, std::string("socket: ") + std::strerror(errno));
  }
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd, res->ai_addr, res->ai_addrlen) != 0 || ::listen(fd, backlog) != 0) {
    const int err = errno;
    ::freeaddrinfo(res);
    ::close(fd);
    throw Error(ErrorCode::kIo, "cannot listen on " + address + ": " + std::strerror(err));
  }
  ::freeaddrinfo(res);
  return fd;
}

std::uint16_t local_port(int fd) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  if (::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len) != 0) return 0;
  return ntohs(sa.sin_port);
}

bool read_exact(int fd, std::span<std::uint8_t> buf, bool* eof) {
  if (eof != nullptr) *eof = false;
  std::size_t got = 0;
  while (got < buf.size()) {
    const ssize_t n = ::recv(fd, buf.data() + got, buf.size() - got, 0);
    if (n > 0) {
      got += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n == 0 && got == 0 && eof != nullptr) *eof = true;
    return false;
  }
  return true;
}

bool write_all(int fd, std::span<const std::uint8_t> buf) {
  std::size_t sent = 0;
  while (sent < buf.size()) {
    const ssize_t n = ::send(fd, buf.data() + sent, buf.size() - sent, MSG_NOSIGNAL);
    if (n > 0) {
      sent += static_cast<std::size_t>(n);
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    return false;
  }
  return true;
}

void close_fd(int fd) {
  if (fd >= 0) ::close(fd);
}

}  // namespace hyperrag::net
