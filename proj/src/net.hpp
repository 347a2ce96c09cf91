#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>

namespace hyperrag::net {

// Splits "host:port"; throws Error(kUsage) on malformed input.
std::pair<std::string, std::uint16_t> split_address(const std::string& address);

// Connected TCP socket or throws Error(kStore).
int connect_tcp(const std::string& address);

// Bound and listening socket; port 0 picks an ephemeral port. Throws kIo.
int listen_tcp(const std::string& address, int backlog = 64);
std::uint16_t local_port(int fd);

// false on EOF or error (a clean EOF before any byte sets *eof).
bool read_exact(int fd, std::span<std::uint8_t> buf, bool* eof = nullptr);
bool write_all(int fd, std::span<const std::uint8_t> buf);

void close_fd(int fd);

}  // namespace hyperrag::net
