#include "hyperrag/kv_server.hpp"

#include <poll.h>
#include <sys/socket.h>

#include <chrono>

#include "hyperrag/error.hpp"
#include "hyperrag/wire.hpp"
#include "net.hpp"

namespace hyperrag {

KvServer::KvServer(std::shared_ptr<Backend> backend) : backend_(std::move(backend)) {
  if (!backend_) throw Error(ErrorCode::kInvalidConfig, "server needs a backend");
}

KvServer::~KvServer() { stop(); }

void KvServer::start(const std::string& bind_address) {
  if (listen_fd_ >= 0) throw Error(ErrorCode::kUsage, "server already started");
  listen_fd_ = net::listen_tcp(bind_address);
  port_ = net::local_port(listen_fd_);
  stopping_ = false;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void KvServer::stop() {
  if (listen_fd_ < 0) return;
  stopping_ = true;
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<Worker> workers;
  {
    std::lock_guard lock(mu_);
    for (int fd : live_) ::shutdown(fd, SHUT_RDWR);
    workers.swap(workers_);
  }
  for (auto& w : workers) w.thread.join();
  net::close_fd(listen_fd_);
  listen_fd_ = -1;
}

void KvServer::accept_loop() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, 50);
    if (rc <= 0 || !(p.revents & POLLIN)) continue;
    const int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) continue;
    std::lock_guard lock(mu_);
    if (stopping_) {
      net::close_fd(fd);
      break;
    }
    reap_locked();
    live_.insert(fd);
    ++connections_;
    auto done = std::make_shared<std::atomic<bool>>(false);
    workers_.push_back(Worker{std::thread([this, fd, done] { serve_connection(fd, *done); }), done});
  }
}

void KvServer::reap_locked() {
  std::erase_if(workers_, [](Worker& w) {
    if (!*w.done) return false;
    w.thread.join();
    return true;
  });
}

namespace {

std::uint32_t load_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

Bytes text_body(const std::string& s) { return Bytes(s.begin(), s.end()); }

}  // namespace

void KvServer::serve_connection(int fd, std::atomic<bool>& done) {
  auto reply = [fd](std::uint8_t status, std::span<const std::uint8_t> body) {
    return net::write_all(fd, wire::encode_response(status, body));
  };

  while (!stopping_) {
    std::uint8_t len_buf[4];
    if (!net::read_exact(fd, len_buf)) break;
    const std::uint32_t len = load_u32(len_buf);
    if (len > wire::kMaxFrame) {
      ++protocol_errors_;
      reply(wire::kError, text_body("frame of " + std::to_string(len) + " bytes exceeds the 64 MiB limit"));
      break;
    }
    Bytes frame(len);
    if (!net::read_exact(fd, frame)) break;

    Bytes out;
    std::uint8_t status = wire::kOk;
    try {
      const auto req = wire::parse_request(frame);
      switch (req.opcode) {
        case wire::kGet:
          if (auto v = backend_->get(req.key)) out = std::move(*v);
          else status = wire::kNotFound;
          break;
        case wire::kPut:
          backend_->put(req.key, req.value);
          break;
        case wire::kExists:
          if (!backend_->exists(req.key)) status = wire::kNotFound;
          break;
        case wire::kStats:
          out = text_body(backend_->stats(req.key).to_text());
          break;
      }
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kProtocol) ++protocol_errors_;
      status = wire::kError;
      out = text_body(e.what());
    } catch (const std::exception& e) {
      status = wire::kError;
      out = text_body(e.what());
    }
    if (!reply(status, out)) break;
  }

  std::lock_guard lock(mu_);
  live_.erase(fd);
  net::close_fd(fd);
  done = true;
}

void serve_remote(const std::string& bind_address, std::shared_ptr<Backend> backend, const std::atomic<bool>& stop) {
  KvServer server(std::move(backend));
  server.start(bind_address);
  while (!stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
}

}  // namespace hyperrag
