#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "hyperrag/kv_store.hpp"

namespace hyperrag {

// Serves one Backend over the wire protocol. One thread per connection;
// requests on a connection are answered serially in order.
class KvServer {
 public:
  explicit KvServer(std::shared_ptr<Backend> backend);
  ~KvServer();
  KvServer(const KvServer&) = delete;
  KvServer& operator=(const KvServer&) = delete;

  // Binds and starts accepting in the background. Throws Error(kIo) when the
  // address is not bindable. "host:0" picks an ephemeral port.
  void start(const std::string& bind_address);
  std::uint16_t port() const { return port_; }
  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

  // Stops accepting, closes live connections and joins all threads.
  void stop();

  std::uint64_t connections_served() const { return connections_; }
  std::uint64_t protocol_errors() const { return protocol_errors_; }

 private:
  void accept_loop();
  void serve_connection(int fd, std::atomic<bool>& done);

  std::shared_ptr<Backend> backend_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mu_;
  std::set<int> live_;
  struct Worker {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> done;
  };
  void reap_locked();
  std::vector<Worker> workers_;
  std::atomic<std::uint64_t> connections_{0};
  std::atomic<std::uint64_t> protocol_errors_{0};
};

// Blocks serving `backend` until `stop` becomes true.
void serve_remote(const std::string& bind_address, std::shared_ptr<Backend> backend, const std::atomic<bool>& stop);

}  // namespace hyperrag
