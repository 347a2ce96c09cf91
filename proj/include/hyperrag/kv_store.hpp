#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperrag/kv_codec.hpp"

namespace hyperrag {

// Placement rule: shard = centroid mod num_shards.
std::size_t shard_of(std::size_t centroid_id, std::size_t num_shards);

// entries/bytes describe stored state (scoped to a key prefix when asked);
// the request counters are backend-wide and monotone.
struct BackendStats {
  std::uint64_t entries = 0;
  std::uint64_t bytes = 0;
  std::uint64_t gets = 0;
  std::uint64_t puts = 0;
  std::uint64_t hits = 0;
  std::uint64_t bytes_served = 0;

  // Canonical "key=value\n" listing, keys in ascending order.
  std::string to_text() const;
  static BackendStats from_text(std::string_view text);
  bool operator==(const BackendStats&) const = default;
};

// put/get/exists with read-your-writes semantics. Implementations are safe
// for concurrent use; a put replaces an entry atomically.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual void put(std::string_view key, std::span<const std::uint8_t> value) = 0;
  virtual std::optional<Bytes> get(std::string_view key) = 0;
  virtual bool exists(std::string_view key) = 0;
  virtual BackendStats stats(std::string_view key_prefix = {}) = 0;
  virtual std::string describe() const = 0;
};

class MemoryBackend final : public Backend {
 public:
  void put(std::string_view key, std::span<const std::uint8_t> value) override;
  std::optional<Bytes> get(std::string_view key) override;
  bool exists(std::string_view key) override;
  BackendStats stats(std::string_view key_prefix = {}) override;
  std::string describe() const override { return "memory"; }

 private:
  std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<const Bytes>, std::less<>> entries_;
  std::atomic<std::uint64_t> gets_{0}, puts_{0}, hits_{0}, served_{0};
};

// One file per entry: key "a/b" lives at <root>/a/b.hrkv. Key segments are
// percent-encoded outside [A-Za-z0-9._-]. Writes go to a temp file that is
// fsync'ed and renamed over the target.
class DirectoryBackend final : public Backend {
 public:
  explicit DirectoryBackend(std::filesystem::path root);

  void put(std::string_view key, std::span<const std::uint8_t> value) override;
  std::optional<Bytes> get(std::string_view key) override;
  bool exists(std::string_view key) override;
  BackendStats stats(std::string_view key_prefix = {}) override;
  std::string describe() const override { return "dir:" + root_.string(); }

  std::filesystem::path path_for(std::string_view key) const;
  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
  std::mutex mu_;
  std::map<std::string, std::uint64_t, std::less<>> sizes_;
  std::atomic<std::uint64_t> gets_{0}, puts_{0}, hits_{0}, served_{0};
  std::atomic<std::uint64_t> tmp_counter_{0};
};

// Client side of the wire protocol. One TCP connection; requests are
// serialized and answered in order. Reconnects lazily after a failure.
class RemoteClient {
 public:
  explicit RemoteClient(std::string address);  // "host:port"
  ~RemoteClient();
  RemoteClient(const RemoteClient&) = delete;
  RemoteClient& operator=(const RemoteClient&) = delete;

  void put(std::string_view key, std::span<const std::uint8_t> value);
  std::optional<Bytes> get(std::string_view key);
  bool exists(std::string_view key);
  std::string stats_text(std::string_view key_prefix = {});
  const std::string& address() const { return address_; }

 private:
  struct Reply {
    std::uint8_t status;
    Bytes body;
  };
  Reply call(std::uint8_t opcode, std::string_view key, std::span<const std::uint8_t> value);
  void connect_locked();
  void close_locked();

  std::string address_;
  std::mutex mu_;
  int fd_ = -1;
};

// A Backend view over a RemoteClient with every key prefixed.
class RemoteBackend final : public Backend {
 public:
  RemoteBackend(std::shared_ptr<RemoteClient> client, std::string prefix);

  void put(std::string_view key, std::span<const std::uint8_t> value) override;
  std::optional<Bytes> get(std::string_view key) override;
  bool exists(std::string_view key) override;
  BackendStats stats(std::string_view key_prefix = {}) override;
  std::string describe() const override;

 private:
  std::string full_key(std::string_view key) const;
  std::shared_ptr<RemoteClient> client_;
  std::string prefix_;
};

struct ShardStats {
  std::size_t shard = 0;
  BackendStats stored;  // entries/bytes as reported by the shard's backend
  std::uint64_t gets = 0;
  std::uint64_t hits = 0;
  std::uint64_t puts = 0;
  std::uint64_t bytes_put = 0;
  std::uint64_t bytes_served = 0;
};

struct StoreStats {
  std::vector<ShardStats> shards;
  std::string to_text() const;
};

class ShardedStore {
 public:
  explicit ShardedStore(std::vector<std::shared_ptr<Backend>> shards);

  std::size_t num_shards() const { return shards_.size(); }
  std::size_t shard_for(std::size_t centroid_id) const { return shard_of(centroid_id, shards_.size()); }
  Backend& backend(std::size_t shard) { return *shards_.at(shard); }

  // Throws Error(kStore) naming the shard when the backend fails.
  void put_entry(std::string_view chunk_id, std::size_t centroid_id, std::span<const std::uint8_t> bytes);
  std::optional<Bytes> get_entry(std::string_view chunk_id, std::size_t centroid_id);
  bool exists_in_shard(std::size_t shard, std::string_view chunk_id);

  StoreStats stats();

 private:
  struct Counters {
    std::atomic<std::uint64_t> gets{0}, hits{0}, puts{0}, bytes_put{0}, bytes_served{0};
  };
  std::vector<std::shared_ptr<Backend>> shards_;
  std::vector<std::unique_ptr<Counters>> counters_;
};

// Store locations: "memory", "dir:<path>" (or a bare path), "tcp://host:port".
// Directory shards live in <path>/shard<k>; remote shards use the key prefix
// "shard<k>/" so a server rooted at <path> sees the same layout.
std::shared_ptr<ShardedStore> open_store(const std::string& location, std::size_t num_shards);

}  // namespace hyperrag
