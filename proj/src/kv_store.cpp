#include "hyperrag/kv_store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "hyperrag/error.hpp"
#include "hyperrag/wire.hpp"
#include "net.hpp"

namespace hyperrag {

namespace fs = std::filesystem;

std::size_t shard_of(std::size_t centroid_id, std::size_t num_shards) {
  if (num_shards == 0) throw Error(ErrorCode::kInvalidConfig, "num_shards must be at least 1");
  return centroid_id % num_shards;
}

std::string BackendStats::to_text() const {
  std::ostringstream os;
  os << "bytes=" << bytes << "\n"
     << "bytes_served=" << bytes_served << "\n"
     << "entries=" << entries << "\n"
     << "gets=" << gets << "\n"
     << "hits=" << hits << "\n"
     << "puts=" << puts << "\n";
  return os.str();
}

BackendStats BackendStats::from_text(std::string_view text) {
  BackendStats s;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const auto line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) continue;
    const auto key = line.substr(0, eq);
    const auto val = line.substr(eq + 1);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(val.data(), val.data() + val.size(), v);
    if (ec != std::errc() || p != val.data() + val.size())
      throw Error(ErrorCode::kProtocol, "bad stats line '" + std::string(line) + "'");
    if (key == "bytes") s.bytes = v;
    else if (key == "bytes_served") s.bytes_served = v;
    else if (key == "entries") s.entries = v;
    else if (key == "gets") s.gets = v;
    else if (key == "hits") s.hits = v;
    else if (key == "puts") s.puts = v;
  }
  return s;
}

namespace {

void check_key(std::string_view key) {
  if (key.empty()) throw Error(ErrorCode::kStore, "empty key");
  if (key.front() == '/' || key.back() == '/' || key.find("//") != std::string_view::npos)
    throw Error(ErrorCode::kStore, "key '" + std::string(key) + "' has an empty segment");
}

bool has_prefix(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

}  // namespace

// ---- memory ----

void MemoryBackend::put(std::string_view key, std::span<const std::uint8_t> value) {
  check_key(key);
  auto entry = std::make_shared<const Bytes>(value.begin(), value.end());
  {
    std::unique_lock lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) entries_.emplace(std::string(key), std::move(entry));
    else it->second = std::move(entry);
  }
  ++puts_;
}

std::optional<Bytes> MemoryBackend::get(std::string_view key) {
  ++gets_;
  std::shared_ptr<const Bytes> entry;
  {
    std::shared_lock lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    entry = it->second;
  }
  ++hits_;
  served_ += entry->size();
  return *entry;
}

bool MemoryBackend::exists(std::string_view key) {
  std::shared_lock lock(mu_);
  return entries_.find(key) != entries_.end();
}

BackendStats MemoryBackend::stats(std::string_view key_prefix) {
  BackendStats s;
  {
    std::shared_lock lock(mu_);
    for (auto it = entries_.lower_bound(key_prefix); it != entries_.end() && has_prefix(it->first, key_prefix); ++it) {
      ++s.entries;
      s.bytes += it->second->size();
    }
  }
  s.gets = gets_;
  s.puts = puts_;
  s.hits = hits_;
  s.bytes_served = served_;
  return s;
}

// ---- local directory ----

namespace {

constexpr std::string_view kEntrySuffix = ".hrkv";

bool plain_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '.' || c == '_' ||
         c == '-';
}

std::string encode_segment(std::string_view seg) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  const bool dots_only = seg.find_first_not_of('.') == std::string_view::npos;
  std::string out;
  for (char c : seg) {
    if (plain_char(c) && !(dots_only && c == '.')) {
      out.push_back(c);
    } else {
      const auto u = static_cast<unsigned char>(c);
      out.push_back('%');
      out.push_back(kHex[u >> 4]);
      out.push_back(kHex[u & 15]);
    }
  }
  return out;
}

std::optional<std::string> decode_segment(std::string_view seg) {
  std::string out;
  for (std::size_t i = 0; i < seg.size(); ++i) {
    if (seg[i] != '%') {
      out.push_back(seg[i]);
      continue;
    }
    if (i + 2 >= seg.size()) return std::nullopt;
    unsigned v = 0;
    auto [p, ec] = std::from_chars(seg.data() + i + 1, seg.data() + i + 3, v, 16);
    if (ec != std::errc() || p != seg.data() + i + 3) return std::nullopt;
    out.push_back(static_cast<char>(v));
    i += 2;
  }
  return out;
}

std::optional<Bytes> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  in.seekg(0, std::ios::end);
  const auto size = in.tellg();
  in.seekg(0, std::ios::beg);
  Bytes out(static_cast<std::size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(out.data()), size))
    throw Error(ErrorCode::kStore, "short read from " + path.string());
  return out;
}

}  // namespace

DirectoryBackend::DirectoryBackend(fs::path root) : root_(std::move(root)) {
  std::error_code ec;
  fs::create_directories(root_, ec);
  if (ec) throw Error(ErrorCode::kStore, "cannot create " + root_.string() + ": " + ec.message());
  for (auto it = fs::recursive_directory_iterator(root_, ec); !ec && it != fs::recursive_directory_iterator();
       it.increment(ec)) {
    if (!it->is_regular_file()) continue;
    const auto rel = fs::relative(it->path(), root_).generic_string();
    if (rel.size() <= kEntrySuffix.size() || !rel.ends_with(kEntrySuffix)) continue;
    std::string key;
    bool ok = true;
    std::string_view rest(rel.data(), rel.size() - kEntrySuffix.size());
    while (ok) {
      const auto slash = rest.find('/');
      auto seg = decode_segment(rest.substr(0, slash));
      if (!seg || seg->empty()) ok = false;
      else key += *seg;
      if (slash == std::string_view::npos) break;
      key.push_back('/');
      rest = rest.substr(slash + 1);
    }
    if (ok) sizes_[key] = it->file_size();
  }
  if (ec) throw Error(ErrorCode::kStore, "cannot scan " + root_.string() + ": " + ec.message());
}

fs::path DirectoryBackend::path_for(std::string_view key) const {
  check_key(key);
  fs::path p = root_;
  while (true) {
    const auto slash = key.find('/');
    if (slash == std::string_view::npos) {
      p /= encode_segment(key) + std::string(kEntrySuffix);
      return p;
    }
    p /= encode_segment(key.substr(0, slash));
    key = key.substr(slash + 1);
  }
}

void DirectoryBackend::put(std::string_view key, std::span<const std::uint8_t> value) {
  const fs::path target = path_for(key);
  std::error_code ec;
  fs::create_directories(target.parent_path(), ec);
  if (ec) throw Error(ErrorCode::kStore, "cannot create " + target.parent_path().string() + ": " + ec.message());

  const fs::path tmp = target.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(tmp_counter_++);
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw Error(ErrorCode::kStore, "cannot write " + tmp.string() + ": " + std::strerror(errno));
  std::size_t done = 0;
  bool ok = true;
  while (done < value.size()) {
    const ssize_t n = ::write(fd, value.data() + done, value.size() - done);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      ok = false;
      break;
    }
    done += static_cast<std::size_t>(n);
  }
  const int err = errno;
  if (ok && ::fsync(fd) != 0) ok = false;
  ::close(fd);
  if (!ok) {
    fs::remove(tmp, ec);
    throw Error(ErrorCode::kStore, "cannot write " + tmp.string() + ": " + std::strerror(err));
  }
  if (::rename(tmp.c_str(), target.c_str()) != 0) {
    const int rerr = errno;
    fs::remove(tmp, ec);
    throw Error(ErrorCode::kStore, "cannot rename into " + target.string() + ": " + std::strerror(rerr));
  }
  {
    std::lock_guard lock(mu_);
    auto it = sizes_.find(key);
    if (it == sizes_.end()) sizes_.emplace(std::string(key), value.size());
    else it->second = value.size();
  }
  ++puts_;
}

std::optional<Bytes> DirectoryBackend::get(std::string_view key) {
  ++gets_;
  auto data = read_file(path_for(key));
  if (data) {
    ++hits_;
    served_ += data->size();
  }
  return data;
}

bool DirectoryBackend::exists(std::string_view key) {
  std::error_code ec;
  return fs::is_regular_file(path_for(key), ec);
}

BackendStats DirectoryBackend::stats(std::string_view key_prefix) {
  BackendStats s;
  {
    std::lock_guard lock(mu_);
    for (auto it = sizes_.lower_bound(key_prefix); it != sizes_.end() && has_prefix(it->first, key_prefix); ++it) {
      ++s.entries;
      s.bytes += it->second;
    }
  }
  s.gets = gets_;
  s.puts = puts_;
  s.hits = hits_;
  s.bytes_served = served_;
  return s;
}

// ---- remote ----

RemoteClient::RemoteClient(std::string address) : address_(std::move(address)) { net::split_address(address_); }

RemoteClient::~RemoteClient() { close_locked(); }

void RemoteClient::connect_locked() {
  if (fd_ < 0) fd_ = net::connect_tcp(address_);
}

void RemoteClient::close_locked() {
  net::close_fd(fd_);
  fd_ = -1;
}

RemoteClient::Reply RemoteClient::call(std::uint8_t opcode, std::string_view key,
                                       std::span<const std::uint8_t> value) {
  const Bytes frame = wire::encode_request(opcode, key, value);
  std::lock_guard lock(mu_);
  connect_locked();
  auto fail = [&](const std::string& what) -> Reply {
    close_locked();
    throw Error(ErrorCode::kStore, "remote " + address_ + ": " + what);
  };
  if (!net::write_all(fd_, frame)) return fail("send failed");
  std::uint8_t len_buf[4];
  if (!net::read_exact(fd_, len_buf)) return fail("connection closed");
  const std::uint32_t len = static_cast<std::uint32_t>(len_buf[0]) | static_cast<std::uint32_t>(len_buf[1]) << 8 |
                            static_cast<std::uint32_t>(len_buf[2]) << 16 |
                            static_cast<std::uint32_t>(len_buf[3]) << 24;
  if (len > wire::kMaxFrame) return fail("oversized response frame");
  Bytes body(len);
  if (!net::read_exact(fd_, body)) return fail("connection closed mid-response");
  wire::Response resp;
  try {
    resp = wire::parse_response(body);
  } catch (const Error& e) {
    return fail(e.what());
  }
  if (resp.status == wire::kError)
    throw Error(ErrorCode::kStore, "remote " + address_ + ": " + std::string(resp.body.begin(), resp.body.end()));
  return Reply{resp.status, std::move(resp.body)};
}

void RemoteClient::put(std::string_view key, std::span<const std::uint8_t> value) { call(wire::kPut, key, value); }

std::optional<Bytes> RemoteClient::get(std::string_view key) {
  auto r = call(wire::kGet, key, {});
  if (r.status == wire::kNotFound) return std::nullopt;
  return std::move(r.body);
}

bool RemoteClient::exists(std::string_view key) { return call(wire::kExists, key, {}).status == wire::kOk; }

std::string RemoteClient::stats_text(std::string_view key_prefix) {
  auto r = call(wire::kStats, key_prefix, {});
  return std::string(r.body.begin(), r.body.end());
}

RemoteBackend::RemoteBackend(std::shared_ptr<RemoteClient> client, std::string prefix)
    : client_(std::move(client)), prefix_(std::move(prefix)) {
  if (!client_) throw Error(ErrorCode::kInvalidConfig, "remote backend needs a client");
}

std::string RemoteBackend::full_key(std::string_view key) const {
  check_key(key);
  return prefix_ + std::string(key);
}

void RemoteBackend::put(std::string_view key, std::span<const std::uint8_t> value) {
  client_->put(full_key(key), value);
}

std::optional<Bytes> RemoteBackend::get(std::string_view key) { return client_->get(full_key(key)); }

bool RemoteBackend::exists(std::string_view key) { return client_->exists(full_key(key)); }

BackendStats RemoteBackend::stats(std::string_view key_prefix) {
  return BackendStats::from_text(client_->stats_text(prefix_ + std::string(key_prefix)));
}

std::string RemoteBackend::describe() const { return "tcp://" + client_->address() + "/" + prefix_; }

// ---- sharded store ----

ShardedStore::ShardedStore(std::vector<std::shared_ptr<Backend>> shards) : shards_(std::move(shards)) {
  if (shards_.empty()) throw Error(ErrorCode::kInvalidConfig, "num_shards must be at least 1");
  for (const auto& s : shards_)
    if (!s) throw Error(ErrorCode::kInvalidConfig, "null shard backend");
  for (std::size_t i = 0; i < shards_.size(); ++i) counters_.push_back(std::make_unique<Counters>());
}

namespace {

[[noreturn]] void rethrow_for_shard(std::size_t shard, const Backend& b, const std::exception& e) {
  throw Error(ErrorCode::kStore, "shard " + std::to_string(shard) + " (" + b.describe() + "): " + e.what());
}

}  // namespace

void ShardedStore::put_entry(std::string_view chunk_id, std::size_t centroid_id,
                             std::span<const std::uint8_t> bytes) {
  const std::size_t s = shard_for(centroid_id);
  try {
    shards_[s]->put(chunk_id, bytes);
  } catch (const std::exception& e) {
    rethrow_for_shard(s, *shards_[s], e);
  }
  ++counters_[s]->puts;
  counters_[s]->bytes_put += bytes.size();
}

std::optional<Bytes> ShardedStore::get_entry(std::string_view chunk_id, std::size_t centroid_id) {
  const std::size_t s = shard_for(centroid_id);
  std::optional<Bytes> out;
  try {
    out = shards_[s]->get(chunk_id);
  } catch (const std::exception& e) {
    rethrow_for_shard(s, *shards_[s], e);
  }
  ++counters_[s]->gets;
  if (out) {
    ++counters_[s]->hits;
    counters_[s]->bytes_served += out->size();
  }
  return out;
}

bool ShardedStore::exists_in_shard(std::size_t shard, std::string_view chunk_id) {
  try {
    return shards_.at(shard)->exists(chunk_id);
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::kRange, "shard " + std::to_string(shard) + " does not exist");
  } catch (const std::exception& e) {
    rethrow_for_shard(shard, *shards_[shard], e);
  }
}

StoreStats ShardedStore::stats() {
  StoreStats out;
  for (std::size_t s = 0; s < shards_.size(); ++s) {
    ShardStats st;
    st.shard = s;
    try {
      st.stored = shards_[s]->stats();
    } catch (const std::exception& e) {
      rethrow_for_shard(s, *shards_[s], e);
    }
    st.gets = counters_[s]->gets;
    st.hits = counters_[s]->hits;
    st.puts = counters_[s]->puts;
    st.bytes_put = counters_[s]->bytes_put;
    st.bytes_served = counters_[s]->bytes_served;
    out.shards.push_back(st);
  }
  return out;
}

std::string StoreStats::to_text() const {
  std::ostringstream os;
  for (const auto& s : shards) {
    const std::string p = "shard" + std::to_string(s.shard) + ".";
    os << p << "bytes=" << s.stored.bytes << "\n"
       << p << "bytes_put=" << s.bytes_put << "\n"
       << p << "bytes_served=" << s.bytes_served << "\n"
       << p << "entries=" << s.stored.entries << "\n"
       << p << "gets=" << s.gets << "\n"
       << p << "hits=" << s.hits << "\n"
       << p << "puts=" << s.puts << "\n";
  }
  return os.str();
}

std::shared_ptr<ShardedStore> open_store(const std::string& location, std::size_t num_shards) {
  if (num_shards == 0) throw Error(ErrorCode::kInvalidConfig, "num_shards must be at least 1");
  std::vector<std::shared_ptr<Backend>> shards;
  if (location == "memory") {
    for (std::size_t s = 0; s < num_shards; ++s) shards.push_back(std::make_shared<MemoryBackend>());
  } else if (location.starts_with("tcp://")) {
    auto client = std::make_shared<RemoteClient>(location.substr(6));
    for (std::size_t s = 0; s < num_shards; ++s)
      shards.push_back(std::make_shared<RemoteBackend>(client, "shard" + std::to_string(s) + "/"));
  } else {
    const fs::path root = location.starts_with("dir:") ? fs::path(location.substr(4)) : fs::path(location);
    if (root.empty()) throw Error(ErrorCode::kUsage, "empty store directory");
    for (std::size_t s = 0; s < num_shards; ++s)
      shards.push_back(std::make_shared<DirectoryBackend>(root / ("shard" + std::to_string(s))));
  }
  return std::make_shared<ShardedStore>(std::move(shards));
}

}  // namespace hyperrag
