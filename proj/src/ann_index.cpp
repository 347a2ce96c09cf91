#include "hyperrag/ann_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "hyperrag/detail/bytes.hpp"
#include "hyperrag/error.hpp"
#include "hyperrag/hash.hpp"

namespace hyperrag {

bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.chunk_id < b.chunk_id;
}

float inner_product(std::span<const float> a, std::span<const float> b) {
  float s = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

float squared_distance(std::span<const float> a, std::span<const float> b) {
  float s = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::vector<float> l2_normalized(std::span<const float> v) {
  std::vector<float> out(v.begin(), v.end());
  double ss = 0.0;
  for (float x : v) ss += static_cast<double>(x) * x;
  if (ss == 0.0) return out;
  const double inv = 1.0 / std::sqrt(ss);
  for (auto& x : out) x = static_cast<float>(x * inv);
  return out;
}

std::size_t nearest_centroid(const Matrix& centroids, std::span<const float> v) {
  std::size_t best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const float d = squared_distance(centroids.row(c), v);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

Matrix train_kmeans(const Matrix& vectors, std::size_t nlist, std::size_t iters, std::uint64_t seed) {
  const std::size_t n = vectors.rows;
  const std::size_t dim = vectors.cols;
  if (n == 0 || dim == 0) throw Error(ErrorCode::kInvalidConfig, "k-means needs a nonempty training set");
  if (nlist == 0) throw Error(ErrorCode::kInvalidConfig, "nlist must be at least 1");
  if (nlist > n)
    throw Error(ErrorCode::kInvalidConfig,
                "nlist " + std::to_string(nlist) + " exceeds the " + std::to_string(n) + " training vectors");

  SplitMix64 rng(seed);
  Matrix cent{nlist, dim, std::vector<float>(nlist * dim)};
  auto set_centroid = [&](std::size_t c, std::span<const float> v) { std::copy(v.begin(), v.end(), cent.row(c).begin()); };

  // k-means++ seeding.
  set_centroid(0, vectors.row(rng.next_below(n)));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(vectors.row(i), cent.row(0));
  for (std::size_t c = 1; c < nlist; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = 0;
    if (total > 0.0) {
      const double r = rng.next_unit_double() * total;
      double cum = 0.0;
      pick = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] == 0.0) continue;
        cum += d2[i];
        if (cum > r) {
          pick = i;
          break;
        }
      }
      if (pick == n) {  // rounding left r at the very end
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
      }
    } else {
      pick = rng.next_below(n);
    }
    set_centroid(c, vectors.row(pick));
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], static_cast<double>(squared_distance(vectors.row(i), cent.row(c))));
  }

  std::vector<std::size_t> assign(n);
  std::vector<std::size_t> sizes(nlist);
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = nearest_centroid(cent, vectors.row(i));
      ++sizes[assign[i]];
    }
    // Empty clusters take the point farthest from its centroid in the largest cluster.
    for (std::size_t c = 0; c < nlist; ++c) {
      if (sizes[c] != 0) continue;
      const std::size_t big = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      std::size_t far = n;
      float far_d = -1.0f;
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] != big) continue;
        const float d = squared_distance(vectors.row(i), cent.row(big));
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      assign[far] = c;
      --sizes[big];
      sizes[c] = 1;
    }
    std::vector<double> sum(nlist * dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto v = vectors.row(i);
      double* s = sum.data() + assign[i] * dim;
      for (std::size_t j = 0; j < dim; ++j) s[j] += v[j];
    }
    for (std::size_t c = 0; c < nlist; ++c)
      for (std::size_t j = 0; j < dim; ++j)
        cent.data[c * dim + j] = static_cast<float>(sum[c * dim + j] / static_cast<double>(sizes[c]));
  }
  return cent;
}

namespace {

std::vector<float> normalized_query(std::span<const float> q, std::size_t dim) {
  if (q.size() != dim)
    throw Error(ErrorCode::kShape, "query has dimension " + std::to_string(q.size()) + ", index has " +
                                       std::to_string(dim));
  return l2_normalized(q);
}

void keep_top(std::vector<Candidate>& c, std::size_t k) {
  if (c.size() > k) {
    std::partial_sort(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k), c.end(), candidate_before);
    c.resize(k);
  } else {
    std::sort(c.begin(), c.end(), candidate_before);
  }
}

}  // namespace

std::vector<Candidate> brute_force_search(std::span<const IndexedVector> items, std::span<const float> query,
                                          std::size_t k) {
  if (k == 0) throw Error(ErrorCode::kInvalidConfig, "k must be at least 1");
  const auto q = l2_normalized(query);
  std::vector<Candidate> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    if (it.vector.size() != q.size()) throw Error(ErrorCode::kShape, "item '" + it.chunk_id + "' has the wrong dimension");
    out.push_back(Candidate{it.chunk_id, 0, inner_product(it.vector, q)});
  }
  keep_top(out, k);
  return out;
}

IvfIndex IvfIndex::train(const Matrix& vectors, std::size_t nlist, std::size_t iters, std::uint64_t seed) {
  Matrix norm = vectors;
  for (std::size_t r = 0; r < norm.rows; ++r) {
    const auto v = l2_normalized(vectors.row(r));
    std::copy(v.begin(), v.end(), norm.row(r).begin());
  }
  return from_centroids(train_kmeans(norm, nlist, iters, seed));
}

IvfIndex IvfIndex::from_centroids(Matrix centroids) {
  if (centroids.rows == 0 || centroids.cols == 0 || centroids.data.size() != centroids.rows * centroids.cols)
    throw Error(ErrorCode::kInvalidConfig, "centroid matrix is empty or malformed");
  IvfIndex idx;
  idx.lists_.resize(centroids.rows);
  idx.centroids_ = std::move(centroids);
  return idx;
}

std::size_t IvfIndex::add(std::string chunk_id, std::span<const float> vector) {
  if (!trained()) throw Error(ErrorCode::kInvalidConfig, "index is not trained");
  if (vector.size() != dim())
    throw Error(ErrorCode::kShape, "vector for '" + chunk_id + "' has dimension " + std::to_string(vector.size()));
  if (ids_.contains(chunk_id)) throw Error(ErrorCode::kDuplicate, "chunk id '" + chunk_id + "' already indexed");
  auto v = l2_normalized(vector);
  const std::size_t c = nearest_centroid(centroids_, v);
  ids_.insert(chunk_id);
  lists_[c].push_back(IndexedVector{std::move(chunk_id), std::move(v)});
  ++count_;
  return c;
}

std::vector<std::size_t> IvfIndex::probe_order(std::span<const float> query, std::size_t nprobe) const {
  if (!trained()) throw Error(ErrorCode::kInvalidConfig, "index is not trained");
  if (nprobe == 0 || nprobe > nlist())
    throw Error(ErrorCode::kInvalidConfig, "nprobe must be in [1, " + std::to_string(nlist()) + "]");
  const auto q = normalized_query(query, dim());
  std::vector<std::pair<float, std::size_t>> d(nlist());
  for (std::size_t c = 0; c < nlist(); ++c) d[c] = {squared_distance(centroids_.row(c), q), c};
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(nprobe), d.end());
  std::vector<std::size_t> out(nprobe);
  for (std::size_t i = 0; i < nprobe; ++i) out[i] = d[i].second;
  return out;
}

std::vector<Candidate> IvfIndex::search(std::span<const float> query, std::size_t k, std::size_t nprobe) const {
  if (k == 0) throw Error(ErrorCode::kInvalidConfig, "k must be at least 1");
  const auto probes = probe_order(query, nprobe);
  const auto q = normalized_query(query, dim());
  std::vector<Candidate> out;
  for (std::size_t c : probes)
    for (const auto& it : lists_[c]) out.push_back(Candidate{it.chunk_id, c, inner_product(it.vector, q)});
  keep_top(out, k);
  return out;
}

std::vector<std::pair<std::size_t, IndexedVector>> IvfIndex::items() const {
  std::vector<std::pair<std::size_t, IndexedVector>> out;
  out.reserve(count_);
  for (std::size_t c = 0; c < lists_.size(); ++c)
    for (const auto& it : lists_[c]) out.emplace_back(c, it);
  return out;
}

namespace {
constexpr char kMagic[4] = {'H', 'R', 'I', 'V'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

Bytes IvfIndex::serialize() const {
  if (dim() > std::numeric_limits<std::uint16_t>::max()) throw Error(ErrorCode::kEncoding, "dimension exceeds u16");
  Bytes out;
  detail::ByteWriter w(out);
  w.str(std::string_view(kMagic, 4));
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(dim()));
  w.u32(static_cast<std::uint32_t>(nlist()));
  w.u64(count_);
  for (float x : centroids_.data) w.f32(x);
  for (const auto& list : lists_) {
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const auto& it : list) {
      if (it.chunk_id.size() > std::numeric_limits<std::uint16_t>::max())
        throw Error(ErrorCode::kEncoding, "chunk id too long");
      w.u16(static_cast<std::uint16_t>(it.chunk_id.size()));
      w.str(it.chunk_id);
      for (float x : it.vector) w.f32(x);
    }
  }
  return out;
}

IvfIndex IvfIndex::deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, ErrorCode::kDecode);
  if (r.str(4) != std::string_view(kMagic, 4)) throw Error(ErrorCode::kFormat, "not an HRIV index (bad magic)");
  const auto version = r.u16();
  if (version != kVersion) throw Error(ErrorCode::kFormat, "unsupported HRIV version " + std::to_string(version));
  const std::size_t dim = r.u16();
  const std::size_t nlist = r.u32();
  const std::uint64_t count = r.u64();
  if (dim == 0 || nlist == 0) throw Error(ErrorCode::kFormat, "HRIV index has zero dimension or nlist");
  if (r.remaining() / 4 / dim < nlist) throw Error(ErrorCode::kDecode, "truncated centroid block");
  Matrix cent{nlist, dim, std::vector<float>(nlist * dim)};
  for (auto& x : cent.data) x = r.f32();
  IvfIndex idx = from_centroids(std::move(cent));
  for (std::size_t c = 0; c < nlist; ++c) {
    const std::uint32_t len = r.u32();
    for (std::uint32_t i = 0; i < len; ++i) {
      IndexedVector it;
      it.chunk_id = r.str(r.u16());
      if (r.remaining() / 4 < dim) throw Error(ErrorCode::kDecode, "truncated vector for '" + it.chunk_id + "'");
      it.vector.resize(dim);
      for (auto& x : it.vector) x = r.f32();
      if (!idx.ids_.insert(it.chunk_id).second)
        throw Error(ErrorCode::kDuplicate, "chunk id '" + it.chunk_id + "' appears twice in the index file");
      idx.lists_[c].push_back(std::move(it));
      ++idx.count_;
    }
  }
  if (idx.count_ != count)
    throw Error(ErrorCode::kDecode, "HRIV header claims " + std::to_string(count) + " items, found " +
                                        std::to_string(idx.count_));
  if (r.remaining() != 0) throw Error(ErrorCode::kDecode, "trailing bytes after HRIV index");
  return idx;
}

void IvfIndex::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

IvfIndex IvfIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace hyperrag
