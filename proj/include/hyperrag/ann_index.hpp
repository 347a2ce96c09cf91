#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "hyperrag/kv_codec.hpp"

namespace hyperrag {

// Row-major [count x dim] matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  bool operator==(const Matrix&) const = default;
};

struct Candidate {
  std::string chunk_id;
  std::size_t centroid_id = 0;
  float similarity = 0.0f;
  bool operator==(const Candidate&) const = default;
};

// Similarity descending, then chunk_id ascending.
bool candidate_before(const Candidate& a, const Candidate& b);

float inner_product(std::span<const float> a, std::span<const float> b);
float squared_distance(std::span<const float> a, std::span<const float> b);
// Zero vectors are returned unchanged.
std::vector<float> l2_normalized(std::span<const float> v);

// k-means++ seeding from SplitMix64(seed), then `iters` Lloyd iterations.
Matrix train_kmeans(const Matrix& vectors, std::size_t nlist, std::size_t iters = 10, std::uint64_t seed = 0);

// Nearest centroid by Euclidean distance; ties to the lowest id.
std::size_t nearest_centroid(const Matrix& centroids, std::span<const float> v);

struct IndexedVector {
  std::string chunk_id;
  std::vector<float> vector;
};

std::vector<Candidate> brute_force_search(std::span<const IndexedVector> items, std::span<const float> query,
                                          std::size_t k);

class IvfIndex {
 public:
  IvfIndex() = default;

  // Trains on normalized copies of `vectors`.
  static IvfIndex train(const Matrix& vectors, std::size_t nlist, std::size_t iters = 10, std::uint64_t seed = 0);
  static IvfIndex from_centroids(Matrix centroids);

  std::size_t dim() const { return centroids_.cols; }
  std::size_t nlist() const { return centroids_.rows; }
  std::size_t size() const { return count_; }
  bool trained() const { return centroids_.rows > 0; }
  const Matrix& centroids() const { return centroids_; }
  const std::vector<IndexedVector>& list(std::size_t c) const { return lists_.at(c); }

  // Normalizes and appends; returns the centroid id. Duplicate ids throw kDuplicate.
  std::size_t add(std::string chunk_id, std::span<const float> vector);

  // The nprobe centroids nearest to the normalized query, nearest first.
  std::vector<std::size_t> probe_order(std::span<const float> query, std::size_t nprobe) const;
  std::vector<Candidate> search(std::span<const float> query, std::size_t k, std::size_t nprobe) const;

  // All stored items with their centroid, in list order.
  std::vector<std::pair<std::size_t, IndexedVector>> items() const;

  Bytes serialize() const;
  static IvfIndex deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static IvfIndex load(const std::filesystem::path& path);

  bool operator==(const IvfIndex& o) const { return centroids_ == o.centroids_ && lists_ == o.lists_; }

 private:
  Matrix centroids_;
  std::vector<std::vector<IndexedVector>> lists_;
  std::unordered_set<std::string> ids_;
  std::size_t count_ = 0;
};

inline bool operator==(const IndexedVector& a, const IndexedVector& b) {
  return a.chunk_id == b.chunk_id && a.vector == b.vector;
}

}  // namespace hyperrag
