#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hyperrag/ann_index.hpp"
#include "hyperrag/kv_codec.hpp"
#include "hyperrag/kv_store.hpp"
#include "hyperrag/reranker.hpp"

namespace hyperrag {

// Feature hashing: each whitespace word adds +-1 at fnv1a64(word) % dim, the
// sign taken from bit 63. Normalized unless all zero.
std::vector<float> embed_text(std::string_view text, std::size_t dim = 64);

struct Document {
  std::string id;
  std::string title;
  std::string text;
  bool operator==(const Document&) const = default;
};

struct Query {
  std::string id;
  std::string question;
  bool operator==(const Query&) const = default;
};

// Llama-3 chat prompt. With no documents the closed-book template is used.
std::string assemble_prompt(std::string_view question, std::span<const Document> docs);

// JSON Lines: {"id","title","text"} per corpus line, {"id","question"} per workload line.
std::vector<Document> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, std::span<const Document> docs);
std::vector<Query> read_workload(const std::filesystem::path& path);
void write_workload(const std::filesystem::path& path, std::span<const Query> queries);

struct PipelineConfig {
  std::size_t retrieve_k = 20;
  std::size_t keep_m = 1;
  std::size_t nprobe = 4;
  ScoreMode rerank_mode = ScoreMode::kReuse;
  std::size_t max_batch = 8;
  std::chrono::microseconds max_wait{10'000};
  std::size_t rerank_workers = 1;
  std::size_t fetch_workers = 1;
  QuantScheme quant = QuantScheme::kF32;
  LayoutConfig layout;
  KernelPath kernel_path = KernelPath::kOptimized;
  std::size_t queue_capacity = 64;
  // Admit the next query only once the previous one has left the pipeline.
  bool single_in_flight = false;

  void validate() const;
};

struct SelectedChunk {
  std::string chunk_id;
  float score = 0.0f;
  bool operator==(const SelectedChunk&) const = default;
};

struct StageTimings {
  double retrieve_ms = 0.0;
  double fetch_ms = 0.0;
  double rerank_ms = 0.0;
  double select_ms = 0.0;
  double total_ms = 0.0;  // admission to completion, queueing included
};

struct RagResponse {
  std::string query_id;
  std::vector<SelectedChunk> selected;  // score descending, chunk_id ascending on ties
  std::string prompt;
  StageTimings timings;
  CounterReport counters;
  std::size_t candidates = 0;
  std::size_t cache_misses = 0;
  std::size_t shards_touched = 0;
  std::uint64_t bytes_fetched = 0;
};

struct LatencySummary {
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double mean_ms = 0.0;
};

// Nearest-rank percentiles.
LatencySummary summarize_latency(std::vector<double> samples_ms);

struct MetricsReport {
  std::string mode;
  std::size_t queries = 0;
  std::size_t warmup = 0;
  double wall_s = 0.0;
  double throughput_qps = 0.0;
  LatencySummary retrieve, fetch, rerank, select, total;
  CounterReport counters;
  std::uint64_t pairs_scored = 0;
  std::uint64_t bytes_fetched = 0;
  std::uint64_t cache_misses = 0;
  std::map<std::size_t, std::size_t> shards_touched;  // shards per query -> query count

  // Config echo for reports.
  std::size_t document_len = 0;
  std::size_t query_len = 0;
  std::size_t max_batch = 0;
  std::size_t rerank_workers = 0;
  std::size_t fetch_workers = 0;
  std::size_t retrieve_k = 0;
  std::size_t nprobe = 0;
  std::string quant;

  std::string to_json() const;
  static std::string csv_header();
  std::string to_csv_row() const;
};

struct PipelineResources {
  std::shared_ptr<const Weights> weights;
  std::shared_ptr<const IvfIndex> index;
  std::shared_ptr<ShardedStore> store;
  std::vector<Document> corpus;
};

struct WorkloadResult {
  MetricsReport metrics;
  std::vector<RagResponse> responses;  // every query, warmup included, in input order
};

class Pipeline {
 public:
  Pipeline(PipelineResources resources, PipelineConfig config);

  const PipelineConfig& config() const { return config_; }
  const Reranker& reranker() const { return reranker_; }

  RagResponse handle_query(const std::string& query_id, const std::string& question) const;

  // Staged execution: retrieval -> fetch workers -> batch collector ->
  // rerank workers -> selection. The first `warmup` queries run to
  // completion before the measured run starts.
  WorkloadResult run_workload(std::span<const Query> queries, std::size_t warmup) const;

  // Stage pieces, exposed for the staged runner and for tests.
  struct Job;
  void retrieve(Job& job) const;
  void fetch(Job& job) const;
  void rerank(std::span<Job*> jobs) const;
  void select(Job& job) const;

 private:
  WorkloadResult run_staged(std::span<const Query> queries, std::size_t first, std::size_t count) const;
  const Document& document(const std::string& chunk_id) const;
  const std::vector<TokenId>& doc_tokens(const std::string& chunk_id) const;

  PipelineResources res_;
  PipelineConfig config_;
  Reranker reranker_;
  std::unordered_map<std::string, std::size_t> doc_index_;
  std::vector<std::vector<TokenId>> doc_tokens_;
};

struct Pipeline::Job {
  std::size_t slot = 0;
  std::string query_id;
  std::string question;
  std::vector<TokenId> query_tokens;
  std::vector<Candidate> candidates;
  std::vector<std::optional<DocKV>> kv;  // per candidate; empty on a miss or in full mode
  std::vector<float> scores;             // per candidate
  std::vector<CounterReport> pair_counters;
  RagResponse response;
  std::chrono::steady_clock::time_point admitted;
};

}  // namespace hyperrag
