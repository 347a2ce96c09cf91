#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hyperrag/pipeline.hpp"

namespace hyperrag::app {

// ---- corpus and workload generation ----

// Deterministic vocabulary of two-syllable words.
const std::vector<std::string>& word_list();

// Documents draw most words from a per-topic slice of the vocabulary so the
// embeddings cluster. Same seed gives byte-identical output.
std::vector<Document> generate_corpus(std::size_t count, std::size_t words_per_doc, std::uint64_t seed,
                                      std::size_t topics = 32);
// Each question is a contiguous run of words from a random document.
std::vector<Query> generate_workload(std::span<const Document> corpus, std::size_t count, std::size_t words,
                                     std::uint64_t seed);

void cmd_gen_corpus(std::size_t count, std::size_t words_per_doc, std::uint64_t seed,
                    const std::filesystem::path& out_path);

// ---- config overrides ----

// Applies {"model": {...}, "layout": {...}, "pipeline": {...}, "build": {...}}
// from a JSON file. Unknown keys are rejected.
struct Overrides {
  ModelConfig model;
  LayoutConfig layout;
  PipelineConfig pipeline;
  std::size_t nlist = 64;
  std::size_t num_shards = 4;
  std::size_t embed_dim = 64;
  QuantScheme scheme = QuantScheme::kF32;
};
void apply_config_file(const std::filesystem::path& path, Overrides& o);

// ---- build ----

struct BuildOptions {
  ModelConfig model;
  LayoutConfig layout;
  std::size_t nlist = 64;
  std::size_t num_shards = 4;
  std::size_t embed_dim = 64;
  QuantScheme scheme = QuantScheme::kF32;
  std::uint64_t seed = 0;
  // Defaults to dir:<out_dir>/kv.
  std::string store_location;
};

struct ManifestEntry {
  std::string chunk_id;
  std::size_t centroid = 0;
  std::size_t shard = 0;
  std::uint64_t bytes = 0;
  std::uint64_t checksum = 0;  // fnv1a64 over the encoded entry
};

struct Manifest {
  ModelConfig model;
  LayoutConfig layout;
  std::size_t nlist = 0;
  std::size_t num_shards = 0;
  std::size_t embed_dim = 0;
  QuantScheme scheme = QuantScheme::kF32;
  std::uint64_t seed = 0;
  std::string store_location;
  std::uint64_t payload_bytes = 0;  // dequantized F32 payload per entry
  std::uint64_t total_entry_bytes = 0;
  std::vector<ManifestEntry> entries;

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
  static Manifest load(const std::filesystem::path& built_dir);
};

Manifest cmd_build(const std::filesystem::path& corpus_path, const std::filesystem::path& out_dir,
                   const BuildOptions& options);

// Everything a query-time command needs, loaded from a build directory.
struct BuiltArtifacts {
  Manifest manifest;
  std::shared_ptr<const Weights> weights;
  std::shared_ptr<const IvfIndex> index;
  std::shared_ptr<ShardedStore> store;
  std::vector<Document> corpus;
};
// store_override replaces the manifest's store location (e.g. a tcp:// server).
BuiltArtifacts load_built(const std::filesystem::path& built_dir, const std::string& store_override = {});

// ---- verify ----

struct VerifyReport {
  std::size_t trials = 0;
  std::size_t entries_checked = 0;
  std::size_t reencoded = 0;
  std::size_t lossless_pairs = 0;
  std::size_t locality_queries = 0;
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }
  std::string to_json() const;
};

VerifyReport cmd_verify(const std::filesystem::path& built_dir, std::size_t trials, std::uint64_t seed,
                        const std::string& store_override = {});

// ---- bench ----

struct BenchSpec {
  std::vector<std::size_t> document_lens{64, 128, 256, 512};
  std::size_t query_len = 48;
  std::vector<std::size_t> batch_sizes{1, 8, 32};
  std::vector<ScoreMode> modes{ScoreMode::kFull, ScoreMode::kReuse};
  std::size_t repetitions = 5;
  std::size_t warmup = 1;
  std::uint64_t seed = 0;
  int threads = 0;
  // Pipeline runs over the built artifacts.
  std::size_t pipeline_queries = 64;
  std::size_t pipeline_warmup = 8;
  std::size_t rerank_workers = 2;

  void validate() const;
};

// One (document_len, batch, mode) point of the scoring sweep. Latencies are
// per score_batch call; reuse rows include decoding the stored entry.
struct SweepRow {
  std::size_t document_len = 0;
  std::size_t query_len = 0;
  std::size_t batch = 0;
  ScoreMode mode = ScoreMode::kFull;
  std::size_t repetitions = 0;
  double mean_latency_ms = 0.0;
  double median_latency_ms = 0.0;
  double pairs_per_s = 0.0;
  CounterReport counters;  // one batch
  double linear_ratio = 1.0;  // counters relative to full mode at the same point
  double attn_ratio = 1.0;
  double peak_ratio = 1.0;

  static std::string csv_header();
  std::string to_csv_row() const;
};

std::vector<SweepRow> run_sweep(const ModelConfig& model, const BenchSpec& spec);

struct BenchReport {
  std::vector<SweepRow> sweep;
  std::vector<MetricsReport> pipeline;

  std::string to_json() const;
};

// Writes sweep.csv, pipeline.csv and report.json into report_dir.
BenchReport cmd_bench(const std::filesystem::path& built_dir, const BenchSpec& spec,
                      const std::filesystem::path& workload_path, const std::filesystem::path& report_dir,
                      const std::string& store_override = {});

// ---- query ----

std::string response_to_json(const RagResponse& r);
RagResponse cmd_query(const std::filesystem::path& built_dir, const std::string& question, PipelineConfig config,
                      const std::string& store_override = {});

}  // namespace hyperrag::app
