#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperrag/model.hpp"

namespace hyperrag {

// Static scoring layout: document tokens always occupy positions
// [0, document_len) and query tokens [document_len, document_len+query_len),
// however many of either are padding.
struct LayoutConfig {
  std::size_t document_len = 256;
  std::size_t query_len = 48;
  TokenId pad_id = 0;

  std::size_t total_len() const { return document_len + query_len; }
  void validate(const ModelConfig& model) const;
  bool operator==(const LayoutConfig&) const = default;
};

// Whitespace words hashed to 1 + fnv1a64(word) % (vocab_size - 1), truncated
// to max_len and right-padded with pad_id.
std::vector<TokenId> tokenize(std::string_view text, std::size_t max_len, std::size_t vocab_size,
                              TokenId pad_id = 0);

struct DocKV {
  std::string chunk_id;
  KVTensorSet kv;
  std::size_t valid_len = 0;

  std::size_t payload_bytes() const { return kv.payload_bytes(); }
  bool operator==(const DocKV&) const = default;
};

struct CounterReport {
  std::uint64_t linear_token_count = 0;
  std::uint64_t attn_mac_pairs = 0;
  std::uint64_t peak_activation_tokens = 0;
  std::uint64_t kv_bytes_loaded = 0;

  // Work counters add; the activation peak takes the max.
  CounterReport& operator+=(const CounterReport& other);
  bool operator==(const CounterReport&) const = default;
};

struct ScoredPair {
  std::string chunk_id;
  std::string query_id;
  float score = 0.0f;
};

struct ScoreResult {
  float score = 0.0f;
  CounterReport counters;
};

enum class ScoreMode { kFull, kReuse };
enum class KernelPath { kReference, kOptimized };

std::string_view to_string(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view s);

// One (document, query) pair. Reuse mode reads doc_kv; full mode reads
// doc_tokens. The pointed-to data must outlive the score_batch call.
struct BatchItem {
  std::string chunk_id;
  std::string query_id;
  const DocKV* doc_kv = nullptr;
  std::span<const TokenId> doc_tokens;
  std::span<const TokenId> query_tokens;
};

struct BatchResult {
  std::vector<ScoredPair> scores;           // in input order
  std::vector<CounterReport> item_counters;  // per pair, in input order
  CounterReport counters;
};

// Totals for pairs scored in groups of max_batch: work counters add, and the
// peak is the largest sum of member peaks over any one group.
CounterReport group_counters(std::span<const CounterReport> items, std::size_t max_batch);

// Closed forms for the counters, used by tests and the bench report.
std::uint64_t causal_pairs(std::uint64_t n);
std::uint64_t reuse_pairs(std::uint64_t valid_len, std::uint64_t query_tokens);

class Reranker {
 public:
  Reranker(std::shared_ptr<const Weights> weights, LayoutConfig layout,
           KernelPath path = KernelPath::kOptimized, int threads = 0);

  const LayoutConfig& layout() const { return layout_; }
  const Weights& weights() const { return *weights_; }
  KernelPath path() const { return path_; }

  DocKV doc_prefill(std::string chunk_id, std::span<const TokenId> doc_tokens,
                    CounterReport* counters = nullptr) const;

  ScoreResult score_full(std::span<const TokenId> doc_tokens, std::span<const TokenId> query_tokens) const;
  ScoreResult score_reuse(const DocKV& doc_kv, std::span<const TokenId> query_tokens) const;

  // Pairs run in groups of at most max_batch; a group is scored in parallel
  // and its members are resident together, which is what the peak counter
  // of a batch reports.
  BatchResult score_batch(std::span<const BatchItem> items, ScoreMode mode, std::size_t max_batch) const;

 private:
  ForwardResult run(std::span<const TokenId> tokens, std::span<const std::size_t> positions,
                    const KVTensorSet* past, const AttentionMask& mask, int threads) const;
  float score_row(const std::vector<float>& hidden, std::size_t row) const;
  void check_query(std::span<const TokenId> query_tokens) const;
  ScoreResult score_full_impl(std::span<const TokenId> doc, std::span<const TokenId> query, int threads) const;
  ScoreResult score_reuse_impl(const DocKV& doc_kv, std::span<const TokenId> query, int threads) const;

  std::shared_ptr<const Weights> weights_;
  LayoutConfig layout_;
  KernelPath path_;
  int threads_;
};

}  // namespace hyperrag
