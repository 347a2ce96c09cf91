#include "hyperrag/reranker.hpp"

#include <omp.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>

#include "hyperrag/error.hpp"
#include "hyperrag/hash.hpp"

namespace hyperrag {

void LayoutConfig::validate(const ModelConfig& model) const {
  if (document_len == 0 || query_len == 0)
    throw Error(ErrorCode::kInvalidConfig, "document_len and query_len must be positive");
  if (total_len() > model.max_position)
    throw Error(ErrorCode::kInvalidConfig, "document_len + query_len exceeds max_position");
  if (pad_id >= model.vocab_size) throw Error(ErrorCode::kInvalidConfig, "pad_id outside vocabulary");
}

std::vector<TokenId> tokenize(std::string_view text, std::size_t max_len, std::size_t vocab_size, TokenId pad_id) {
  std::vector<TokenId> ids;
  ids.reserve(max_len);
  std::size_t i = 0;
  while (i < text.size() && ids.size() < max_len) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) {
      const auto h = fnv1a64(text.substr(start, i - start));
      ids.push_back(static_cast<TokenId>(1 + h % (vocab_size - 1)));
    }
  }
  ids.resize(max_len, pad_id);
  return ids;
}

CounterReport& CounterReport::operator+=(const CounterReport& other) {
  linear_token_count += other.linear_token_count;
  attn_mac_pairs += other.attn_mac_pairs;
  peak_activation_tokens = std::max(peak_activation_tokens, other.peak_activation_tokens);
  kv_bytes_loaded += other.kv_bytes_loaded;
  return *this;
}

std::string_view to_string(ScoreMode mode) { return mode == ScoreMode::kFull ? "full" : "reuse"; }

ScoreMode parse_score_mode(std::string_view s) {
  if (s == "full") return ScoreMode::kFull;
  if (s == "reuse") return ScoreMode::kReuse;
  throw Error(ErrorCode::kInvalidConfig, "unknown rerank mode '" + std::string(s) + "'");
}

std::uint64_t causal_pairs(std::uint64_t n) { return n * (n + 1) / 2; }

std::uint64_t reuse_pairs(std::uint64_t valid_len, std::uint64_t query_tokens) {
  return query_tokens * valid_len + causal_pairs(query_tokens);
}

CounterReport group_counters(std::span<const CounterReport> items, std::size_t max_batch) {
  if (max_batch == 0) throw Error(ErrorCode::kInvalidConfig, "max_batch must be positive");
  CounterReport out;
  for (std::size_t begin = 0; begin < items.size(); begin += max_batch) {
    const std::size_t end = std::min(items.size(), begin + max_batch);
    std::uint64_t resident = 0;
    for (std::size_t i = begin; i < end; ++i) {
      CounterReport c = items[i];
      resident += c.peak_activation_tokens;
      c.peak_activation_tokens = 0;
      out += c;
    }
    out.peak_activation_tokens = std::max(out.peak_activation_tokens, resident);
  }
  return out;
}

namespace {

std::size_t count_valid(std::span<const TokenId> tokens, TokenId pad) {
  return static_cast<std::size_t>(std::count_if(tokens.begin(), tokens.end(), [pad](TokenId t) { return t != pad; }));
}

// Unmasked causal (query, key) pairs for a sequence whose validity is `valid`.
std::uint64_t masked_causal_pairs(std::span<const std::uint8_t> valid, std::uint64_t prefix_valid) {
  std::uint64_t seen = prefix_valid;
  std::uint64_t pairs = 0;
  for (auto v : valid) {
    if (!v) continue;
    ++seen;
    pairs += seen;
  }
  return pairs;
}

}  // namespace

Reranker::Reranker(std::shared_ptr<const Weights> weights, LayoutConfig layout, KernelPath path, int threads)
    : weights_(std::move(weights)), layout_(layout), path_(path), threads_(threads) {
  if (!weights_) throw Error(ErrorCode::kInvalidConfig, "reranker needs weights");
  layout_.validate(weights_->config);
}

ForwardResult Reranker::run(std::span<const TokenId> tokens, std::span<const std::size_t> positions,
                            const KVTensorSet* past, const AttentionMask& mask, int threads) const {
  if (path_ == KernelPath::kReference) return reference_forward(*weights_, tokens, positions, past, mask);
  return forward(*weights_, tokens, positions, past, mask, ForwardOptions{threads});
}

float Reranker::score_row(const std::vector<float>& hidden, std::size_t row) const {
  const std::size_t d = weights_->config.model_dim;
  const float* h = hidden.data() + row * d;
  float s = 0.0f;
  for (std::size_t c = 0; c < d; ++c) s += h[c] * weights_->score_head[c];
  if (!std::isfinite(s)) throw Error(ErrorCode::kRange, "non-finite relevance score");
  return s;
}

void Reranker::check_query(std::span<const TokenId> query_tokens) const {
  if (query_tokens.size() != layout_.query_len)
    throw Error(ErrorCode::kShape, "query has " + std::to_string(query_tokens.size()) + " tokens, layout expects " +
                                       std::to_string(layout_.query_len));
  if (count_valid(query_tokens, layout_.pad_id) == 0)
    throw Error(ErrorCode::kDegenerateInput, "query consists only of padding");
}

DocKV Reranker::doc_prefill(std::string chunk_id, std::span<const TokenId> doc_tokens, CounterReport* counters) const {
  if (doc_tokens.size() != layout_.document_len)
    throw Error(ErrorCode::kShape, "document has " + std::to_string(doc_tokens.size()) + " tokens, layout expects " +
                                       std::to_string(layout_.document_len));
  const std::size_t valid_len = count_valid(doc_tokens, layout_.pad_id);
  if (valid_len == 0) throw Error(ErrorCode::kDegenerateInput, "document '" + chunk_id + "' is all padding");
  for (std::size_t i = valid_len; i < doc_tokens.size(); ++i)
    if (doc_tokens[i] != layout_.pad_id)
      throw Error(ErrorCode::kDegenerateInput, "document '" + chunk_id + "' has padding before content");

  const auto positions = iota_positions(0, layout_.document_len);
  auto fr = run(doc_tokens, positions, nullptr, AttentionMask::from_tokens(doc_tokens, layout_.pad_id), threads_);
  if (counters != nullptr) {
    CounterReport c;
    c.linear_token_count = valid_len;
    c.attn_mac_pairs = causal_pairs(valid_len);
    c.peak_activation_tokens = valid_len;
    *counters += c;
  }
  return DocKV{std::move(chunk_id), std::move(fr.produced), valid_len};
}

ScoreResult Reranker::score_full_impl(std::span<const TokenId> doc, std::span<const TokenId> query,
                                      int threads) const {
  if (doc.size() != layout_.document_len)
    throw Error(ErrorCode::kShape, "document length does not match the layout");
  check_query(query);
  const std::size_t doc_valid = count_valid(doc, layout_.pad_id);
  if (doc_valid == 0) throw Error(ErrorCode::kDegenerateInput, "document consists only of padding");

  std::vector<TokenId> tokens(doc.begin(), doc.end());
  tokens.insert(tokens.end(), query.begin(), query.end());
  const auto positions = iota_positions(0, tokens.size());
  const auto mask = AttentionMask::from_tokens(tokens, layout_.pad_id);
  const auto fr = run(tokens, positions, nullptr, mask, threads);

  std::size_t last = tokens.size();
  while (mask.valid[last - 1] == 0) --last;

  ScoreResult r;
  r.score = score_row(fr.hidden, last - 1);
  const std::size_t query_valid = count_valid(query, layout_.pad_id);
  r.counters.linear_token_count = doc_valid + query_valid;
  r.counters.attn_mac_pairs = masked_causal_pairs(mask.valid, 0);
  r.counters.peak_activation_tokens = doc_valid + query_valid;
  return r;
}

ScoreResult Reranker::score_reuse_impl(const DocKV& doc_kv, std::span<const TokenId> query, int threads) const {
  const auto& cfg = weights_->config;
  const auto& kv = doc_kv.kv;
  if (kv.token_count != layout_.document_len || kv.position_offset != 0 || kv.layers != cfg.layers ||
      kv.kv_heads != cfg.kv_heads || kv.head_dim != cfg.head_dim)
    throw Error(ErrorCode::kShape, "cached KV for '" + doc_kv.chunk_id + "' does not match the layout");
  if (doc_kv.valid_len == 0 || doc_kv.valid_len != kv.valid_count())
    throw Error(ErrorCode::kShape, "cached KV for '" + doc_kv.chunk_id + "' has inconsistent valid_len");
  check_query(query);

  const auto positions = iota_positions(layout_.document_len, layout_.query_len);
  const auto mask = AttentionMask::from_tokens(query, layout_.pad_id);
  const auto fr = run(query, positions, &kv, mask, threads);

  std::size_t last = query.size();
  while (mask.valid[last - 1] == 0) --last;

  ScoreResult r;
  r.score = score_row(fr.hidden, last - 1);
  const std::size_t query_valid = count_valid(query, layout_.pad_id);
  r.counters.linear_token_count = query_valid;
  r.counters.attn_mac_pairs = masked_causal_pairs(mask.valid, doc_kv.valid_len);
  r.counters.peak_activation_tokens = query_valid;
  r.counters.kv_bytes_loaded = doc_kv.payload_bytes();
  return r;
}

ScoreResult Reranker::score_full(std::span<const TokenId> doc_tokens, std::span<const TokenId> query_tokens) const {
  return score_full_impl(doc_tokens, query_tokens, threads_);
}

ScoreResult Reranker::score_reuse(const DocKV& doc_kv, std::span<const TokenId> query_tokens) const {
  return score_reuse_impl(doc_kv, query_tokens, threads_);
}

BatchResult Reranker::score_batch(std::span<const BatchItem> items, ScoreMode mode, std::size_t max_batch) const {
  if (max_batch == 0) throw Error(ErrorCode::kInvalidConfig, "max_batch must be positive");
  for (const auto& it : items) {
    if (it.query_tokens.size() != layout_.query_len)
      throw Error(ErrorCode::kShape, "batch item '" + it.chunk_id + "' has a query of the wrong length");
    if (mode == ScoreMode::kFull && it.doc_tokens.size() != layout_.document_len)
      throw Error(ErrorCode::kShape, "batch item '" + it.chunk_id + "' has a document of the wrong length");
    if (mode == ScoreMode::kReuse && (it.doc_kv == nullptr || it.doc_kv->kv.token_count != layout_.document_len))
      throw Error(ErrorCode::kShape, "batch item '" + it.chunk_id + "' lacks KV in the batch layout");
  }

  BatchResult out;
  out.scores.resize(items.size());
  out.item_counters.resize(items.size());
  std::vector<ScoreResult> results(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  const int team = threads_ > 0 ? threads_ : omp_get_max_threads();

  for (std::size_t begin = 0; begin < items.size(); begin += max_batch) {
    const std::size_t end = std::min(items.size(), begin + max_batch);
    const auto n = static_cast<std::ptrdiff_t>(end - begin);
#pragma omp parallel for schedule(dynamic, 1) num_threads(team) if (n > 1)
    for (std::ptrdiff_t k = 0; k < n; ++k) {
      const std::size_t i = begin + static_cast<std::size_t>(k);
      try {
        results[i] = mode == ScoreMode::kFull ? score_full_impl(items[i].doc_tokens, items[i].query_tokens, 1)
                                              : score_reuse_impl(*items[i].doc_kv, items[i].query_tokens, 1);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
    for (std::size_t i = begin; i < end; ++i)
      if (errors[i]) std::rethrow_exception(errors[i]);
    for (std::size_t i = begin; i < end; ++i) {
      out.scores[i] = ScoredPair{items[i].chunk_id, items[i].query_id, results[i].score};
      out.item_counters[i] = results[i].counters;
    }
  }
  out.counters = group_counters(out.item_counters, max_batch);
  return out;
}

}  // namespace hyperrag
