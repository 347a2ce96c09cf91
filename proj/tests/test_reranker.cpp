#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "hyperrag/error.hpp"
#include "hyperrag/hash.hpp"
#include "hyperrag/reranker.hpp"
#include "test_util.hpp"

using namespace hyperrag;
using testutil::default_weights;
using testutil::padded_tokens;
using testutil::code_of;
using testutil::random_tokens;
using testutil::same_bits;

namespace {

std::uint64_t kv_checksum(const DocKV& d) {
  std::string bytes;
  for (std::size_t l = 0; l < d.kv.layers; ++l)
    for (const auto* t : {&d.kv.keys[l], &d.kv.values[l]})
      bytes.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(float));
  return fnv1a64(bytes);
}

// Counts unmasked causal (query position, key position) pairs by brute force.
std::uint64_t enumerate_pairs(const std::vector<TokenId>& keys_side, const std::vector<TokenId>& query_side,
                              bool query_rows_only) {
  std::vector<TokenId> seq = keys_side;
  seq.insert(seq.end(), query_side.begin(), query_side.end());
  const std::size_t first_row = query_rows_only ? keys_side.size() : 0;
  std::uint64_t n = 0;
  for (std::size_t i = first_row; i < seq.size(); ++i)
    for (std::size_t j = 0; j <= i; ++j)
      if (seq[i] != 0 && seq[j] != 0) ++n;
  return n;
}

LayoutConfig small_layout() { return LayoutConfig{32, 8, 0}; }

}  // namespace

// ---- tokenize ----

TEST(Tokenize, EmptyTextIsAllPad) {
  EXPECT_EQ(tokenize("", 4, 32768), (std::vector<TokenId>{0, 0, 0, 0}));
  EXPECT_EQ(tokenize("   \t\n ", 3, 32768), (std::vector<TokenId>{0, 0, 0}));
}

TEST(Tokenize, HashesWordsAndTruncates) {
  const auto t = tokenize("alpha beta alpha", 5, 32768);
  EXPECT_EQ(t[0], t[2]);
  EXPECT_NE(t[0], t[1]);
  EXPECT_EQ(t[0], 1 + fnv1a64("alpha") % 32767);
  EXPECT_EQ(t[3], 0u);
  EXPECT_EQ(t[4], 0u);
  const auto u = tokenize("a b c", 2, 32768);
  EXPECT_EQ(u, (std::vector<TokenId>{static_cast<TokenId>(1 + fnv1a64("a") % 32767),
                                     static_cast<TokenId>(1 + fnv1a64("b") % 32767)}));
  for (auto id : tokenize("one two three four five six seven", 7, 50)) {
    EXPECT_GE(id, 1u);
    EXPECT_LT(id, 50u);
  }
}

// ---- layout ----

TEST(Layout, RejectsOversizedLayout) {
  const auto& w = default_weights();
  EXPECT_EQ(code_of([&] { Reranker(w, LayoutConfig{1000, 48, 0}); }), ErrorCode::kInvalidConfig);
  EXPECT_EQ(code_of([&] { Reranker(w, LayoutConfig{0, 48, 0}); }), ErrorCode::kInvalidConfig);
  EXPECT_NO_THROW(Reranker(w, LayoutConfig{976, 48, 0}));
}

// ---- prefill ----

TEST(DocPrefill, PayloadSizeFollowsShape) {
  Reranker rr(default_weights(), LayoutConfig{}, KernelPath::kOptimized);
  const auto doc = random_tokens(256, 32768, 1);
  const auto kv = rr.doc_prefill("d", doc);
  EXPECT_EQ(kv.payload_bytes(), 4u * 2 * 2 * 256 * 16 * 4);
  EXPECT_EQ(kv.payload_bytes(), 262144u);
  EXPECT_EQ(kv.valid_len, 256u);
  EXPECT_EQ(kv.kv.position_offset, 0u);
}

TEST(DocPrefill, GoldenChecksumOnBothPaths) {
  std::vector<TokenId> doc(256);
  for (std::size_t i = 0; i < doc.size(); ++i) doc[i] = static_cast<TokenId>(1 + (i * 7919) % 32767);
  const auto ref = Reranker(default_weights(), LayoutConfig{}, KernelPath::kReference).doc_prefill("g", doc);
  const auto opt = Reranker(default_weights(), LayoutConfig{}, KernelPath::kOptimized).doc_prefill("g", doc);
  // Recorded once from the scalar path (default config, seed 42).
  EXPECT_EQ(kv_checksum(ref), 0xbed2abf0acfdf04bULL);
  EXPECT_TRUE(ref == opt);
}

TEST(DocPrefill, PadsFlaggedAndZeroed) {
  Reranker rr(default_weights(), small_layout(), KernelPath::kReference);
  const auto doc = padded_tokens(32, 20, 32768, 3);
  const auto kv = rr.doc_prefill("p", doc);
  EXPECT_EQ(kv.valid_len, 20u);
  EXPECT_EQ(kv.kv.valid_count(), 20u);
  for (std::size_t l = 0; l < kv.kv.layers; ++l)
    for (std::size_t g = 0; g < kv.kv.kv_heads; ++g)
      for (std::size_t t = 20; t < 32; ++t)
        for (std::size_t c = 0; c < kv.kv.head_dim; ++c)
          ASSERT_TRUE(same_bits(kv.kv.keys[l][(g * 32 + t) * 16 + c], 0.0f));
}

TEST(DocPrefill, Errors) {
  Reranker rr(default_weights(), small_layout());
  EXPECT_EQ(code_of([&] { rr.doc_prefill("z", std::vector<TokenId>(32, 0)); }), ErrorCode::kDegenerateInput);
  EXPECT_EQ(code_of([&] { rr.doc_prefill("s", random_tokens(31, 32768, 1)); }), ErrorCode::kShape);
  auto gap = random_tokens(32, 32768, 2);
  gap[5] = 0;
  EXPECT_EQ(code_of([&] { rr.doc_prefill("gap", gap); }), ErrorCode::kDegenerateInput);
}

// ---- scoring ----

TEST(Scoring, ReuseEqualsFullBitExactIncludingPads) {
  for (auto path : {KernelPath::kReference, KernelPath::kOptimized}) {
    Reranker rr(default_weights(), small_layout(), path);
    SplitMix64 rng(5);
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t dv = 1 + rng.next_below(32);
      auto query = random_tokens(8, 32768, 900 + trial);
      // Trailing and interior query pads.
      if (trial % 3 == 1) query[7] = query[6] = 0;
      if (trial % 3 == 2) query[2] = 0;
      const auto doc = padded_tokens(32, dv, 32768, 100 + trial);
      const auto kv = rr.doc_prefill("c", doc);
      const auto full = rr.score_full(doc, query);
      const auto reuse = rr.score_reuse(kv, query);
      ASSERT_TRUE(same_bits(full.score, reuse.score)) << "trial " << trial << ": " << full.score << " vs " << reuse.score;
      ASSERT_TRUE(std::isfinite(full.score));
    }
  }
}

TEST(Scoring, ReferenceAndOptimizedAgree) {
  Reranker a(default_weights(), small_layout(), KernelPath::kReference);
  Reranker b(default_weights(), small_layout(), KernelPath::kOptimized, 2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto doc = padded_tokens(32, 10 + trial, 32768, trial);
    const auto q = random_tokens(8, 32768, 50 + trial);
    EXPECT_TRUE(same_bits(a.score_full(doc, q).score, b.score_full(doc, q).score));
  }
}

TEST(Scoring, FiniteAndByteStable) {
  Reranker rr(default_weights(), LayoutConfig{16, 8, 0});
  for (int trial = 0; trial < 1000; ++trial) {
    const auto doc = random_tokens(16, 32768, trial);
    const auto q = random_tokens(8, 32768, 5000 + trial);
    const float s = rr.score_full(doc, q).score;
    ASSERT_TRUE(std::isfinite(s));
    if (trial % 100 == 0) {
      ASSERT_TRUE(same_bits(s, rr.score_full(doc, q).score));
    }
  }
}

TEST(Scoring, Errors) {
  Reranker rr(default_weights(), small_layout());
  const auto doc = random_tokens(32, 32768, 1);
  const auto kv = rr.doc_prefill("d", doc);
  EXPECT_EQ(code_of([&] { rr.score_full(doc, std::vector<TokenId>(8, 0)); }), ErrorCode::kDegenerateInput);
  EXPECT_EQ(code_of([&] { rr.score_reuse(kv, std::vector<TokenId>(8, 0)); }), ErrorCode::kDegenerateInput);
  EXPECT_EQ(code_of([&] { rr.score_full(doc, random_tokens(9, 32768, 2)); }), ErrorCode::kShape);
  Reranker other(default_weights(), LayoutConfig{16, 8, 0});
  EXPECT_EQ(code_of([&] { other.score_reuse(kv, random_tokens(8, 32768, 3)); }), ErrorCode::kShape);
  EXPECT_THROW(parse_score_mode("fast"), Error);
}

// ---- counters ----

TEST(Counters, ClosedForms) {
  EXPECT_EQ(causal_pairs(304), 46360u);
  EXPECT_EQ(reuse_pairs(256, 48), 13464u);
  EXPECT_EQ(48u * 256 + 48u * 49 / 2, 13464u);
}

TEST(Counters, DefaultLayoutNoPads) {
  Reranker rr(default_weights(), LayoutConfig{}, KernelPath::kOptimized);
  const auto doc = random_tokens(256, 32768, 11);
  const auto q = random_tokens(48, 32768, 12);
  const auto full = rr.score_full(doc, q).counters;
  const auto reuse = rr.score_reuse(rr.doc_prefill("d", doc), q).counters;

  EXPECT_EQ(full.linear_token_count, 304u);
  EXPECT_EQ(full.attn_mac_pairs, 46360u);
  EXPECT_EQ(full.peak_activation_tokens, 304u);
  EXPECT_EQ(full.kv_bytes_loaded, 0u);
  EXPECT_EQ(reuse.linear_token_count, 48u);
  EXPECT_EQ(reuse.attn_mac_pairs, 13464u);
  EXPECT_EQ(reuse.peak_activation_tokens, 48u);
  EXPECT_EQ(reuse.kv_bytes_loaded, 262144u);

  // Ratios as integer cross-multiplication: reuse/full == 48/304.
  EXPECT_EQ(reuse.linear_token_count * 304, full.linear_token_count * 48);
  EXPECT_EQ(reuse.peak_activation_tokens * 304, full.peak_activation_tokens * 48);
  EXPECT_NEAR(static_cast<double>(reuse.attn_mac_pairs) / full.attn_mac_pairs, 0.2904, 5e-5);

  EXPECT_EQ(full.attn_mac_pairs, enumerate_pairs(doc, q, false));
  EXPECT_EQ(reuse.attn_mac_pairs, enumerate_pairs(doc, q, true));
}

TEST(Counters, PaddedInputsMatchEnumeration) {
  Reranker rr(default_weights(), small_layout());
  SplitMix64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t dv = 1 + rng.next_below(32);
    const auto doc = padded_tokens(32, dv, 32768, trial);
    auto q = random_tokens(8, 32768, 100 + trial);
    for (std::size_t i = 0; i < 8; ++i)
      if (rng.next_below(3) == 0) q[i] = 0;
    if (std::all_of(q.begin(), q.end(), [](TokenId t) { return t == 0; })) q[0] = 1;
    const std::size_t qv = static_cast<std::size_t>(std::count_if(q.begin(), q.end(), [](TokenId t) { return t != 0; }));

    const auto full = rr.score_full(doc, q).counters;
    const auto reuse = rr.score_reuse(rr.doc_prefill("d", doc), q).counters;
    EXPECT_EQ(full.attn_mac_pairs, enumerate_pairs(doc, q, false));
    EXPECT_EQ(reuse.attn_mac_pairs, enumerate_pairs(doc, q, true));
    EXPECT_EQ(reuse.attn_mac_pairs, reuse_pairs(dv, qv));
    EXPECT_EQ(full.attn_mac_pairs, causal_pairs(dv + qv));
    EXPECT_EQ(full.linear_token_count, dv + qv);
    EXPECT_EQ(reuse.linear_token_count, qv);
  }
}

TEST(Counters, MonotoneInDocumentLength) {
  std::uint64_t prev_attn = 0;
  for (std::size_t d : {16u, 32u, 64u, 128u}) {
    Reranker rr(default_weights(), LayoutConfig{d, 8, 0});
    const auto doc = random_tokens(d, 32768, d);
    const auto q = random_tokens(8, 32768, 1);
    const auto full = rr.score_full(doc, q).counters;
    const auto reuse = rr.score_reuse(rr.doc_prefill("d", doc), q).counters;
    EXPECT_GT(full.attn_mac_pairs, prev_attn);
    prev_attn = full.attn_mac_pairs;
    EXPECT_EQ(reuse.linear_token_count, 8u);
    EXPECT_LT(reuse.attn_mac_pairs, full.attn_mac_pairs);
  }
}

TEST(Counters, PeakMergesByMaxWorkAdds) {
  CounterReport a{10, 100, 30, 5}, b{1, 2, 20, 3};
  a += b;
  EXPECT_EQ(a, (CounterReport{11, 102, 30, 8}));
  std::vector<CounterReport> items(5, CounterReport{2, 3, 4, 1});
  const auto g = group_counters(items, 2);
  EXPECT_EQ(g.linear_token_count, 10u);
  EXPECT_EQ(g.attn_mac_pairs, 15u);
  EXPECT_EQ(g.peak_activation_tokens, 8u);
  EXPECT_EQ(g.kv_bytes_loaded, 5u);
  EXPECT_EQ(group_counters(items, 8).peak_activation_tokens, 20u);
  EXPECT_EQ(code_of([&] { group_counters(items, 0); }), ErrorCode::kInvalidConfig);
}

// ---- batching ----

TEST(Batch, ReuseBatchOfEightAtDefaultLayout) {
  Reranker rr(default_weights(), LayoutConfig{});
  std::vector<std::vector<TokenId>> docs, queries;
  std::vector<DocKV> kvs;
  for (int i = 0; i < 8; ++i) {
    docs.push_back(random_tokens(256, 32768, 10 + i));
    queries.push_back(random_tokens(48, 32768, 20 + i));
    kvs.push_back(rr.doc_prefill("c" + std::to_string(i), docs.back()));
  }
  std::vector<BatchItem> items;
  for (int i = 0; i < 8; ++i) items.push_back({kvs[i].chunk_id, "q", &kvs[i], docs[i], queries[i]});
  const auto r = rr.score_batch(items, ScoreMode::kReuse, 8);
  EXPECT_EQ(r.counters.attn_mac_pairs, 8u * 13464);
  EXPECT_EQ(r.counters.linear_token_count, 8u * 48);
  EXPECT_EQ(r.counters.peak_activation_tokens, 8u * 48);
  EXPECT_EQ(r.counters.kv_bytes_loaded, 8u * 262144);
  for (int i = 0; i < 8; ++i)
    EXPECT_TRUE(same_bits(r.scores[i].score, rr.score_reuse(kvs[i], queries[i]).score));
}

TEST(Batch, TransparentToSizeAndOrder) {
  Reranker rr(default_weights(), small_layout(), KernelPath::kReference);
  const int n = 7;
  std::vector<std::vector<TokenId>> docs, queries;
  std::vector<DocKV> kvs;
  for (int i = 0; i < n; ++i) {
    docs.push_back(padded_tokens(32, 5 + 3 * i, 32768, i));
    queries.push_back(random_tokens(8, 32768, 40 + i));
    kvs.push_back(rr.doc_prefill("c" + std::to_string(i), docs.back()));
  }
  std::vector<BatchItem> items;
  for (int i = 0; i < n; ++i) items.push_back({kvs[i].chunk_id, "q" + std::to_string(i), &kvs[i], docs[i], queries[i]});

  for (auto mode : {ScoreMode::kFull, ScoreMode::kReuse}) {
    const auto base = rr.score_batch(items, mode, 1);
    for (int i = 0; i < n; ++i) {
      const float single = mode == ScoreMode::kFull ? rr.score_full(docs[i], queries[i]).score
                                                    : rr.score_reuse(kvs[i], queries[i]).score;
      EXPECT_TRUE(same_bits(base.scores[i].score, single));
      EXPECT_EQ(base.scores[i].chunk_id, items[i].chunk_id);
      EXPECT_EQ(base.scores[i].query_id, items[i].query_id);
    }
    for (std::size_t mb : {2u, 3u, 8u}) {
      const auto r = rr.score_batch(items, mode, mb);
      for (int i = 0; i < n; ++i) EXPECT_TRUE(same_bits(r.scores[i].score, base.scores[i].score));
      EXPECT_EQ(r.item_counters, base.item_counters);
      EXPECT_EQ(r.counters.attn_mac_pairs, base.counters.attn_mac_pairs);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[1], perm[4]);
    std::vector<BatchItem> shuffled;
    for (auto p : perm) shuffled.push_back(items[p]);
    const auto r = rr.score_batch(shuffled, mode, 3);
    for (int i = 0; i < n; ++i) EXPECT_TRUE(same_bits(r.scores[i].score, base.scores[perm[i]].score));
  }
}

TEST(Batch, Errors) {
  Reranker rr(default_weights(), small_layout());
  const auto doc = random_tokens(32, 32768, 1);
  const auto q = random_tokens(8, 32768, 2);
  const auto kv = rr.doc_prefill("d", doc);
  Reranker big(default_weights(), LayoutConfig{64, 8, 0});
  const auto doc64 = random_tokens(64, 32768, 3);
  const auto kv64 = big.doc_prefill("e", doc64);
  const auto q9 = random_tokens(9, 32768, 4);

  std::vector<BatchItem> mixed{{"d", "q", &kv, doc, q}, {"e", "q", &kv64, doc64, q}};
  EXPECT_EQ(code_of([&] { rr.score_batch(mixed, ScoreMode::kReuse, 4); }), ErrorCode::kShape);
  EXPECT_EQ(code_of([&] { rr.score_batch(mixed, ScoreMode::kFull, 4); }), ErrorCode::kShape);
  std::vector<BatchItem> badq{{"d", "q", &kv, doc, q9}};
  EXPECT_EQ(code_of([&] { rr.score_batch(badq, ScoreMode::kReuse, 4); }), ErrorCode::kShape);
  std::vector<BatchItem> nokv{{"d", "q", nullptr, doc, q}};
  EXPECT_EQ(code_of([&] { rr.score_batch(nokv, ScoreMode::kReuse, 4); }), ErrorCode::kShape);
  EXPECT_EQ(code_of([&] { rr.score_batch(nokv, ScoreMode::kFull, 0); }), ErrorCode::kInvalidConfig);
  EXPECT_TRUE(rr.score_batch({}, ScoreMode::kFull, 4).scores.empty());
}
