#include "hyperrag/model.hpp"

#include <cmath>
#include <numeric>

#include "hyperrag/error.hpp"
#include "hyperrag/hash.hpp"
#include "hyperrag/kernels.hpp"

namespace hyperrag {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
  if (layers == 0 || model_dim == 0 || heads == 0 || kv_heads == 0 || head_dim == 0)
    fail("model dimensions must be positive");
  if (heads % kv_heads != 0) fail("heads must be a multiple of kv_heads");
  if (model_dim != heads * head_dim) fail("model_dim must equal heads * head_dim");
  if (head_dim % 2 != 0) fail("head_dim must be even for rotary encoding");
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (!(rope_base > 0.0) || !std::isfinite(rope_base)) fail("rope_base must be positive");
  if (max_position == 0) fail("max_position must be positive");
}

namespace {

std::vector<float> uniform_tensor(const ModelConfig& config, const std::string& name, std::size_t count,
                                  std::size_t fan_in, std::size_t fan_out) {
  SplitMix64 rng(config.seed ^ fnv1a64(name));
  const auto bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)));
  std::vector<float> t(count);
  for (auto& v : t) v = (2.0f * rng.next_unit_float() - 1.0f) * bound;
  return t;
}

}  // namespace

Weights init_weights(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.model_dim;
  const std::size_t qd = config.heads * config.head_dim;
  const std::size_t kvd = config.kv_heads * config.head_dim;
  const std::size_t md = config.mlp_dim();

  Weights w;
  w.config = config;
  w.token_embedding = uniform_tensor(config, "token_embedding", config.vocab_size * d, config.vocab_size, d);
  w.layers.resize(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    auto& lw = w.layers[l];
    lw.attn_norm.assign(d, 1.0f);
    lw.wq = uniform_tensor(config, p + "wq", d * qd, d, qd);
    lw.wk = uniform_tensor(config, p + "wk", d * kvd, d, kvd);
    lw.wv = uniform_tensor(config, p + "wv", d * kvd, d, kvd);
    lw.wo = uniform_tensor(config, p + "wo", qd * d, qd, d);
    lw.mlp_norm.assign(d, 1.0f);
    lw.w_up = uniform_tensor(config, p + "w_up", d * md, d, md);
    lw.w_down = uniform_tensor(config, p + "w_down", md * d, md, d);
  }
  w.final_norm.assign(d, 1.0f);
  w.score_head = uniform_tensor(config, "score_head", d, d, 1);

  const std::size_t half = config.head_dim / 2;
  w.rope_cos.resize(config.max_position * half);
  w.rope_sin.resize(config.max_position * half);
  for (std::size_t pos = 0; pos < config.max_position; ++pos) {
    for (std::size_t i = 0; i < half; ++i) {
      const double inv_freq =
          std::pow(config.rope_base, -2.0 * static_cast<double>(i) / static_cast<double>(config.head_dim));
      const double angle = static_cast<double>(pos) * inv_freq;
      w.rope_cos[pos * half + i] = static_cast<float>(std::cos(angle));
      w.rope_sin[pos * half + i] = static_cast<float>(std::sin(angle));
    }
  }
  return w;
}

KVTensorSet KVTensorSet::zeros(std::size_t layers, std::size_t kv_heads, std::size_t head_dim,
                               std::size_t token_count, std::size_t position_offset) {
  KVTensorSet kv;
  kv.layers = layers;
  kv.kv_heads = kv_heads;
  kv.head_dim = head_dim;
  kv.token_count = token_count;
  kv.position_offset = position_offset;
  kv.keys.assign(layers, std::vector<float>(kv_heads * token_count * head_dim, 0.0f));
  kv.values.assign(layers, std::vector<float>(kv_heads * token_count * head_dim, 0.0f));
  kv.valid.assign(token_count, 1);
  return kv;
}

std::size_t KVTensorSet::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](auto v) { return v != 0; }));
}

AttentionMask AttentionMask::from_tokens(std::span<const TokenId> tokens, TokenId pad_id) {
  AttentionMask m;
  m.valid.resize(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) m.valid[i] = tokens[i] != pad_id ? 1 : 0;
  return m;
}

std::vector<std::size_t> iota_positions(std::size_t start, std::size_t count) {
  std::vector<std::size_t> p(count);
  std::iota(p.begin(), p.end(), start);
  return p;
}

namespace {

struct ReferenceKernels {
  void rmsnorm(const float* x, const float* g, float* y, std::size_t r, std::size_t d,
               const std::uint8_t* v) const {
    kernels::reference::rmsnorm(x, g, y, r, d, v);
  }
  void linear(const float* x, const float* w, float* y, std::size_t r, std::size_t in, std::size_t out,
              const std::uint8_t* v) const {
    kernels::reference::linear(x, w, y, r, in, out, v);
  }
  void add(float* x, const float* d, std::size_t r, std::size_t dim, const std::uint8_t* v) const {
    kernels::reference::add_inplace(x, d, r, dim, v);
  }
  void gelu(float* x, std::size_t r, std::size_t dim, const std::uint8_t* v) const {
    kernels::reference::gelu_inplace(x, r, dim, v);
  }
  void rope(float* x, std::size_t r, std::size_t h, std::size_t hd, const std::size_t* p, const float* c,
            const float* s, const std::uint8_t* v) const {
    kernels::reference::rope_inplace(x, r, h, hd, p, c, s, v);
  }
  void attention(const kernels::AttentionArgs& a) const { kernels::reference::attention(a); }
};

struct OmpKernels {
  int threads;
  void rmsnorm(const float* x, const float* g, float* y, std::size_t r, std::size_t d,
               const std::uint8_t* v) const {
    kernels::omp::rmsnorm(x, g, y, r, d, v, threads);
  }
  void linear(const float* x, const float* w, float* y, std::size_t r, std::size_t in, std::size_t out,
              const std::uint8_t* v) const {
    kernels::omp::linear(x, w, y, r, in, out, v, threads);
  }
  void add(float* x, const float* d, std::size_t r, std::size_t dim, const std::uint8_t* v) const {
    kernels::omp::add_inplace(x, d, r, dim, v, threads);
  }
  void gelu(float* x, std::size_t r, std::size_t dim, const std::uint8_t* v) const {
    kernels::omp::gelu_inplace(x, r, dim, v, threads);
  }
  void rope(float* x, std::size_t r, std::size_t h, std::size_t hd, const std::size_t* p, const float* c,
            const float* s, const std::uint8_t* v) const {
    kernels::omp::rope_inplace(x, r, h, hd, p, c, s, v, threads);
  }
  void attention(const kernels::AttentionArgs& a) const { kernels::omp::attention(a, threads); }
};

void check_inputs(const Weights& w, std::span<const TokenId> tokens, std::span<const std::size_t> positions,
                  const KVTensorSet* past, const AttentionMask& mask) {
  const auto& cfg = w.config;
  if (positions.size() != tokens.size())
    throw Error(ErrorCode::kShape, "positions and tokens differ in length");
  if (!mask.valid.empty() && mask.valid.size() != tokens.size())
    throw Error(ErrorCode::kShape, "mask length differs from token count");
  for (auto t : tokens)
    if (t >= cfg.vocab_size) throw Error(ErrorCode::kRange, "token id " + std::to_string(t) + " outside vocabulary");
  for (std::size_t i = 1; i < positions.size(); ++i)
    if (positions[i] <= positions[i - 1]) throw Error(ErrorCode::kRange, "positions must be strictly increasing");
  if (!positions.empty() && positions.back() >= cfg.max_position)
    throw Error(ErrorCode::kRange, "position " + std::to_string(positions.back()) + " exceeds max_position");
  if (past != nullptr) {
    if (past->layers != cfg.layers || past->kv_heads != cfg.kv_heads || past->head_dim != cfg.head_dim)
      throw Error(ErrorCode::kShape, "past KV shape does not match the model");
    if (past->keys.size() != cfg.layers || past->values.size() != cfg.layers ||
        past->valid.size() != past->token_count)
      throw Error(ErrorCode::kShape, "past KV is malformed");
    for (std::size_t l = 0; l < cfg.layers; ++l)
      if (past->keys[l].size() != past->elements_per_tensor() || past->values[l].size() != past->elements_per_tensor())
        throw Error(ErrorCode::kShape, "past KV tensor size mismatch");
    if (!positions.empty() && positions.front() != past->position_offset + past->token_count)
      throw Error(ErrorCode::kRange, "positions must continue directly after the past KV");
  }
}

template <class Kernels>
ForwardResult run_forward(const Weights& w, std::span<const TokenId> tokens, std::span<const std::size_t> positions,
                          const KVTensorSet* past, const AttentionMask& mask, const Kernels& k) {
  check_inputs(w, tokens, positions, past, mask);
  const auto& cfg = w.config;
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.model_dim;
  const std::size_t hd = cfg.head_dim;
  const std::size_t qd = cfg.heads * hd;
  const std::size_t kvd = cfg.kv_heads * hd;
  const std::size_t md = cfg.mlp_dim();

  std::vector<std::uint8_t> valid = mask.valid.empty() ? std::vector<std::uint8_t>(T, 1) : mask.valid;
  const std::uint8_t* vr = valid.data();

  const std::size_t offset = T > 0 ? positions.front() : (past ? past->position_offset + past->token_count : 0);
  ForwardResult result;
  result.produced = KVTensorSet::zeros(cfg.layers, cfg.kv_heads, hd, T, offset);
  result.produced.valid = valid;

  std::vector<float> x(T * d, 0.0f);
  for (std::size_t i = 0; i < T; ++i)
    if (vr[i]) std::copy_n(w.token_embedding.data() + tokens[i] * d, d, x.data() + i * d);

  std::vector<float> xn(T * d), q(T * qd), kbuf(T * kvd), vbuf(T * kvd), att(T * qd), o(T * d), up(T * md);

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& lw = w.layers[l];
    k.rmsnorm(x.data(), lw.attn_norm.data(), xn.data(), T, d, vr);
    k.linear(xn.data(), lw.wq.data(), q.data(), T, d, qd, vr);
    k.linear(xn.data(), lw.wk.data(), kbuf.data(), T, d, kvd, vr);
    k.linear(xn.data(), lw.wv.data(), vbuf.data(), T, d, kvd, vr);
    k.rope(q.data(), T, cfg.heads, hd, positions.data(), w.rope_cos.data(), w.rope_sin.data(), vr);
    k.rope(kbuf.data(), T, cfg.kv_heads, hd, positions.data(), w.rope_cos.data(), w.rope_sin.data(), vr);

    auto& keys = result.produced.keys[l];
    auto& values = result.produced.values[l];
    for (std::size_t t = 0; t < T; ++t) {
      if (!vr[t]) continue;
      for (std::size_t g = 0; g < cfg.kv_heads; ++g) {
        std::copy_n(kbuf.data() + t * kvd + g * hd, hd, keys.data() + (g * T + t) * hd);
        std::copy_n(vbuf.data() + t * kvd + g * hd, hd, values.data() + (g * T + t) * hd);
      }
    }

    kernels::AttentionArgs args;
    args.q = q.data();
    args.rows = T;
    args.row_valid = vr;
    if (past != nullptr) {
      args.past_k = past->keys[l].data();
      args.past_v = past->values[l].data();
      args.past_tokens = past->token_count;
      args.past_valid = past->valid.data();
    }
    args.cur_k = keys.data();
    args.cur_v = values.data();
    args.heads = cfg.heads;
    args.kv_heads = cfg.kv_heads;
    args.head_dim = hd;
    args.out = att.data();
    k.attention(args);

    k.linear(att.data(), lw.wo.data(), o.data(), T, qd, d, vr);
    k.add(x.data(), o.data(), T, d, vr);

    k.rmsnorm(x.data(), lw.mlp_norm.data(), xn.data(), T, d, vr);
    k.linear(xn.data(), lw.w_up.data(), up.data(), T, d, md, vr);
    k.gelu(up.data(), T, md, vr);
    k.linear(up.data(), lw.w_down.data(), o.data(), T, md, d, vr);
    k.add(x.data(), o.data(), T, d, vr);
  }

  result.hidden.assign(T * d, 0.0f);
  k.rmsnorm(x.data(), w.final_norm.data(), result.hidden.data(), T, d, vr);
  return result;
}

}  // namespace

ForwardResult reference_forward(const Weights& weights, std::span<const TokenId> tokens,
                                std::span<const std::size_t> positions, const KVTensorSet* past,
                                const AttentionMask& mask) {
  return run_forward(weights, tokens, positions, past, mask, ReferenceKernels{});
}

ForwardResult forward(const Weights& weights, std::span<const TokenId> tokens, std::span<const std::size_t> positions,
                      const KVTensorSet* past, const AttentionMask& mask, const ForwardOptions& options) {
  return run_forward(weights, tokens, positions, past, mask, OmpKernels{options.threads});
}

}  // namespace hyperrag
