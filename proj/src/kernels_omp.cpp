#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "hyperrag/detail/math.hpp"
#include "hyperrag/kernels.hpp"

namespace hyperrag::kernels::omp {

namespace {

bool row_ok(const std::uint8_t* valid, std::size_t i) { return valid == nullptr || valid[i] != 0; }

int team_size(int threads) { return threads > 0 ? threads : omp_get_max_threads(); }

std::vector<std::size_t> valid_rows(std::size_t rows, const std::uint8_t* valid) {
  std::vector<std::size_t> idx;
  idx.reserve(rows);
  for (std::size_t i = 0; i < rows; ++i)
    if (row_ok(valid, i)) idx.push_back(i);
  return idx;
}

constexpr std::size_t kRowBlock = 4;

// Accumulates kRowBlock rows against one weight row at a time. Each output
// element still sums its k terms in ascending order starting from +0.
void linear_block4(const float* x0, const float* x1, const float* x2, const float* x3,
                   const float* w, float* y0, float* y1, float* y2, float* y3, std::size_t in,
                   std::size_t out) {
  std::fill(y0, y0 + out, 0.0f);
  std::fill(y1, y1 + out, 0.0f);
  std::fill(y2, y2 + out, 0.0f);
  std::fill(y3, y3 + out, 0.0f);
  for (std::size_t k = 0; k < in; ++k) {
    const float a0 = x0[k], a1 = x1[k], a2 = x2[k], a3 = x3[k];
    const float* __restrict wr = w + k * out;
    float* __restrict r0 = y0;
    float* __restrict r1 = y1;
    float* __restrict r2 = y2;
    float* __restrict r3 = y3;
#pragma omp simd
    for (std::size_t j = 0; j < out; ++j) {
      const float wj = wr[j];
      r0[j] += a0 * wj;
      r1[j] += a1 * wj;
      r2[j] += a2 * wj;
      r3[j] += a3 * wj;
    }
  }
}

void linear_row(const float* x, const float* w, float* y, std::size_t in, std::size_t out) {
  std::fill(y, y + out, 0.0f);
  for (std::size_t k = 0; k < in; ++k) {
    const float a = x[k];
    const float* __restrict wr = w + k * out;
    float* __restrict r = y;
#pragma omp simd
    for (std::size_t j = 0; j < out; ++j) r[j] += a * wr[j];
  }
}

}  // namespace

void rmsnorm(const float* x, const float* gain, float* y, std::size_t rows, std::size_t dim,
             const std::uint8_t* valid, int threads) {
#pragma omp parallel for schedule(static) num_threads(team_size(threads)) if (rows > 64)
  for (std::size_t i = 0; i < rows; ++i) {
    const float* xr = x + i * dim;
    float* yr = y + i * dim;
    if (!row_ok(valid, i)) {
      std::fill(yr, yr + dim, 0.0f);
      continue;
    }
    float ss = 0.0f;
    for (std::size_t c = 0; c < dim; ++c) ss += xr[c] * xr[c];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(dim) + detail::kRmsEps);
#pragma omp simd
    for (std::size_t c = 0; c < dim; ++c) yr[c] = (xr[c] * inv) * gain[c];
  }
}

void linear(const float* x, const float* w, float* y, std::size_t rows, std::size_t in,
            std::size_t out, const std::uint8_t* valid, int threads) {
  const auto idx = valid_rows(rows, valid);
  if (idx.size() != rows) {
    for (std::size_t i = 0; i < rows; ++i)
      if (!row_ok(valid, i)) std::fill(y + i * out, y + (i + 1) * out, 0.0f);
  }
  const std::size_t full_blocks = idx.size() / kRowBlock;
  const std::size_t tail = idx.size() % kRowBlock;
  const auto nblocks = static_cast<std::ptrdiff_t>(full_blocks + tail);

#pragma omp parallel for schedule(static) num_threads(team_size(threads)) if (nblocks > 1)
  for (std::ptrdiff_t b = 0; b < nblocks; ++b) {
    const auto ub = static_cast<std::size_t>(b);
    if (ub < full_blocks) {
      const std::size_t* r = idx.data() + ub * kRowBlock;
      linear_block4(x + r[0] * in, x + r[1] * in, x + r[2] * in, x + r[3] * in, w, y + r[0] * out,
                    y + r[1] * out, y + r[2] * out, y + r[3] * out, in, out);
    } else {
      const std::size_t r = idx[full_blocks * kRowBlock + (ub - full_blocks)];
      linear_row(x + r * in, w, y + r * out, in, out);
    }
  }
}

void add_inplace(float* x, const float* delta, std::size_t rows, std::size_t dim,
                 const std::uint8_t* valid, int threads) {
#pragma omp parallel for schedule(static) num_threads(team_size(threads)) if (rows > 64)
  for (std::size_t i = 0; i < rows; ++i) {
    if (!row_ok(valid, i)) continue;
#pragma omp simd
    for (std::size_t c = 0; c < dim; ++c) x[i * dim + c] += delta[i * dim + c];
  }
}

void gelu_inplace(float* x, std::size_t rows, std::size_t dim, const std::uint8_t* valid,
                  int threads) {
#pragma omp parallel for schedule(static) num_threads(team_size(threads)) if (rows > 16)
  for (std::size_t i = 0; i < rows; ++i) {
    if (!row_ok(valid, i)) continue;
    float* r = x + i * dim;
#pragma omp simd
    for (std::size_t c = 0; c < dim; ++c) r[c] = detail::gelu_tanh(r[c]);
  }
}

void rope_inplace(float* x, std::size_t rows, std::size_t heads, std::size_t head_dim,
                  const std::size_t* positions, const float* cos_table, const float* sin_table,
                  const std::uint8_t* valid, int threads) {
  const std::size_t half = head_dim / 2;
#pragma omp parallel for schedule(static) num_threads(team_size(threads)) if (rows > 64)
  for (std::size_t i = 0; i < rows; ++i) {
    if (!row_ok(valid, i)) continue;
    const float* cs = cos_table + positions[i] * half;
    const float* sn = sin_table + positions[i] * half;
    for (std::size_t h = 0; h < heads; ++h) {
      float* v = x + (i * heads + h) * head_dim;
#pragma omp simd
      for (std::size_t c = 0; c < half; ++c) {
        const float a = v[c];
        const float b = v[c + half];
        v[c] = a * cs[c] - b * sn[c];
        v[c + half] = a * sn[c] + b * cs[c];
      }
    }
  }
}

// Keys are transposed per kv head to [head_dim x padded_keys] so the score
// loop runs over keys in SIMD lanes while each score still sums its channels
// in ascending order. Query heads of one GQA group share every key and value
// load; the G heads' softmax sums and value accumulators are independent
// chains, which hides add latency without changing any per-element order.
namespace {

constexpr std::size_t kKeyBlock = 16;

struct GroupView {
  const float* q;          // first head of the group for this row
  const float* kt;         // [head_dim x stride]
  std::size_t stride;
  const float* pv;
  const float* cv;
  std::size_t past_tokens;
  const std::uint8_t* key_valid;
  std::size_t nkeys;
  float scale;
  float* scores;           // [G x stride]
  float* out;              // first head of the group for this row
};

template <int G, int HD>
void attend_group_fixed(const GroupView& v) {
  const std::size_t padded = (v.nkeys + kKeyBlock - 1) / kKeyBlock * kKeyBlock;
  for (std::size_t jb = 0; jb < padded; jb += kKeyBlock) {
    float acc[G][kKeyBlock] = {};
    for (int c = 0; c < HD; ++c) {
      const float* kr = v.kt + static_cast<std::size_t>(c) * v.stride + jb;
      for (int h = 0; h < G; ++h) {
        const float qc = v.q[h * HD + c];
#pragma omp simd
        for (std::size_t j = 0; j < kKeyBlock; ++j) acc[h][j] += qc * kr[j];
      }
    }
    for (int h = 0; h < G; ++h)
      for (std::size_t j = 0; j < kKeyBlock; ++j) v.scores[h * v.stride + jb + j] = acc[h][j];
  }

  float sum[G];
  float m[G];
  for (int h = 0; h < G; ++h) {
    float* s = v.scores + h * v.stride;
    float mh = -std::numeric_limits<float>::infinity();
#pragma omp simd reduction(max : mh)
    for (std::size_t j = 0; j < v.nkeys; ++j) {
      s[j] *= v.scale;
      mh = std::max(mh, v.key_valid[j] ? s[j] : -std::numeric_limits<float>::infinity());
    }
    m[h] = mh;
    sum[h] = 0.0f;
  }
  for (int h = 0; h < G; ++h) {
    float* s = v.scores + h * v.stride;
    const float mh = m[h];
#pragma omp simd
    for (std::size_t j = 0; j < v.nkeys; ++j) s[j] = detail::det_exp(s[j] - mh);
    for (std::size_t j = 0; j < v.nkeys; ++j)
      if (!v.key_valid[j]) s[j] = 0.0f;
  }

  float acc[G][HD] = {};
  for (std::size_t j = 0; j < v.nkeys; ++j) {
    if (!v.key_valid[j]) continue;
    const float* val = j < v.past_tokens ? v.pv + j * HD : v.cv + (j - v.past_tokens) * HD;
    for (int h = 0; h < G; ++h) {
      const float e = v.scores[h * v.stride + j];
      sum[h] += e;
#pragma omp simd
      for (int c = 0; c < HD; ++c) acc[h][c] += e * val[c];
    }
  }
  for (int h = 0; h < G; ++h)
    for (int c = 0; c < HD; ++c) v.out[h * HD + c] = acc[h][c] / sum[h];
}

void attend_group_generic(const GroupView& v, std::size_t group, std::size_t hd) {
  std::vector<float> acc(hd);
  for (std::size_t h = 0; h < group; ++h) {
    const float* q = v.q + h * hd;
    float* s = v.scores;
    std::fill(s, s + v.nkeys, 0.0f);
    for (std::size_t c = 0; c < hd; ++c) {
      const float qc = q[c];
      const float* kr = v.kt + c * v.stride;
      for (std::size_t j = 0; j < v.nkeys; ++j) s[j] += qc * kr[j];
    }
    float mh = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < v.nkeys; ++j) {
      s[j] *= v.scale;
      if (v.key_valid[j]) mh = std::max(mh, s[j]);
    }
    float sum = 0.0f;
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (std::size_t j = 0; j < v.nkeys; ++j) {
      if (!v.key_valid[j]) continue;
      const float e = detail::det_exp(s[j] - mh);
      sum += e;
      const float* val = j < v.past_tokens ? v.pv + j * hd : v.cv + (j - v.past_tokens) * hd;
      for (std::size_t c = 0; c < hd; ++c) acc[c] += e * val[c];
    }
    for (std::size_t c = 0; c < hd; ++c) v.out[h * hd + c] = acc[c] / sum;
  }
}

}  // namespace

void attention(const AttentionArgs& a, int threads) {
  const std::size_t hd = a.head_dim;
  const std::size_t group = a.heads / a.kv_heads;
  const std::size_t total = a.past_tokens + a.rows;
  const std::size_t stride = (total + kKeyBlock - 1) / kKeyBlock * kKeyBlock;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  std::vector<float> kt(a.kv_heads * hd * stride, 0.0f);
  std::vector<std::uint8_t> key_valid(stride, 0);
  for (std::size_t j = 0; j < total; ++j)
    key_valid[j] = j < a.past_tokens ? row_ok(a.past_valid, j) : row_ok(a.row_valid, j - a.past_tokens);
  for (std::size_t g = 0; g < a.kv_heads; ++g) {
    float* dst = kt.data() + g * hd * stride;
    for (std::size_t j = 0; j < a.past_tokens; ++j) {
      const float* k = a.past_k + (g * a.past_tokens + j) * hd;
      for (std::size_t c = 0; c < hd; ++c) dst[c * stride + j] = k[c];
    }
    for (std::size_t j = 0; j < a.rows; ++j) {
      const float* k = a.cur_k + (g * a.rows + j) * hd;
      for (std::size_t c = 0; c < hd; ++c) dst[c * stride + a.past_tokens + j] = k[c];
    }
  }

  const auto work = static_cast<std::ptrdiff_t>(a.rows * a.kv_heads);
#pragma omp parallel num_threads(team_size(threads)) if (work > 8)
  {
    std::vector<float> scores(group * stride);
#pragma omp for schedule(dynamic, 4)
    for (std::ptrdiff_t w = 0; w < work; ++w) {
      const std::size_t i = static_cast<std::size_t>(w) / a.kv_heads;
      const std::size_t g = static_cast<std::size_t>(w) % a.kv_heads;
      float* out = a.out + (i * a.heads + g * group) * hd;
      if (!row_ok(a.row_valid, i)) {
        std::fill(out, out + group * hd, 0.0f);
        continue;
      }
      GroupView v{a.q + (i * a.heads + g * group) * hd,
                  kt.data() + g * hd * stride,
                  stride,
                  a.past_v + g * a.past_tokens * hd,
                  a.cur_v + g * a.rows * hd,
                  a.past_tokens,
                  key_valid.data(),
                  a.past_tokens + i + 1,
                  scale,
                  scores.data(),
                  out};
      if (group == 4 && hd == 16) {
        attend_group_fixed<4, 16>(v);
      } else if (group == 1 && hd == 16) {
        attend_group_fixed<1, 16>(v);
      } else if (group == 2 && hd == 16) {
        attend_group_fixed<2, 16>(v);
      } else {
        attend_group_generic(v, group, hd);
      }
    }
  }
}

}  // namespace hyperrag::kernels::omp
