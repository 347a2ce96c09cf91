#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "hyperrag/detail/math.hpp"
#include "hyperrag/kernels.hpp"

namespace hyperrag::kernels::reference {

namespace {
bool row_ok(const std::uint8_t* valid, std::size_t i) { return valid == nullptr || valid[i] != 0; }
}  // namespace

void rmsnorm(const float* x, const float* gain, float* y, std::size_t rows, std::size_t dim,
             const std::uint8_t* valid) {
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
    for (std::size_t c = 0; c < dim; ++c) yr[c] = (xr[c] * inv) * gain[c];
  }
}

void linear(const float* x, const float* w, float* y, std::size_t rows, std::size_t in,
            std::size_t out, const std::uint8_t* valid) {
  for (std::size_t i = 0; i < rows; ++i) {
    float* yr = y + i * out;
    std::fill(yr, yr + out, 0.0f);
    if (!row_ok(valid, i)) continue;
    const float* xr = x + i * in;
    for (std::size_t k = 0; k < in; ++k) {
      const float xk = xr[k];
      const float* wr = w + k * out;
      for (std::size_t j = 0; j < out; ++j) yr[j] += xk * wr[j];
    }
  }
}

void add_inplace(float* x, const float* delta, std::size_t rows, std::size_t dim,
                 const std::uint8_t* valid) {
  for (std::size_t i = 0; i < rows; ++i) {
    if (!row_ok(valid, i)) continue;
    for (std::size_t c = 0; c < dim; ++c) x[i * dim + c] += delta[i * dim + c];
  }
}

void gelu_inplace(float* x, std::size_t rows, std::size_t dim, const std::uint8_t* valid) {
  for (std::size_t i = 0; i < rows; ++i) {
    if (!row_ok(valid, i)) continue;
    for (std::size_t c = 0; c < dim; ++c) x[i * dim + c] = detail::gelu_tanh(x[i * dim + c]);
  }
}

void rope_inplace(float* x, std::size_t rows, std::size_t heads, std::size_t head_dim,
                  const std::size_t* positions, const float* cos_table, const float* sin_table,
                  const std::uint8_t* valid) {
  const std::size_t half = head_dim / 2;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!row_ok(valid, i)) continue;
    const float* cs = cos_table + positions[i] * half;
    const float* sn = sin_table + positions[i] * half;
    for (std::size_t h = 0; h < heads; ++h) {
      float* v = x + (i * heads + h) * head_dim;
      for (std::size_t c = 0; c < half; ++c) {
        const float a = v[c];
        const float b = v[c + half];
        v[c] = a * cs[c] - b * sn[c];
        v[c + half] = a * sn[c] + b * cs[c];
      }
    }
  }
}

void attention(const AttentionArgs& a) {
  const std::size_t hd = a.head_dim;
  const std::size_t group = a.heads / a.kv_heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> scores(a.past_tokens + a.rows);
  std::vector<float> acc(hd);

  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      float* o = a.out + (i * a.heads + h) * hd;
      if (!row_ok(a.row_valid, i)) {
        std::fill(o, o + hd, 0.0f);
        continue;
      }
      const std::size_t g = h / group;
      const float* q = a.q + (i * a.heads + h) * hd;
      const float* pk = a.past_k + g * a.past_tokens * hd;
      const float* pv = a.past_v + g * a.past_tokens * hd;
      const float* ck = a.cur_k + g * a.rows * hd;
      const float* cv = a.cur_v + g * a.rows * hd;

      // Key j < past_tokens is cached; the rest are current tokens 0..i.
      const std::size_t nkeys = a.past_tokens + i + 1;
      auto key_ok = [&](std::size_t j) {
        return j < a.past_tokens ? row_ok(a.past_valid, j) : row_ok(a.row_valid, j - a.past_tokens);
      };
      auto key_ptr = [&](std::size_t j) {
        return j < a.past_tokens ? pk + j * hd : ck + (j - a.past_tokens) * hd;
      };
      auto value_ptr = [&](std::size_t j) {
        return j < a.past_tokens ? pv + j * hd : cv + (j - a.past_tokens) * hd;
      };

      float m = -std::numeric_limits<float>::infinity();
      for (std::size_t j = 0; j < nkeys; ++j) {
        if (!key_ok(j)) continue;
        const float* k = key_ptr(j);
        float dot = 0.0f;
        for (std::size_t c = 0; c < hd; ++c) dot += q[c] * k[c];
        scores[j] = dot * scale;
        m = std::max(m, scores[j]);
      }
      float sum = 0.0f;
      std::fill(acc.begin(), acc.end(), 0.0f);
      for (std::size_t j = 0; j < nkeys; ++j) {
        if (!key_ok(j)) continue;
        const float e = detail::det_exp(scores[j] - m);
        sum += e;
        const float* v = value_ptr(j);
        for (std::size_t c = 0; c < hd; ++c) acc[c] += e * v[c];
      }
      for (std::size_t c = 0; c < hd; ++c) o[c] = acc[c] / sum;
    }
  }
}

}  // namespace hyperrag::kernels::reference
