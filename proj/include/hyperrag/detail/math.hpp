#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace hyperrag::detail {

// Branch-free expf (Cephes polynomial). Both kernel sets call this exact
// function so that softmax and GELU agree bit for bit, and it vectorizes.
inline float det_exp(float x) {
  x = x < -87.0f ? -87.0f : x;
  x = x > 88.0f ? 88.0f : x;
  // Round-to-nearest of x*log2(e) via truncation of a value kept positive.
  const auto k = static_cast<std::int32_t>(x * 1.44269504088896341f + 128.5f) - 128;
  const auto kf = static_cast<float>(k);
  float r = x - kf * 0.693359375f;
  r = r - kf * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * (r * r) + r + 1.0f;
  return p * std::bit_cast<float>((k + 127) << 23);
}

// tanh-approximation GELU written as x * sigmoid(2u), the same function as
// 0.5 x (1 + tanh(u)) with u = sqrt(2/pi) (x + 0.044715 x^3).
inline float gelu_tanh(float x) {
  const float u = 0.7978845608028654f * (x + 0.044715f * x * x * x);
  return x / (1.0f + det_exp(-2.0f * u));
}

inline constexpr float kRmsEps = 1e-6f;

}  // namespace hyperrag::detail
