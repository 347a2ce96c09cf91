#pragma once

#include <cstddef>
#include <cstdint>

// Two implementations of every per-layer kernel. `reference` is the serial
// definition of the arithmetic; `omp` is blocked and OpenMP-parallel and must
// produce identical bits. Rows whose `valid` flag is zero are skipped and
// their outputs written as +0. A null `valid` means all rows are valid.
namespace hyperrag::kernels {

struct AttentionArgs {
  const float* q = nullptr;  // [rows x heads x head_dim]
  std::size_t rows = 0;
  const std::uint8_t* row_valid = nullptr;

  // Cached prefix, [kv_heads x past_tokens x head_dim].
  const float* past_k = nullptr;
  const float* past_v = nullptr;
  std::size_t past_tokens = 0;
  const std::uint8_t* past_valid = nullptr;

  // Current tokens, [kv_heads x rows x head_dim]. Row i sees current keys 0..i.
  const float* cur_k = nullptr;
  const float* cur_v = nullptr;

  std::size_t heads = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim = 0;

  float* out = nullptr;  // [rows x heads x head_dim]
};

namespace reference {

void rmsnorm(const float* x, const float* gain, float* y, std::size_t rows, std::size_t dim,
             const std::uint8_t* valid);
void linear(const float* x, const float* w, float* y, std::size_t rows, std::size_t in,
            std::size_t out, const std::uint8_t* valid);
void add_inplace(float* x, const float* delta, std::size_t rows, std::size_t dim,
                 const std::uint8_t* valid);
void gelu_inplace(float* x, std::size_t rows, std::size_t dim, const std::uint8_t* valid);
// x is [rows x heads x head_dim]; pairs (c, c + head_dim/2) are rotated.
void rope_inplace(float* x, std::size_t rows, std::size_t heads, std::size_t head_dim,
                  const std::size_t* positions, const float* cos_table, const float* sin_table,
                  const std::uint8_t* valid);
void attention(const AttentionArgs& args);

}  // namespace reference

namespace omp {

void rmsnorm(const float* x, const float* gain, float* y, std::size_t rows, std::size_t dim,
             const std::uint8_t* valid, int threads);
void linear(const float* x, const float* w, float* y, std::size_t rows, std::size_t in,
            std::size_t out, const std::uint8_t* valid, int threads);
void add_inplace(float* x, const float* delta, std::size_t rows, std::size_t dim,
                 const std::uint8_t* valid, int threads);
void gelu_inplace(float* x, std::size_t rows, std::size_t dim, const std::uint8_t* valid,
                  int threads);
void rope_inplace(float* x, std::size_t rows, std::size_t heads, std::size_t head_dim,
                  const std::size_t* positions, const float* cos_table, const float* sin_table,
                  const std::uint8_t* valid, int threads);
void attention(const AttentionArgs& args, int threads);

}  // namespace omp

}  // namespace hyperrag::kernels
