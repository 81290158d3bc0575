#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "transip/tensor.hpp"

// Differentiable operations. Every backward rule is expressed with these same
// operations so gradients can be taken of gradients.
namespace transip::ops {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double s);
Tensor square(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
/// Gaussian error linear unit, exact erf form: x * Phi(x).
Tensor gelu(const Tensor& x);

/// Matrix product of the last two axes. `a` is (..., m, k) and `b` is either
/// (..., k, n) with identical leading axes or a plain (k, n) matrix shared
/// across the leading axes of `a`. The flags transpose an operand's last two
/// axes before multiplying.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Sums `x` down to `shape`, the inverse of broadcasting.
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor sum_all(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
Tensor mean_all(const Tensor& x);

Tensor concat_last(const std::vector<Tensor>& parts);
Tensor slice_last(const Tensor& x, std::size_t start, std::size_t length);

/// Softmax over the last axis of `logits + mask`, where `mask` holds 0 or
/// -infinity and broadcasts against `logits`. Rows with every entry masked
/// produce zeros and pass no gradient.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask);

/// Normalizes over the last axis, then applies gain and bias. A zero-variance
/// row maps to the bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon = 1e-5);

/// x W + b with W of shape (in, out) and b of shape (out).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Inverted dropout. Identity when `probability` is 0 or `rng` is null.
Tensor dropout(const Tensor& x, double probability, std::mt19937_64* rng);

/// Rows of `table` (V, D) gathered by `indices`; output shape is
/// `index_shape` + (D).
Tensor embedding(const Tensor& table, std::span<const std::int64_t> indices, Shape index_shape);
/// Adjoint of embedding: accumulates rows of `src` into a (rows, D) table.
Tensor scatter_add_rows(const Tensor& src, std::span<const std::int64_t> indices, std::size_t rows);

/// Rotary position encoding over (..., N, D): pair (2k, 2k+1) of row n is
/// rotated by n * base^(-2k/D). `direction` -1 applies the inverse rotation.
Tensor rope(const Tensor& x, double base = 10000.0, int direction = 1);

/// For x of shape (B, N, C) holds rows [0, counts[b]) of each batch entry:
/// y_i = (n x_i - sum_j x_j) / n over valid rows, zero on padded rows.
/// Linear and self-adjoint.
Tensor masked_center(const Tensor& x, std::span<const std::size_t> counts);

}  // namespace transip::ops
