#pragma once

#include "dal/tensor.hpp"

#include <random>
#include <span>

namespace dal {

// Additive mask value for attention scores. Softmax treats anything at or
// below kMaskThreshold as an exact zero.
inline constexpr double kMaskSentinel = -1e30;
inline constexpr double kMaskThreshold = -1e29;

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
// Broadcasts a 1xc row over every row of a.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor mul_row(const Tensor& a, const Tensor& row);

Tensor gelu(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// out[r, :] = table[indices[r], :]; backward scatter-adds into table.
Tensor gather_rows(const Tensor& table, std::span<const Index> indices);
// out[i, j] = x[i, indices(i, j)].
Tensor gather_along_rows(const Tensor& x, const IndexMatrix& indices);
// out[r] = x[rows[r], cols[r]] as a column vector.
Tensor pick(const Tensor& x, std::span<const Index> rows, std::span<const Index> cols);

Tensor col_slice(const Tensor& x, Index start, Index count);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor reshape(const Tensor& x, Index rows, Index cols);
// Row-wise inner products of two same-shape matrices, as a column vector.
Tensor rowwise_dot(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Inverted dropout: survivors are scaled by 1/(1-p). Identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace dal
