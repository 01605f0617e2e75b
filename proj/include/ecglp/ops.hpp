// Differentiable primitives over Tensor<Scalar>.
//
// All ops are free functions instantiated for float and double. Axis
// convention for reductions: axis 1 reduces across columns (one result per
// row), axis 0 reduces down rows (one result per column).
#pragma once

#include "ecglp/rng.hpp"
#include "ecglp/tensor.hpp"

#include <span>
#include <vector>

namespace ecglp {

enum class Reduction { kMean, kSum };

// Elementwise and broadcasting arithmetic.
template <typename S> Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> scale(const Tensor<S>& a, S factor);
/// a + row, where row is 1 x cols(a) and is broadcast over rows.
template <typename S> Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& row);
/// a * s and a / s for a 1 x 1 tensor s.
template <typename S> Tensor<S> mul_scalar(const Tensor<S>& a, const Tensor<S>& s);
template <typename S> Tensor<S> div_scalar(const Tensor<S>& a, const Tensor<S>& s);
template <typename S> Tensor<S> exp(const Tensor<S>& a);
template <typename S> Tensor<S> log(const Tensor<S>& a);
template <typename S> Tensor<S> gelu(const Tensor<S>& a);

template <typename S> Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S> Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S> Tensor<S> operator*(const Tensor<S>& a, S k) { return scale(a, k); }
template <typename S> Tensor<S> operator*(S k, const Tensor<S>& a) { return scale(a, k); }

// Linear algebra.
template <typename S> Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b);
/// a * b^T without materializing the transpose node.
template <typename S> Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b);
template <typename S> Tensor<S> transpose(const Tensor<S>& a);

// Reductions.
template <typename S> Tensor<S> sum(const Tensor<S>& a);
template <typename S> Tensor<S> mean(const Tensor<S>& a);
/// Column-wise mean over rows: n x d -> 1 x d.
template <typename S> Tensor<S> mean_rows(const Tensor<S>& a);
template <typename S> Tensor<S> softmax(const Tensor<S>& a, int axis);
template <typename S> Tensor<S> log_softmax(const Tensor<S>& a, int axis);
template <typename S> Tensor<S> logsumexp(const Tensor<S>& a, int axis);

// Normalization.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-5));
/// Normalizes each channel group over (time x channels-in-group) for a T x C input.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5));

/// 1-D convolution over a T x C_in sequence. `weight` is C_out x (C_in * K)
/// with layout [c * K + k]; `bias` is 1 x C_out. Output is T_out x C_out with
/// T_out = (T + pad_left + pad_right - K) / stride + 1.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, int stride, int pad_left,
                 int pad_right);
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, int stride, int padding) {
  return conv1d(x, weight, bias, stride, padding, padding);
}

/// Rows of `table` selected by `ids`.
template <typename S> Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids);

/// Token-level negative log-likelihood from logits (n x V). Targets < 0 are
/// ignored; throws if every target is ignored.
template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> targets, Reduction reduction = Reduction::kMean);

/// Multi-head scaled dot-product attention. q is Lq x D, k and v are Lk x D.
/// With `causal`, query i only sees keys j <= i. When `weights_out` is given
/// it receives the per-head attention matrices (heads blocks of Lq x Lk).
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads, bool causal,
                    std::vector<Matrix<S>>* weights_out = nullptr);

// Shape manipulation.
template <typename S> Tensor<S> slice_rows(const Tensor<S>& a, Index begin, Index count);
template <typename S> Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts);
/// Assembles 1 x 1 tensors into a rows x cols matrix (row-major order).
template <typename S> Tensor<S> stack_scalars(const std::vector<Tensor<S>>& scalars, Index rows, Index cols);

// Similarities. Norms below kNormFloor are an error rather than clamped.
inline constexpr double kNormFloor = 1e-8;
template <typename S> Tensor<S> normalize_rows(const Tensor<S>& a);
/// Cosine similarity of two 1 x D vectors, as a 1 x 1 tensor.
template <typename S> Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b);
/// Pairwise cosine similarities of the rows of a (n x D) and b (m x D).
template <typename S> Tensor<S> cosine_matrix(const Tensor<S>& a, const Tensor<S>& b);

/// Inverted dropout; identity when p == 0.
template <typename S> Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng);

}  // namespace ecglp
