// Parameterized layers built from the differentiable ops.
#pragma once

#include "ecglp/ops.hpp"

#include <map>
#include <string>
#include <vector>

namespace ecglp {

/// Named parameter registry. Layers register their tensors here at
/// construction; the optimizer and checkpoints walk it in insertion order.
template <typename S>
class ParameterSet {
 public:
  Tensor<S> add(const std::string& name, Matrix<S> value);
  const std::vector<Tensor<S>>& tensors() const { return params_; }
  std::vector<Tensor<S>>& tensors() { return params_; }
  /// nullptr when absent.
  const Tensor<S>* find(const std::string& name) const;
  Tensor<S>& at(const std::string& name);
  Index scalar_count() const;
  void zero_grad();

 private:
  std::vector<Tensor<S>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Initial values are drawn in double and cast, so float and double models
/// built from the same seed hold the same weights up to rounding.
template <typename S>
Matrix<S> uniform_init(Index rows, Index cols, double bound, Rng& rng);
template <typename S>
Matrix<S> normal_init(Index rows, Index cols, double stddev, Rng& rng);

/// Training-mode switch for dropout. `rng` may be null when `training` is false.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
  double dropout = 0.0;

  static ForwardMode eval() { return {}; }
};

template <typename S>
Tensor<S> maybe_dropout(const Tensor<S>& x, const ForwardMode& mode);

template <typename S>
struct Linear {
  Tensor<S> weight;  // in x out
  Tensor<S> bias;    // 1 x out

  Linear() = default;
  Linear(ParameterSet<S>& ps, const std::string& name, int in, int out, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

template <typename S>
struct LayerNorm {
  Tensor<S> gain;
  Tensor<S> bias;

  LayerNorm() = default;
  LayerNorm(ParameterSet<S>& ps, const std::string& name, int dim);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

/// Linear -> GELU -> Linear.
template <typename S>
struct Mlp {
  Linear<S> fc1;
  Linear<S> fc2;

  Mlp() = default;
  Mlp(ParameterSet<S>& ps, const std::string& name, int in, int hidden, int out, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

template <typename S>
struct MultiHeadAttention {
  Linear<S> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterSet<S>& ps, const std::string& name, int dim, int heads, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& query, const Tensor<S>& memory, bool causal,
                       std::vector<Matrix<S>>* weights_out = nullptr) const;
};

/// Pre-norm block: x + SelfAttn(LN x) [+ CrossAttn(LN x, memory)] + Mlp(LN x).
template <typename S>
struct TransformerBlock {
  LayerNorm<S> ln_self;
  MultiHeadAttention<S> self_attn;
  bool has_cross = false;
  LayerNorm<S> ln_cross;
  MultiHeadAttention<S> cross_attn;
  LayerNorm<S> ln_mlp;
  Mlp<S> mlp;
  bool causal = false;

  TransformerBlock() = default;
  TransformerBlock(ParameterSet<S>& ps, const std::string& name, int dim, int heads, int mlp_ratio, bool causal,
                   bool cross, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, const Tensor<S>* memory, const ForwardMode& mode,
                       std::vector<Matrix<S>>* weights_out = nullptr) const;
};

/// Learnable queries cross-attending to a sequence, followed by layer norm.
template <typename S>
struct AttentionPooler {
  Tensor<S> queries;  // K x D
  MultiHeadAttention<S> attn;
  LayerNorm<S> norm;

  AttentionPooler() = default;
  AttentionPooler(ParameterSet<S>& ps, const std::string& name, int count, int dim, int heads, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& seq, std::vector<Matrix<S>>* weights_out = nullptr) const;
};

/// conv1d -> dropout -> group norm -> GELU. Padding keeps T_out = floor(T / stride).
template <typename S>
struct ConvBlock {
  Tensor<S> weight;  // C_out x (C_in * K)
  Tensor<S> bias;
  LayerNorm<S> norm;  // gain/bias of the group norm
  int stride = 1;
  int kernel = 1;
  int groups = 1;

  ConvBlock() = default;
  ConvBlock(ParameterSet<S>& ps, const std::string& name, int in, int out, int kernel, int stride, int groups,
            Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x, const ForwardMode& mode) const;
};

/// Residual convolutional position encoding: x + GELU(conv_same(x)).
template <typename S>
struct ConvPositional {
  Tensor<S> weight;
  Tensor<S> bias;
  int kernel = 1;

  ConvPositional() = default;
  ConvPositional(ParameterSet<S>& ps, const std::string& name, int dim, int kernel, Rng& rng);
  Tensor<S> operator()(const Tensor<S>& x) const;
};

}  // namespace ecglp
