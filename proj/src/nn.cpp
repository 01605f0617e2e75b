#include "ecglp/nn.hpp"

#include <cmath>

namespace ecglp {

template <typename S>
Tensor<S> ParameterSet<S>::add(const std::string& name, Matrix<S> value) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  auto t = Tensor<S>::parameter(std::move(value), name);
  index_.emplace(name, params_.size());
  params_.push_back(t);
  return t;
}

template <typename S>
const Tensor<S>* ParameterSet<S>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

template <typename S>
Tensor<S>& ParameterSet<S>::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

template <typename S>
Index ParameterSet<S>::scalar_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename S>
void ParameterSet<S>::zero_grad() {
  for (auto& p : params_) p.clear_grad();
}

template <typename S>
Matrix<S> uniform_init(Index rows, Index cols, double bound, Rng& rng) {
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  return m;
}

template <typename S>
Matrix<S> normal_init(Index rows, Index cols, double stddev, Rng& rng) {
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(stddev * rng.normal());
  return m;
}

template <typename S>
Tensor<S> maybe_dropout(const Tensor<S>& x, const ForwardMode& mode) {
  if (!mode.training || mode.dropout <= 0.0) return x;
  if (mode.rng == nullptr) throw std::invalid_argument("training-mode dropout needs an rng");
  return dropout(x, mode.dropout, *mode.rng);
}

template <typename S>
Linear<S>::Linear(ParameterSet<S>& ps, const std::string& name, int in, int out, Rng& rng) {
  weight = ps.add(name + ".weight", uniform_init<S>(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  bias = ps.add(name + ".bias", Matrix<S>::Zero(1, out));
}

template <typename S>
Tensor<S> Linear<S>::operator()(const Tensor<S>& x) const {
  return add_row(matmul(x, weight), bias);
}

template <typename S>
LayerNorm<S>::LayerNorm(ParameterSet<S>& ps, const std::string& name, int dim) {
  gain = ps.add(name + ".gain", Matrix<S>::Ones(1, dim));
  bias = ps.add(name + ".bias", Matrix<S>::Zero(1, dim));
}

template <typename S>
Tensor<S> LayerNorm<S>::operator()(const Tensor<S>& x) const {
  return layer_norm(x, gain, bias);
}

template <typename S>
Mlp<S>::Mlp(ParameterSet<S>& ps, const std::string& name, int in, int hidden, int out, Rng& rng)
    : fc1(ps, name + ".fc1", in, hidden, rng), fc2(ps, name + ".fc2", hidden, out, rng) {}

template <typename S>
Tensor<S> Mlp<S>::operator()(const Tensor<S>& x) const {
  return fc2(gelu(fc1(x)));
}

template <typename S>
MultiHeadAttention<S>::MultiHeadAttention(ParameterSet<S>& ps, const std::string& name, int dim, int h, Rng& rng)
    : q(ps, name + ".q", dim, dim, rng),
      k(ps, name + ".k", dim, dim, rng),
      v(ps, name + ".v", dim, dim, rng),
      o(ps, name + ".o", dim, dim, rng),
      heads(h) {}

template <typename S>
Tensor<S> MultiHeadAttention<S>::operator()(const Tensor<S>& query, const Tensor<S>& memory, bool causal,
                                            std::vector<Matrix<S>>* weights_out) const {
  return o(attention(q(query), k(memory), v(memory), heads, causal, weights_out));
}

template <typename S>
TransformerBlock<S>::TransformerBlock(ParameterSet<S>& ps, const std::string& name, int dim, int heads,
                                      int mlp_ratio, bool is_causal, bool cross, Rng& rng)
    : ln_self(ps, name + ".ln_self", dim),
      self_attn(ps, name + ".self_attn", dim, heads, rng),
      has_cross(cross),
      ln_mlp(),
      causal(is_causal) {
  if (cross) {
    ln_cross = LayerNorm<S>(ps, name + ".ln_cross", dim);
    cross_attn = MultiHeadAttention<S>(ps, name + ".cross_attn", dim, heads, rng);
  }
  ln_mlp = LayerNorm<S>(ps, name + ".ln_mlp", dim);
  mlp = Mlp<S>(ps, name + ".mlp", dim, dim * mlp_ratio, dim, rng);
}

template <typename S>
Tensor<S> TransformerBlock<S>::operator()(const Tensor<S>& x, const Tensor<S>* memory, const ForwardMode& mode,
                                          std::vector<Matrix<S>>* weights_out) const {
  auto h = ln_self(x);
  auto y = x + maybe_dropout(self_attn(h, h, causal, weights_out), mode);
  if (has_cross) {
    if (memory == nullptr) throw ShapeError("cross-attention block called without memory");
    y = y + maybe_dropout(cross_attn(ln_cross(y), *memory, false, weights_out), mode);
  }
  return y + maybe_dropout(mlp(ln_mlp(y)), mode);
}

template <typename S>
AttentionPooler<S>::AttentionPooler(ParameterSet<S>& ps, const std::string& name, int count, int dim, int heads,
                                    Rng& rng) {
  queries = ps.add(name + ".queries", normal_init<S>(count, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng));
  attn = MultiHeadAttention<S>(ps, name + ".attn", dim, heads, rng);
  norm = LayerNorm<S>(ps, name + ".norm", dim);
}

template <typename S>
Tensor<S> AttentionPooler<S>::operator()(const Tensor<S>& seq, std::vector<Matrix<S>>* weights_out) const {
  return norm(attn(queries, seq, false, weights_out));
}

template <typename S>
ConvBlock<S>::ConvBlock(ParameterSet<S>& ps, const std::string& name, int in, int out, int k, int s, int g,
                        Rng& rng)
    : stride(s), kernel(k), groups(g) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * k));
  weight = ps.add(name + ".weight", uniform_init<S>(out, in * k, bound, rng));
  bias = ps.add(name + ".bias", Matrix<S>::Zero(1, out));
  norm = LayerNorm<S>(ps, name + ".norm", out);
}

template <typename S>
Tensor<S> ConvBlock<S>::operator()(const Tensor<S>& x, const ForwardMode& mode) const {
  const int left = (kernel - stride) / 2;
  const int right = kernel - stride - left;
  auto y = maybe_dropout(conv1d(x, weight, bias, stride, left, right), mode);
  return gelu(group_norm(y, groups, norm.gain, norm.bias));
}

template <typename S>
ConvPositional<S>::ConvPositional(ParameterSet<S>& ps, const std::string& name, int dim, int k, Rng& rng)
    : kernel(k) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim * k));
  weight = ps.add(name + ".weight", uniform_init<S>(dim, dim * k, bound, rng));
  bias = ps.add(name + ".bias", Matrix<S>::Zero(1, dim));
}

template <typename S>
Tensor<S> ConvPositional<S>::operator()(const Tensor<S>& x) const {
  return x + gelu(conv1d(x, weight, bias, 1, kernel / 2));
}

#define ECGLP_INSTANTIATE_NN(S)                                                              \
  template class ParameterSet<S>;                                                            \
  template Matrix<S> uniform_init<S>(Index, Index, double, Rng&);                            \
  template Matrix<S> normal_init<S>(Index, Index, double, Rng&);                             \
  template Tensor<S> maybe_dropout<S>(const Tensor<S>&, const ForwardMode&);                 \
  template struct Linear<S>;                                                                 \
  template struct LayerNorm<S>;                                                              \
  template struct Mlp<S>;                                                                    \
  template struct MultiHeadAttention<S>;                                                     \
  template struct TransformerBlock<S>;                                                       \
  template struct AttentionPooler<S>;                                                        \
  template struct ConvBlock<S>;                                                              \
  template struct ConvPositional<S>;

ECGLP_INSTANTIATE_NN(float)
ECGLP_INSTANTIATE_NN(double)

}  // namespace ecglp
