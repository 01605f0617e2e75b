#include "ecglp/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace ecglp {

namespace {

std::string shape_str(Index r, Index c) { return std::to_string(r) + "x" + std::to_string(c); }

template <typename S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}

template <typename S>
void require_scalar(const char* op, const Tensor<S>& s) {
  if (s.size() != 1) throw ShapeError(std::string(op) + ": expected a 1x1 tensor");
}

template <typename S>
void require_finite(const char* op, const Tensor<S>& a) {
  if (!a.value().allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

void require_axis(const char* op, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError(std::string(op) + ": axis must be 0 or 1");
}

template <typename N>
bool wants(const N& parent) {
  return parent->requires_grad;
}

// Row-wise stable softmax of a matrix.
template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& x) {
  Matrix<S> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const S m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

template <typename S>
Matrix<S> logsumexp_rows(const Matrix<S>& x) {
  Matrix<S> out(x.rows(), 1);
  for (Index i = 0; i < x.rows(); ++i) {
    const S m = x.row(i).maxCoeff();
    out(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
  }
  return out;
}

}  // namespace

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("add", a, b);
  return make_result<S>("add", a.value() + b.value(), {a, b}, [](auto& self) {
    for (auto& p : self.parents)
      if (wants(p)) p->accumulate(self.grad);
  });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("sub", a, b);
  return make_result<S>("sub", a.value() - b.value(), {a, b}, [](auto& self) {
    if (wants(self.parents[0])) self.parents[0]->accumulate(self.grad);
    if (wants(self.parents[1])) self.parents[1]->accumulate(-self.grad);
  });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  require_same_shape("mul", a, b);
  return make_result<S>("mul", a.value().cwiseProduct(b.value()), {a, b}, [](auto& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (wants(pb)) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, S factor) {
  return make_result<S>("scale", a.value() * factor, {a}, [factor](auto& self) {
    self.parents[0]->accumulate(self.grad * factor);
  });
}

template <typename S>
Tensor<S> add_row(const Tensor<S>& a, const Tensor<S>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) + " row, got " +
                     shape_str(row.rows(), row.cols()));
  }
  Matrix<S> out = a.value();
  out.rowwise() += row.value().row(0);
  return make_result<S>("add_row", std::move(out), {a, row}, [](auto& self) {
    if (wants(self.parents[0])) self.parents[0]->accumulate(self.grad);
    if (wants(self.parents[1])) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, const Tensor<S>& s) {
  require_scalar("mul_scalar", s);
  const S k = s.item();
  return make_result<S>("mul_scalar", a.value() * k, {a, s}, [](auto& self) {
    auto& pa = self.parents[0];
    auto& ps = self.parents[1];
    const S k = ps->value(0, 0);
    if (wants(pa)) pa->accumulate(self.grad * k);
    if (wants(ps)) ps->accumulate(Matrix<S>::Constant(1, 1, self.grad.cwiseProduct(pa->value).sum()));
  });
}

template <typename S>
Tensor<S> div_scalar(const Tensor<S>& a, const Tensor<S>& s) {
  require_scalar("div_scalar", s);
  const S k = s.item();
  if (k == S(0)) throw NumericError("div_scalar: division by zero");
  return make_result<S>("div_scalar", a.value() / k, {a, s}, [](auto& self) {
    auto& pa = self.parents[0];
    auto& ps = self.parents[1];
    const S k = ps->value(0, 0);
    if (wants(pa)) pa->accumulate(self.grad / k);
    if (wants(ps)) {
      ps->accumulate(Matrix<S>::Constant(1, 1, -self.grad.cwiseProduct(pa->value).sum() / (k * k)));
    }
  });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return make_result<S>("exp", a.value().array().exp().matrix(), {a}, [](auto& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(self.value));
  });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  if ((a.value().array() <= S(0)).any()) throw NumericError("log: non-positive input");
  return make_result<S>("log", a.value().array().log().matrix(), {a}, [](auto& self) {
    auto& p = self.parents[0];
    p->accumulate(self.grad.cwiseQuotient(p->value));
  });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  // Exact erf form: x * Phi(x).
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  Matrix<S> out = a.value().unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  return make_result<S>("gelu", std::move(out), {a}, [inv_sqrt2](auto& self) {
    auto& p = self.parents[0];
    const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    Matrix<S> d = p->value.unaryExpr([&](S x) {
      return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
    });
    p->accumulate(self.grad.cwiseProduct(d));
  });
}

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + shape_str(a.rows(), a.cols()) + " * " + shape_str(b.rows(), b.cols()));
  }
  Matrix<S> out = a.value() * b.value();
  return make_result<S>("matmul", std::move(out), {a, b}, [](auto& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->accumulate(self.grad * pb->value.transpose());
    if (wants(pb)) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + shape_str(a.rows(), a.cols()) + " * (" + shape_str(b.rows(), b.cols()) +
                     ")^T");
  }
  Matrix<S> out = a.value() * b.value().transpose();
  return make_result<S>("matmul_nt", std::move(out), {a, b}, [](auto& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (wants(pa)) pa->accumulate(self.grad * pb->value);
    if (wants(pb)) pb->accumulate(self.grad.transpose() * pa->value);
  });
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  Matrix<S> out = a.value().transpose();
  return make_result<S>("transpose", std::move(out), {a}, [](auto& self) {
    self.parents[0]->accumulate(self.grad.transpose());
  });
}

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  return make_result<S>("sum", Matrix<S>::Constant(1, 1, a.value().sum()), {a}, [](auto& self) {
    auto& p = self.parents[0];
    p->accumulate(Matrix<S>::Constant(p->value.rows(), p->value.cols(), self.grad(0, 0)));
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  const S n = static_cast<S>(a.size());
  return make_result<S>("mean", Matrix<S>::Constant(1, 1, a.value().sum() / n), {a}, [n](auto& self) {
    auto& p = self.parents[0];
    p->accumulate(Matrix<S>::Constant(p->value.rows(), p->value.cols(), self.grad(0, 0) / n));
  });
}

template <typename S>
Tensor<S> mean_rows(const Tensor<S>& a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: no rows");
  const S n = static_cast<S>(a.rows());
  // Sequential row accumulation, then one division: the documented reduction order.
  Matrix<S> acc = Matrix<S>::Zero(1, a.cols());
  for (Index i = 0; i < a.rows(); ++i) acc += a.value().row(i);
  acc /= n;
  return make_result<S>("mean_rows", std::move(acc), {a}, [n](auto& self) {
    auto& p = self.parents[0];
    Matrix<S> g(p->value.rows(), p->value.cols());
    g.rowwise() = self.grad.row(0) / n;
    p->accumulate(g);
  });
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  require_axis("softmax", axis);
  require_finite("softmax", a);
  if (a.size() == 0) throw ShapeError("softmax: empty tensor");
  Matrix<S> out = axis == 1 ? softmax_rows<S>(a.value()) : Matrix<S>(softmax_rows<S>(a.value().transpose()).transpose());
  return make_result<S>("softmax", std::move(out), {a}, [axis](auto& self) {
    const Matrix<S>& y = self.value;
    const Matrix<S>& g = self.grad;
    Matrix<S> d;
    if (axis == 1) {
      Matrix<S> dots = g.cwiseProduct(y).rowwise().sum();
      d = y.cwiseProduct(g - dots.replicate(1, y.cols()));
    } else {
      Matrix<S> dots = g.cwiseProduct(y).colwise().sum();
      d = y.cwiseProduct(g - dots.replicate(y.rows(), 1));
    }
    self.parents[0]->accumulate(d);
  });
}

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a, int axis) {
  require_axis("log_softmax", axis);
  require_finite("log_softmax", a);
  if (a.size() == 0) throw ShapeError("log_softmax: empty tensor");
  Matrix<S> out;
  if (axis == 1) {
    out = a.value() - logsumexp_rows<S>(a.value()).replicate(1, a.cols());
  } else {
    Matrix<S> t = a.value().transpose();
    out = (t - logsumexp_rows<S>(t).replicate(1, t.cols())).transpose();
  }
  return make_result<S>("log_softmax", std::move(out), {a}, [axis](auto& self) {
    Matrix<S> p = self.value.array().exp().matrix();
    Matrix<S> d;
    if (axis == 1) {
      d = self.grad - p.cwiseProduct(self.grad.rowwise().sum().replicate(1, p.cols()));
    } else {
      d = self.grad - p.cwiseProduct(self.grad.colwise().sum().replicate(p.rows(), 1));
    }
    self.parents[0]->accumulate(d);
  });
}

template <typename S>
Tensor<S> logsumexp(const Tensor<S>& a, int axis) {
  require_axis("logsumexp", axis);
  require_finite("logsumexp", a);
  if ((axis == 1 && a.cols() == 0) || (axis == 0 && a.rows() == 0) || a.size() == 0) {
    throw ShapeError("logsumexp: empty axis");
  }
  Matrix<S> out = axis == 1 ? logsumexp_rows<S>(a.value()) : Matrix<S>(logsumexp_rows<S>(a.value().transpose()).transpose());
  return make_result<S>("logsumexp", std::move(out), {a}, [axis](auto& self) {
    auto& p = self.parents[0];
    const Matrix<S>& x = p->value;
    Matrix<S> d(x.rows(), x.cols());
    if (axis == 1) {
      for (Index i = 0; i < x.rows(); ++i) {
        d.row(i) = (x.row(i).array() - self.value(i, 0)).exp() * self.grad(i, 0);
      }
    } else {
      for (Index j = 0; j < x.cols(); ++j) {
        d.col(j) = (x.col(j).array() - self.value(0, j)).exp() * self.grad(0, j);
      }
    }
    p->accumulate(d);
  });
}

template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  const Index n = x.rows(), c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(c));
  }
  Matrix<S> xhat(n, c);
  Matrix<S> inv_std(n, 1);
  for (Index i = 0; i < n; ++i) {
    const S mu = x.value().row(i).mean();
    const S var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i, 0) = S(1) / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i, 0);
  }
  Matrix<S> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_result<S>("layer_norm", std::move(out), {x, gain, bias},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std)](auto& self) {
                          auto& px = self.parents[0];
                          auto& pg = self.parents[1];
                          auto& pb = self.parents[2];
                          const Matrix<S>& g = self.grad;
                          if (wants(pg)) pg->accumulate(g.cwiseProduct(xhat).colwise().sum());
                          if (wants(pb)) pb->accumulate(g.colwise().sum());
                          if (wants(px)) {
                            const Index c = xhat.cols();
                            Matrix<S> dxhat = g.array().rowwise() * pg->value.row(0).array();
                            Matrix<S> dx(xhat.rows(), c);
                            for (Index i = 0; i < xhat.rows(); ++i) {
                              const S s1 = dxhat.row(i).sum();
                              const S s2 = dxhat.row(i).dot(xhat.row(i));
                              dx.row(i) = (inv_std(i, 0) / S(c)) *
                                          (S(c) * dxhat.row(i).array() - s1 - xhat.row(i).array() * s2);
                            }
                            px->accumulate(dx);
                          }
                        });
}

template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gain, const Tensor<S>& bias, S eps) {
  const Index t = x.rows(), c = x.cols();
  if (groups < 1 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw ShapeError("group_norm: gain/bias must be 1x" + std::to_string(c));
  }
  const Index width = c / groups;
  Matrix<S> xhat(t, c);
  std::vector<S> inv_std(groups);
  for (int g = 0; g < groups; ++g) {
    auto block = x.value().middleCols(g * width, width);
    const S mu = block.mean();
    const S var = (block.array() - mu).square().mean();
    inv_std[g] = S(1) / std::sqrt(var + eps);
    xhat.middleCols(g * width, width) = (block.array() - mu) * inv_std[g];
  }
  Matrix<S> out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_result<S>("group_norm", std::move(out), {x, gain, bias},
                        [xhat = std::move(xhat), inv_std = std::move(inv_std), width](auto& self) {
                          auto& px = self.parents[0];
                          auto& pg = self.parents[1];
                          auto& pb = self.parents[2];
                          const Matrix<S>& g = self.grad;
                          if (wants(pg)) pg->accumulate(g.cwiseProduct(xhat).colwise().sum());
                          if (wants(pb)) pb->accumulate(g.colwise().sum());
                          if (wants(px)) {
                            Matrix<S> dxhat = g.array().rowwise() * pg->value.row(0).array();
                            Matrix<S> dx(xhat.rows(), xhat.cols());
                            const S n = S(xhat.rows() * width);
                            for (std::size_t k = 0; k < inv_std.size(); ++k) {
                              const Index off = static_cast<Index>(k) * width;
                              auto dh = dxhat.middleCols(off, width);
                              auto xh = xhat.middleCols(off, width);
                              const S s1 = dh.sum();
                              const S s2 = dh.cwiseProduct(xh).sum();
                              dx.middleCols(off, width) = (inv_std[k] / n) * (n * dh.array() - s1 - xh.array() * s2);
                            }
                            px->accumulate(dx);
                          }
                        });
}

template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias, int stride, int pad_left,
                 int pad_right) {
  const Index t = x.rows(), cin = x.cols(), cout = weight.rows();
  if (stride < 1 || pad_left < 0 || pad_right < 0) throw ShapeError("conv1d: invalid stride/padding");
  if (weight.cols() % cin != 0) throw ShapeError("conv1d: weight columns not a multiple of input channels");
  const Index k = weight.cols() / cin;
  if (bias.rows() != 1 || bias.cols() != cout) throw ShapeError("conv1d: bias must be 1xC_out");
  const Index padded = t + pad_left + pad_right;
  if (padded < k) throw ShapeError("conv1d: input shorter than kernel");
  const Index tout = (padded - k) / stride + 1;

  // im2col: row r holds the receptive field of output step r, laid out [c * K + j].
  Matrix<S> cols = Matrix<S>::Zero(tout, cin * k);
  for (Index r = 0; r < tout; ++r) {
    const Index start = r * stride - pad_left;
    for (Index j = 0; j < k; ++j) {
      const Index src = start + j;
      if (src < 0 || src >= t) continue;
      for (Index c = 0; c < cin; ++c) cols(r, c * k + j) = x.value()(src, c);
    }
  }
  Matrix<S> out = cols * weight.value().transpose();
  out.rowwise() += bias.value().row(0);
  return make_result<S>("conv1d", std::move(out), {x, weight, bias},
                        [cols = std::move(cols), stride, pad_left, k, t, cin](auto& self) {
                          auto& px = self.parents[0];
                          auto& pw = self.parents[1];
                          auto& pb = self.parents[2];
                          const Matrix<S>& g = self.grad;
                          if (wants(pw)) pw->accumulate(g.transpose() * cols);
                          if (wants(pb)) pb->accumulate(g.colwise().sum());
                          if (wants(px)) {
                            Matrix<S> dcols = g * pw->value;
                            Matrix<S> dx = Matrix<S>::Zero(t, cin);
                            for (Index r = 0; r < dcols.rows(); ++r) {
                              const Index start = r * stride - pad_left;
                              for (Index j = 0; j < k; ++j) {
                                const Index src = start + j;
                                if (src < 0 || src >= t) continue;
                                for (Index c = 0; c < cin; ++c) dx(src, c) += dcols(r, c * k + j);
                              }
                            }
                            px->accumulate(dx);
                          }
                        });
}

template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
  const Index n = static_cast<Index>(ids.size());
  Matrix<S> out(n, table.cols());
  std::vector<int> idx(ids.begin(), ids.end());
  for (Index i = 0; i < n; ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) {
      throw ShapeError("embedding: id " + std::to_string(idx[i]) + " out of range");
    }
    out.row(i) = table.value().row(idx[i]);
  }
  return make_result<S>("embedding", std::move(out), {table}, [idx = std::move(idx)](auto& self) {
    auto& p = self.parents[0];
    if (p->grad.size() == 0) p->grad = Matrix<S>::Zero(p->value.rows(), p->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) p->grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

template <typename S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const int> targets, Reduction reduction) {
  if (static_cast<Index>(targets.size()) != logits.rows()) throw ShapeError("cross_entropy: target count mismatch");
  require_finite("cross_entropy", logits);
  std::vector<int> tgt(targets.begin(), targets.end());
  Index count = 0;
  for (int y : tgt) {
    if (y >= logits.cols()) throw ShapeError("cross_entropy: target out of range");
    if (y >= 0) ++count;
  }
  if (count == 0) throw ShapeError("cross_entropy: every position is masked");
  Matrix<S> lse = logsumexp_rows<S>(logits.value());
  S total = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    if (tgt[i] >= 0) total += lse(i, 0) - logits.value()(i, tgt[i]);
  }
  const S denom = reduction == Reduction::kMean ? S(count) : S(1);
  return make_result<S>("cross_entropy", Matrix<S>::Constant(1, 1, total / denom), {logits},
                        [tgt = std::move(tgt), lse = std::move(lse), denom](auto& self) {
                          auto& p = self.parents[0];
                          const Matrix<S>& z = p->value;
                          Matrix<S> d = Matrix<S>::Zero(z.rows(), z.cols());
                          const S g = self.grad(0, 0) / denom;
                          for (Index i = 0; i < z.rows(); ++i) {
                            if (tgt[i] < 0) continue;
                            d.row(i) = (z.row(i).array() - lse(i, 0)).exp() * g;
                            d(i, tgt[i]) -= g;
                          }
                          p->accumulate(d);
                        });
}

template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, int heads, bool causal,
                    std::vector<Matrix<S>>* weights_out) {
  const Index lq = q.rows(), lk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != lk) throw ShapeError("attention: q/k/v shape mismatch");
  if (heads < 1 || d % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  if (lk == 0) throw ShapeError("attention: no keys");
  const Index dh = d / heads;
  const S inv_scale = S(1) / std::sqrt(S(dh));
  std::vector<Matrix<S>> probs(heads);
  Matrix<S> out(lq, d);
  for (int h = 0; h < heads; ++h) {
    Matrix<S> scores = (q.value().middleCols(h * dh, dh) * k.value().middleCols(h * dh, dh).transpose()) * inv_scale;
    if (causal) {
      for (Index i = 0; i < lq; ++i) {
        const S m = scores.row(i).head(std::min(i + 1, lk)).maxCoeff();
        for (Index j = 0; j < lk; ++j) scores(i, j) = j <= i ? std::exp(scores(i, j) - m) : S(0);
        scores.row(i) /= scores.row(i).sum();
      }
      probs[h] = std::move(scores);
    } else {
      probs[h] = softmax_rows<S>(scores);
    }
    out.middleCols(h * dh, dh) = probs[h] * v.value().middleCols(h * dh, dh);
  }
  if (weights_out) *weights_out = probs;
  return make_result<S>("attention", std::move(out), {q, k, v},
                        [probs = std::move(probs), dh, inv_scale](auto& self) {
                          auto& pq = self.parents[0];
                          auto& pk = self.parents[1];
                          auto& pv = self.parents[2];
                          Matrix<S> dq = Matrix<S>::Zero(pq->value.rows(), pq->value.cols());
                          Matrix<S> dk = Matrix<S>::Zero(pk->value.rows(), pk->value.cols());
                          Matrix<S> dv = Matrix<S>::Zero(pv->value.rows(), pv->value.cols());
                          for (std::size_t h = 0; h < probs.size(); ++h) {
                            const Index off = static_cast<Index>(h) * dh;
                            const Matrix<S>& p = probs[h];
                            Matrix<S> dout = self.grad.middleCols(off, dh);
                            dv.middleCols(off, dh) = p.transpose() * dout;
                            Matrix<S> dp = dout * pv->value.middleCols(off, dh).transpose();
                            Matrix<S> dots = dp.cwiseProduct(p).rowwise().sum();
                            Matrix<S> ds = p.cwiseProduct(dp - dots.replicate(1, p.cols())) * inv_scale;
                            dq.middleCols(off, dh) = ds * pk->value.middleCols(off, dh);
                            dk.middleCols(off, dh) = ds.transpose() * pq->value.middleCols(off, dh);
                          }
                          if (wants(pq)) pq->accumulate(dq);
                          if (wants(pk)) pk->accumulate(dk);
                          if (wants(pv)) pv->accumulate(dv);
                        });
}

template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  Matrix<S> out = a.value().middleRows(begin, count);
  return make_result<S>("slice_rows", std::move(out), {a}, [begin, count](auto& self) {
    auto& p = self.parents[0];
    if (p->grad.size() == 0) p->grad = Matrix<S>::Zero(p->value.rows(), p->value.cols());
    p->grad.middleRows(begin, count) += self.grad;
  });
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix<S> out(rows, parts[0].cols());
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return make_result<S>("concat_rows", std::move(out), parts, [](auto& self) {
    Index off = 0;
    for (auto& p : self.parents) {
      const Index r = p->value.rows();
      if (wants(p)) p->accumulate(self.grad.middleRows(off, r));
      off += r;
    }
  });
}

template <typename S>
Tensor<S> stack_scalars(const std::vector<Tensor<S>>& scalars, Index rows, Index cols) {
  if (static_cast<Index>(scalars.size()) != rows * cols) throw ShapeError("stack_scalars: count mismatch");
  Matrix<S> out(rows, cols);
  for (Index i = 0; i < rows * cols; ++i) {
    require_scalar("stack_scalars", scalars[i]);
    out(i / cols, i % cols) = scalars[i].item();
  }
  return make_result<S>("stack_scalars", std::move(out), scalars, [cols](auto& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      auto& p = self.parents[i];
      const Index r = static_cast<Index>(i) / cols, c = static_cast<Index>(i) % cols;
      if (wants(p)) p->accumulate(Matrix<S>::Constant(1, 1, self.grad(r, c)));
    }
  });
}

template <typename S>
Tensor<S> normalize_rows(const Tensor<S>& a) {
  Matrix<S> norms = a.value().rowwise().norm();
  for (Index i = 0; i < norms.rows(); ++i) {
    if (!(norms(i, 0) > S(kNormFloor))) {
      throw NumericError("normalize_rows: row " + std::to_string(i) + " has norm below 1e-8");
    }
  }
  Matrix<S> out = a.value().array().colwise() / norms.col(0).array();
  return make_result<S>("normalize_rows", std::move(out), {a}, [norms = std::move(norms)](auto& self) {
    const Matrix<S>& y = self.value;
    Matrix<S> dots = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix<S> d = (self.grad - y.cwiseProduct(dots.replicate(1, y.cols()))).array().colwise() / norms.col(0).array();
    self.parents[0]->accumulate(d);
  });
}

template <typename S>
Tensor<S> cosine_similarity(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != b.cols()) {
    throw ShapeError("cosine_similarity: expects two 1xD vectors");
  }
  return cosine_matrix(a, b);
}

template <typename S>
Tensor<S> cosine_matrix(const Tensor<S>& a, const Tensor<S>& b) {
  return matmul_nt(normalize_rows(a), normalize_rows(b));
}

template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ShapeError("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  const S keep_scale = S(1.0 / (1.0 - p));
  Matrix<S> mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.bernoulli(p) ? S(0) : keep_scale;
  Matrix<S> out = x.value().cwiseProduct(mask);
  return make_result<S>("dropout", std::move(out), {x}, [mask = std::move(mask)](auto& self) {
    self.parents[0]->accumulate(self.grad.cwiseProduct(mask));
  });
}

#define ECGLP_INSTANTIATE_OPS(S)                                                                              \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                                 \
  template Tensor<S> scale(const Tensor<S>&, S);                                                              \
  template Tensor<S> add_row(const Tensor<S>&, const Tensor<S>&);                                             \
  template Tensor<S> mul_scalar(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> div_scalar(const Tensor<S>&, const Tensor<S>&);                                          \
  template Tensor<S> exp(const Tensor<S>&);                                                                   \
  template Tensor<S> log(const Tensor<S>&);                                                                   \
  template Tensor<S> gelu(const Tensor<S>&);                                                                  \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                              \
  template Tensor<S> matmul_nt(const Tensor<S>&, const Tensor<S>&);                                           \
  template Tensor<S> transpose(const Tensor<S>&);                                                             \
  template Tensor<S> sum(const Tensor<S>&);                                                                   \
  template Tensor<S> mean(const Tensor<S>&);                                                                  \
  template Tensor<S> mean_rows(const Tensor<S>&);                                                             \
  template Tensor<S> softmax(const Tensor<S>&, int);                                                          \
  template Tensor<S> log_softmax(const Tensor<S>&, int);                                                      \
  template Tensor<S> logsumexp(const Tensor<S>&, int);                                                        \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                     \
  template Tensor<S> group_norm(const Tensor<S>&, int, const Tensor<S>&, const Tensor<S>&, S);                \
  template Tensor<S> conv1d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, int, int);             \
  template Tensor<S> embedding(const Tensor<S>&, std::span<const int>);                                       \
  template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const int>, Reduction);                        \
  template Tensor<S> attention(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, int, bool,               \
                               std::vector<Matrix<S>>*);                                                      \
  template Tensor<S> slice_rows(const Tensor<S>&, Index, Index);                                              \
  template Tensor<S> concat_rows(const std::vector<Tensor<S>>&);                                              \
  template Tensor<S> stack_scalars(const std::vector<Tensor<S>>&, Index, Index);                              \
  template Tensor<S> normalize_rows(const Tensor<S>&);                                                        \
  template Tensor<S> cosine_similarity(const Tensor<S>&, const Tensor<S>&);                                   \
  template Tensor<S> cosine_matrix(const Tensor<S>&, const Tensor<S>&);                                       \
  template Tensor<S> dropout(const Tensor<S>&, double, Rng&);

ECGLP_INSTANTIATE_OPS(float)
ECGLP_INSTANTIATE_OPS(double)

#undef ECGLP_INSTANTIATE_OPS

}  // namespace ecglp
