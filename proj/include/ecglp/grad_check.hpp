// Central-difference verification of analytic gradients (64-bit only).
#pragma once

#include "ecglp/rng.hpp"
#include "ecglp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace ecglp {

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per parameter; parameters at or below this size are checked exhaustively.
  Index max_coords_per_param = 24;
  std::uint64_t seed = 0;
};

/// Max over sampled coordinates of |analytic - numeric| / max(1, |numeric|).
///
/// `loss_fn` must rebuild the graph from the current parameter values on
/// every call. It is evaluated twice up front; differing results mean the
/// function is not deterministic and the check is meaningless.
template <typename LossFn>
double grad_check(LossFn&& loss_fn, const std::vector<Tensor<double>>& params, const GradCheckOptions& opts = {}) {
  if (opts.step < 1e-6 || opts.step > 1e-4) throw ShapeError("grad_check: step must lie in [1e-6, 1e-4]");

  const double first = loss_fn().item();
  Tensor<double> loss = loss_fn();
  if (loss.item() != first) throw NumericError("grad_check: loss function is not deterministic");

  for (auto p : params) p.clear_grad();
  backward(loss);
  const auto analytic = gradients(params);

  Rng rng(opts.seed);
  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double> p = params[pi];
    const Index n = p.size();
    std::vector<Index> coords(n);
    std::iota(coords.begin(), coords.end(), Index{0});
    if (n > opts.max_coords_per_param) {
      for (Index i = 0; i < opts.max_coords_per_param; ++i) {
        std::swap(coords[i], coords[i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)))]);
      }
      coords.resize(opts.max_coords_per_param);
    }
    for (Index c : coords) {
      double& x = p.mutable_value().data()[c];
      const double saved = x;
      x = saved + opts.step;
      const double up = loss_fn().item();
      x = saved - opts.step;
      const double down = loss_fn().item();
      x = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double err = std::abs(analytic[pi].data()[c] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ecglp
