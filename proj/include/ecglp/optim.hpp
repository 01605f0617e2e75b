// AdamW with decoupled weight decay and the cosine learning-rate schedule.
#pragma once

#include "ecglp/tensor.hpp"

#include <string>
#include <vector>

namespace ecglp {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// One AdamW update of `param` in place. `step` is 1-based.
/// param <- param * (1 - lr * wd); then param -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename S>
void adamw_update(Matrix<S>& param, const Matrix<S>& grad, Matrix<S>& m, Matrix<S>& v, long step, double lr,
                  double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// Biases, normalization gains/biases and the temperature are not decayed.
bool decays(const std::string& param_name);

template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Tensor<S>> params, const AdamWOptions& opts);

  /// Updates every parameter that holds a gradient; others keep their moments.
  /// Throws NumericError naming the parameter on a non-finite gradient.
  void step(double lr);

  long step_count() const { return step_; }
  void set_step_count(long s) { step_ = s; }
  const std::vector<Tensor<S>>& params() const { return params_; }
  std::vector<Matrix<S>>& first_moments() { return m_; }
  std::vector<Matrix<S>>& second_moments() { return v_; }
  const std::vector<Matrix<S>>& first_moments() const { return m_; }
  const std::vector<Matrix<S>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<bool> decay_;
  std::vector<Matrix<S>> m_, v_;
  AdamWOptions opts_;
  long step_ = 0;
};

/// lr0 * (1 + cos(pi * step / total)) / 2, after an optional linear warmup.
double cosine_lr(long step, long total_steps, double lr0, long warmup_steps = 0);

}  // namespace ecglp
