#include "ecglp/optim.hpp"

#include <cmath>
#include <numbers>

namespace ecglp {

template <typename S>
void adamw_update(Matrix<S>& param, const Matrix<S>& grad, Matrix<S>& m, Matrix<S>& v, long step, double lr,
                  double weight_decay, double beta1, double beta2, double eps) {
  if (step < 1) throw std::invalid_argument("adamw_update: step is 1-based");
  if (weight_decay != 0.0) param *= static_cast<S>(1.0 - lr * weight_decay);
  m = static_cast<S>(beta1) * m + static_cast<S>(1.0 - beta1) * grad;
  v = static_cast<S>(beta2) * v + static_cast<S>(1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  const S step_size = static_cast<S>(lr / c1);
  const S inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2));
  param.array() -= step_size * m.array() / ((v.array().sqrt() * inv_sqrt_c2) + static_cast<S>(eps));
}

bool decays(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return !(ends_with(".bias") || ends_with(".gain") || name == "log_tau");
}

template <typename S>
AdamW<S>::AdamW(std::vector<Tensor<S>> params, const AdamWOptions& opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    decay_.push_back(decays(p.name()));
    m_.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
    v_.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
  }
}

template <typename S>
void AdamW<S>::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].has_grad() && !params_[i].grad().allFinite()) {
      throw NumericError("non-finite gradient for parameter " + params_[i].name());
    }
  }
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    adamw_update(p.mutable_value(), p.grad(), m_[i], v_[i], step_, lr, decay_[i] ? opts_.weight_decay : 0.0,
                 opts_.beta1, opts_.beta2, opts_.eps);
  }
}

double cosine_lr(long step, long total_steps, double lr0, long warmup_steps) {
  if (total_steps <= 0) return lr0;
  if (step < 0 || step > total_steps) throw std::out_of_range("cosine_lr: step outside [0, total_steps]");
  if (warmup_steps > 0 && step < warmup_steps) return lr0 * static_cast<double>(step + 1) / warmup_steps;
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double t = span > 0 ? static_cast<double>(step - warmup_steps) / span : 1.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template void adamw_update<float>(Matrix<float>&, const Matrix<float>&, Matrix<float>&, Matrix<float>&, long, double,
                                  double, double, double, double);
template void adamw_update<double>(Matrix<double>&, const Matrix<double>&, Matrix<double>&, Matrix<double>&, long,
                                   double, double, double, double, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace ecglp
