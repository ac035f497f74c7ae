#include "ematrace/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace ematrace::spen {

void AdamWConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("adamw: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adamw: betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("adamw: eps must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("adamw: weight_decay must be >= 0");
  if (warmup_steps < 0) throw std::invalid_argument("adamw: warmup_steps must be >= 0");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) throw std::invalid_argument("adamw: min_lr_ratio must be in [0, 1]");
}

double lr_at(const AdamWConfig& c, int step, int total_steps) {
  if (step < 0 || step >= total_steps) throw std::out_of_range("lr_at: step outside the schedule");
  if (step < c.warmup_steps) return c.lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const int decay_steps = total_steps - c.warmup_steps;
  if (decay_steps <= 1) return c.lr;
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(decay_steps - 1);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

template <typename Scalar>
double global_norm(const SpenConfig& model, SpenParams<Scalar>& grads) {
  double sq = 0.0;
  grads.visit(model, [&](const std::string&, Matrix<Scalar>& g, bool trainable, bool) {
    if (trainable) sq += g.template cast<double>().squaredNorm();
  });
  return std::sqrt(sq);
}

template <typename Scalar>
AdamW<Scalar>::AdamW(const AdamWConfig& config, const SpenModel<Scalar>& model)
    : config_(config), m_(model.params().zeros_like(model.config())), v_(m_) {
  config_.validate();
}

template <typename Scalar>
double AdamW<Scalar>::step(SpenModel<Scalar>& model, SpenParams<Scalar>& grads, double lr) {
  const SpenConfig& mc = model.config();
  const double norm = global_norm(mc, grads);
  if (!std::isfinite(norm)) throw std::domain_error("adamw: non-finite gradient norm");
  const double clip_scale = config_.clip > 0.0 && norm > config_.clip ? config_.clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));

  std::vector<Matrix<Scalar>*> ms, vs, gs;
  m_.visit(mc, [&](const std::string&, Matrix<Scalar>& m, bool, bool) { ms.push_back(&m); });
  v_.visit(mc, [&](const std::string&, Matrix<Scalar>& m, bool, bool) { vs.push_back(&m); });
  grads.visit(mc, [&](const std::string&, Matrix<Scalar>& m, bool, bool) { gs.push_back(&m); });

  const auto b1 = static_cast<Scalar>(config_.beta1);
  const auto b2 = static_cast<Scalar>(config_.beta2);
  std::size_t i = 0;
  model.params().visit(mc, [&](const std::string&, Matrix<Scalar>& w, bool trainable, bool decayed) {
    const std::size_t k = i++;
    if (!trainable) return;
    auto& g = *gs[k];
    if (clip_scale != 1.0) g *= static_cast<Scalar>(clip_scale);
    auto& m = *ms[k];
    auto& v = *vs[k];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    if (decayed && config_.weight_decay > 0.0) w *= static_cast<Scalar>(1.0 - lr * config_.weight_decay);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto denom_scale = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    w.array() -= step_size * m.array() / ((v.array().sqrt() * denom_scale) + static_cast<Scalar>(config_.eps));
  });
  return norm;
}

template double global_norm<float>(const SpenConfig&, SpenParams<float>&);
template double global_norm<double>(const SpenConfig&, SpenParams<double>&);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace ematrace::spen
