#pragma once

#include <cmath>

#include "regmae/autodiff/tensor.hpp"

namespace regmae::ad {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
template <class S>
class AdamW {
 public:
  AdamW(ParameterStore<S>& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
    for (auto& p : params_) {
      m_.push_back(Vec<S>::Zero(p->value.size()));
      v_.push_back(Vec<S>::Zero(p->value.size()));
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

  void step() {
    for (auto& p : params_)
      if (p->trainable && !p->grad.allFinite())
        fail(ErrorKind::Training, "non-finite gradient in parameter " + p->name);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    std::size_t i = 0;
    for (auto& p : params_) {
      Vec<S>& m = m_[i];
      Vec<S>& v = v_[i];
      ++i;
      if (!p->trainable) continue;
      Vec<S>& w = p->value.data;
      const Vec<S>& g = p->grad;
      if (cfg_.weight_decay != 0.0) w *= S(1.0 - cfg_.lr * cfg_.weight_decay);
      m = S(cfg_.beta1) * m + S(1.0 - cfg_.beta1) * g;
      v = S(cfg_.beta2) * v + S(1.0 - cfg_.beta2) * g.square();
      w -= S(cfg_.lr) * (m / S(bc1)) / ((v / S(bc2)).sqrt() + S(cfg_.eps));
    }
  }

 private:
  ParameterStore<S>& params_;
  AdamWConfig cfg_;
  std::vector<Vec<S>> m_, v_;
  std::int64_t t_ = 0;
};

/// Global L2 norm of trainable gradients.
template <class S>
double grad_norm(const ParameterStore<S>& params) {
  double ss = 0.0;
  for (const auto& p : params)
    if (p->trainable) ss += p->grad.template cast<double>().square().sum();
  return std::sqrt(ss);
}

/// Rescales gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
template <class S>
double clip_grad_norm(ParameterStore<S>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const S f = S(max_norm / norm);
    for (auto& p : params)
      if (p->trainable) p->grad *= f;
  }
  return norm;
}

}  // namespace regmae::ad
