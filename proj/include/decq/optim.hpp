#pragma once

#include "decq/graph.hpp"

#include <cmath>
#include <vector>

namespace decq {

struct AdamWOptions {
  double lr = 2.0e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay. Parameters without a gradient are
/// treated as having zero gradient.
template <typename S>
class AdamW {
 public:
  AdamW(std::vector<Parameter<S>*> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
    for (auto* p : params_) {
      m_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(Matrix<S>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++steps_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(steps_));
    const S b1 = S(opts_.beta1), b2 = S(opts_.beta2);
    const S lr = S(opts_.lr), eps = S(opts_.eps), wd = S(opts_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (p->grad.size() == 0) p->zero_grad();
      m_[i] = b1 * m_[i] + (S(1) - b1) * p->grad;
      v_[i] = b2 * v_[i] + (S(1) - b2) * p->grad.cwiseAbs2();
      if (wd > 0) p->value *= S(1) - lr * wd;
      const auto mhat = m_[i].array() / S(bc1);
      const auto vhat = v_[i].array() / S(bc2);
      p->value.array() -= lr * mhat / (vhat.sqrt() + eps);
    }
  }

  const std::vector<Parameter<S>*>& parameters() const { return params_; }
  std::vector<Matrix<S>>& first_moments() { return m_; }
  std::vector<Matrix<S>>& second_moments() { return v_; }
  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  AdamWOptions& options() { return opts_; }

 private:
  std::vector<Parameter<S>*> params_;
  AdamWOptions opts_;
  std::vector<Matrix<S>> m_, v_;
  std::int64_t steps_ = 0;
};

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
template <typename S>
double clip_grad_norm(const std::vector<Parameter<S>*>& params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    if (p->grad.size()) sq += static_cast<double>(p->grad.squaredNorm());
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const S factor = S(max_norm / (norm + 1e-6));
    for (auto* p : params)
      if (p->grad.size()) p->grad *= factor;
  }
  return norm;
}

/// Exponential moving average of parameter values.
template <typename S>
class Ema {
 public:
  Ema(std::vector<Parameter<S>*> params, double decay) : params_(std::move(params)), decay_(decay) {
    for (auto* p : params_) shadow_.push_back(p->value);
  }

  void update() {
    const S d = S(decay_);
    for (std::size_t i = 0; i < params_.size(); ++i) shadow_[i] = d * shadow_[i] + (S(1) - d) * params_[i]->value;
  }

  /// Exchanges live and averaged values; call twice to restore.
  void swap() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value.swap(shadow_[i]);
  }

  std::vector<Matrix<S>>& shadow() { return shadow_; }
  double decay() const { return decay_; }

 private:
  std::vector<Parameter<S>*> params_;
  double decay_;
  std::vector<Matrix<S>> shadow_;
};

}  // namespace decq
