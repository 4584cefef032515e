#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsnmt/errors.hpp"
#include "tsnmt/tensor.hpp"

namespace tsnmt {

// Linear warmup from 0 to peak over warmup_steps, then linear decay to 0 at
// total_steps.
struct LearningRateSchedule {
  double peak = 5e-4;
  std::uint64_t warmup_steps = 4000;
  std::uint64_t total_steps = 100000;

  void validate() const {
    if (!(peak > 0.0)) throw ConfigError("train.lr must be > 0");
    if (total_steps == 0) throw ConfigError("train.steps must be >= 1");
    if (warmup_steps > total_steps) throw ConfigError("train.warmup must not exceed train.steps");
  }

  double operator()(double s) const {
    if (s <= 0.0) return 0.0;
    const double w = static_cast<double>(warmup_steps), t = static_cast<double>(total_steps);
    if (s < w) return peak * s / w;
    if (s >= t) return 0.0;
    if (t == w) return peak;
    return peak * (t - s) / (t - w);
  }
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

// Adam moments and step count. Moment arrays are kept in f64 regardless of
// the parameter scalar so that f32 and f64 runs share one update rule.
struct OptimizerState {
  AdamHyper hyper;
  LearningRateSchedule lr;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;

  template <typename S>
  void init_for(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
    m.clear();
    v.clear();
    for (const auto& [name, t] : params) {
      m.emplace_back(t.size(), 0.0);
      v.emplace_back(t.size(), 0.0);
    }
    step = 0;
  }
};

// One bias-corrected Adam update of a single array with step index t (1-based).
template <typename S>
void adam_update(std::span<S> param, std::span<const S> grad, std::vector<double>& m, std::vector<double>& v,
                 const AdamHyper& h, double lr, std::uint64_t t) {
  if (param.size() != grad.size() || m.size() != param.size() || v.size() != param.size())
    throw DimensionError("adam_update: parameter, gradient and moment sizes differ");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
    const double mhat = m[i] / c1, vhat = v[i] / c2;
    param[i] = static_cast<S>(static_cast<double>(param[i]) - lr * mhat / (std::sqrt(vhat) + h.eps));
  }
}

template <typename S>
double global_grad_norm(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    for (S g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

// Clips gradients in place to global norm `max_norm` (<= 0 disables) and
// returns the norm before clipping. Non-finite gradients raise a
// DivergenceError naming the first offending parameter.
template <typename S>
double clip_gradients(const std::vector<std::pair<std::string, Tensor<S>>>& params, double max_norm) {
  for (const auto& [name, t] : params)
    for (S g : t.grad())
      if (!std::isfinite(static_cast<double>(g))) throw DivergenceError("non-finite gradient in " + name);
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (const auto& [name, t] : params)
      for (S& g : t.grad()) g *= scale;
  }
  return norm;
}

// Advances the step count, applies Adam with lr(step) to every parameter and
// returns the learning rate used.
template <typename S>
double optimizer_step(OptimizerState& opt, const std::vector<std::pair<std::string, Tensor<S>>>& params) {
  if (opt.m.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  const std::uint64_t t = opt.step + 1;
  const double lr = opt.lr(static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i].second;
    adam_update<S>(p.data(), p.grad(), opt.m[i], opt.v[i], opt.hyper, lr, t);
  }
  opt.step = t;
  for (const auto& [name, p] : params)
    for (S x : p.data())
      if (!std::isfinite(static_cast<double>(x))) throw DivergenceError("non-finite value in " + name + " after update");
  return lr;
}

}  // namespace tsnmt
