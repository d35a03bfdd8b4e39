#include "sani/adam.hpp"

#include <cmath>

#include "sani/errors.hpp"

namespace sani {

AdamState::AdamState(std::span<const Tensor> params) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const auto& p : params) {
    m.emplace_back(p.shape);
    v.emplace_back(p.shape);
  }
}

bool AdamState::matches(std::span<const Tensor> params) const {
  if (m.size() != params.size() || v.size() != params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!m[i].same_shape(params[i]) || !v[i].same_shape(params[i])) return false;
  }
  return true;
}

void adam_step(std::span<Tensor> params, const GradientSet& grads, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (grads.size() != params.size() || !state.matches(params)) {
    throw Error(ErrorCode::ShapeMismatch, "adam_step: parameter, gradient and state sets differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params[i])) {
      throw Error(ErrorCode::ShapeMismatch, "adam_step: gradient " + std::to_string(i) + " has shape " +
                                                shape_string(grads[i].shape));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data;
    const auto& g = grads[i].data;
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace sani
