#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sani/tensor.hpp"

namespace sani {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates per parameter plus the step counter.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::span<const Tensor> params);

  bool matches(std::span<const Tensor> params) const;
};

/// One bias-corrected Adam update in place.
void adam_step(std::span<Tensor> params, const GradientSet& grads, AdamState& state, double lr,
               const AdamConfig& cfg = {});

}  // namespace sani
