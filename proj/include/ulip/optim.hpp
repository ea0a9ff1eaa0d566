#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ulip/ag.hpp"

namespace ulip::ag {

struct AdamHyper {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
/// Throws NumericalError naming the parameter if any gradient is non-finite;
/// nothing is modified in that case.
void adam_step(std::span<Parameter> params, AdamState& state, const AdamHyper& hyper);

}  // namespace ulip::ag
