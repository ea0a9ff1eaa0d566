#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ulip/ag.hpp"

namespace ulip::ag {

using ParameterD = BasicParameter<double>;
using GraphD = BasicGraph<double>;

/// Builds a scalar loss from leaves bound to the given parameters.
using LossBuilder = std::function<Var(GraphD&, std::span<const Var> params)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // coordinates whose perturbation crosses a kink
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool valid = true;  // false when two forward passes disagree
  bool pass = false;
  std::string note;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tol = 1e-4;
  // Denominator floor in |a - n| / max(|a|, |n|, floor).
  double rel_floor = 1e-2;
  std::optional<std::pair<OpKind, double>> fault;
};

/// Compares reverse-mode gradients against central differences, both in
/// 64-bit arithmetic. Coordinates whose +/- step evaluation changes any relu
/// sign or max argmax are skipped and counted.
GradCheckReport grad_check(const LossBuilder& build, std::vector<ParameterD>& params,
                           const GradCheckOptions& options = {});

}  // namespace ulip::ag
