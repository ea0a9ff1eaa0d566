#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ulip/gradcheck.hpp"

namespace ulip::ag {

struct SuiteCase {
  std::string name;  // op name, with a suffix when an op has several cases
  OpKind op = OpKind::kLeaf;
  GradCheckReport report;
};

/// One or more random-input checks per catalog op (dims <= 8). Each case
/// reduces the op output with fixed random weights so every output
/// coordinate carries a distinct adjoint.
std::vector<SuiteCase> run_op_suite(std::uint64_t seed, const GradCheckOptions& options = {});

/// encode -> total_loss on B = 3 clouds of 4 points, D = 8, checked against
/// every encoder parameter and the logit scale.
SuiteCase run_composition_check(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace ulip::ag
