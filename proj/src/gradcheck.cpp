#include "ulip/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ulip/errors.hpp"

namespace ulip::ag {

namespace {

struct Eval {
  double loss;
  std::vector<std::int64_t> kinks;
};

Eval evaluate(const LossBuilder& build, std::vector<ParameterD>& params) {
  GraphD g;
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (auto& p : params) leaves.push_back(g.leaf(p.tensor));
  const Var loss = build(g, leaves);
  const auto& v = g.value(loss);
  if (v.size() != 1) throw ShapeError("grad_check: builder must return a scalar");
  return {v.data[0], g.kink_signature()};
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& build, std::vector<ParameterD>& params,
                           const GradCheckOptions& options) {
  GradCheckReport report;
  for (auto& p : params) p.tensor.set_requires_grad(true);

  const Eval base = evaluate(build, params);
  const Eval again = evaluate(build, params);
  if (base.loss != again.loss || base.kinks != again.kinks) {
    report.valid = false;
    report.note = "builder is non-deterministic: two forward passes disagree";
    return report;
  }

  {
    GraphD g;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(g.leaf(p.tensor));
    if (options.fault) g.set_grad_fault(options.fault->first, options.fault->second);
    g.backward(build(g, leaves));
  }

  report.pass = true;
  for (auto& p : params) {
    GradCheckEntry e;
    e.name = p.name;
    auto& data = p.tensor.data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + options.step;
      const Eval plus = evaluate(build, params);
      data[i] = orig - options.step;
      const Eval minus = evaluate(build, params);
      data[i] = orig;
      if (plus.kinks != base.kinks || minus.kinks != base.kinks) {
        ++e.skipped;
        continue;
      }
      const double numeric = (plus.loss - minus.loss) / (2.0 * options.step);
      const double analytic = p.tensor.grad[i];
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), options.rel_floor});
      e.max_rel_error = std::max(e.max_rel_error, std::abs(analytic - numeric) / denom);
      ++e.checked;
    }
    e.pass = e.max_rel_error < options.tol;
    report.pass = report.pass && e.pass;
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace ulip::ag
