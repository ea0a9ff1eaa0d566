#include "ulip/optim.hpp"

#include <cmath>

#include "ulip/errors.hpp"

namespace ulip::ag {

void adam_step(std::span<Parameter> params, AdamState& state, const AdamHyper& hyper) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (p.tensor.grad.size() != p.tensor.data.size()) {
      throw ShapeError("adam_step: parameter '" + p.name + "' has no gradient buffer");
    }
    if (state.m[i].empty()) {
      state.m[i].assign(p.tensor.size(), 0.0f);
      state.v[i].assign(p.tensor.size(), 0.0f);
    }
    if (state.m[i].size() != p.tensor.size() || state.v[i].size() != p.tensor.size()) {
      throw ShapeError("adam_step: state shape mismatch for '" + p.name + "'");
    }
    for (float g : p.tensor.grad) {
      if (!std::isfinite(g)) {
        throw NumericalError("adam_step: non-finite gradient in parameter '" + p.name + "'");
      }
    }
  }

  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(static_cast<double>(hyper.beta1), t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(hyper.beta2), t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor.data;
    const auto& g = params[i].tensor.grad;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = hyper.beta1 * m[j] + (1.0f - hyper.beta1) * g[j];
      v[j] = hyper.beta2 * v[j] + (1.0f - hyper.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= static_cast<float>(hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

}  // namespace ulip::ag
