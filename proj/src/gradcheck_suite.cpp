#include "ulip/gradcheck_suite.hpp"

#include <cmath>
#include <random>

#include "ulip/model.hpp"
#include "ulip/training.hpp"

namespace ulip::ag {

namespace {

using TensorD = BasicTensor<double>;

TensorD random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double lo = -1.0,
                      double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(r * c);
  for (auto& x : v) x = u(rng);
  return TensorD::from(r, c, std::move(v));
}

// Values bounded away from zero so small perturbations rarely cross a kink.
TensorD signed_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(r * c);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return TensorD::from(r, c, std::move(v));
}

// sum(y * W) with W drawn from a fixed seed, identical on every evaluation.
Var weighted_sum(GraphD& g, Var y, std::uint64_t seed) {
  const auto& v = g.value(y);
  std::mt19937_64 rng(seed);
  const Var w = g.constant(random_tensor(v.rows(), v.cols(), rng));
  return g.sum_all(g.mul(y, w));
}

struct Case {
  std::string name;
  OpKind op;
  std::vector<ParameterD> params;
  LossBuilder build;
};

std::vector<Case> make_cases(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::uint64_t wseed = seed ^ 0x5eedULL;
  auto P = [](std::string name, TensorD t) { return ParameterD{std::move(name), std::move(t)}; };
  auto unary = [wseed](OpKind op, int axis = 0) {
    return [op, axis, wseed](GraphD& g, std::span<const Var> p) {
      const Var in[] = {p[0]};
      return weighted_sum(g, g.forward(op, in, axis), wseed);
    };
  };
  auto binary = [wseed](OpKind op) {
    return [op, wseed](GraphD& g, std::span<const Var> p) {
      const Var in[] = {p[0], p[1]};
      return weighted_sum(g, g.forward(op, in), wseed);
    };
  };

  std::vector<Case> cases;
  cases.push_back({"matmul", OpKind::kMatMul,
                   {P("a", random_tensor(3, 4, rng)), P("b", random_tensor(4, 5, rng))},
                   binary(OpKind::kMatMul)});
  cases.push_back({"add", OpKind::kAdd,
                   {P("a", random_tensor(3, 4, rng)), P("b", random_tensor(3, 4, rng))},
                   binary(OpKind::kAdd)});
  cases.push_back({"add/broadcast", OpKind::kAdd,
                   {P("a", random_tensor(5, 4, rng)), P("b", random_tensor(1, 4, rng))},
                   binary(OpKind::kAdd)});
  cases.push_back({"subtract", OpKind::kSubtract,
                   {P("a", random_tensor(3, 4, rng)), P("b", random_tensor(3, 4, rng))},
                   binary(OpKind::kSubtract)});
  cases.push_back({"subtract/broadcast", OpKind::kSubtract,
                   {P("a", random_tensor(5, 4, rng)), P("b", random_tensor(1, 4, rng))},
                   binary(OpKind::kSubtract)});
  cases.push_back({"mul", OpKind::kMul,
                   {P("a", random_tensor(4, 6, rng)), P("b", random_tensor(4, 6, rng))},
                   binary(OpKind::kMul)});
  cases.push_back({"relu", OpKind::kRelu, {P("x", signed_tensor(6, 5, rng))},
                   unary(OpKind::kRelu)});
  cases.push_back({"max_axis/0", OpKind::kMaxAxis, {P("x", random_tensor(7, 4, rng))},
                   unary(OpKind::kMaxAxis, 0)});
  cases.push_back({"max_axis/1", OpKind::kMaxAxis, {P("x", random_tensor(4, 7, rng))},
                   unary(OpKind::kMaxAxis, 1)});
  cases.push_back({"mean_axis/0", OpKind::kMeanAxis, {P("x", random_tensor(5, 3, rng))},
                   unary(OpKind::kMeanAxis, 0)});
  cases.push_back({"mean_axis/1", OpKind::kMeanAxis, {P("x", random_tensor(3, 5, rng))},
                   unary(OpKind::kMeanAxis, 1)});
  cases.push_back({"transpose", OpKind::kTranspose, {P("x", random_tensor(3, 6, rng))},
                   unary(OpKind::kTranspose)});
  cases.push_back({"concat_rows", OpKind::kConcatRows,
                   {P("a", random_tensor(2, 4, rng)), P("b", random_tensor(3, 4, rng)),
                    P("c", random_tensor(1, 4, rng))},
                   [wseed](GraphD& g, std::span<const Var> p) {
                     return weighted_sum(g, g.concat_rows(p), wseed);
                   }});
  cases.push_back({"l2_normalize_rows", OpKind::kL2NormalizeRows,
                   {P("x", random_tensor(3, 5, rng))}, unary(OpKind::kL2NormalizeRows)});
  cases.push_back({"scale", OpKind::kScaleByScalar,
                   {P("x", random_tensor(3, 4, rng)), P("s", random_tensor(1, 1, rng))},
                   binary(OpKind::kScaleByScalar)});
  cases.push_back({"exp_scalar", OpKind::kExpScalar, {P("s", random_tensor(1, 1, rng))},
                   unary(OpKind::kExpScalar)});
  cases.push_back({"log_softmax_rows", OpKind::kLogSoftmaxRows,
                   {P("x", random_tensor(4, 6, rng, -3.0, 3.0))},
                   unary(OpKind::kLogSoftmaxRows)});
  cases.push_back({"nll_diagonal", OpKind::kNllDiagonal, {P("x", random_tensor(5, 5, rng))},
                   [](GraphD& g, std::span<const Var> p) { return g.nll_diagonal(p[0]); }});
  cases.push_back({"sum_all", OpKind::kSumAll, {P("x", random_tensor(4, 3, rng))},
                   [](GraphD& g, std::span<const Var> p) { return g.sum_all(p[0]); }});
  return cases;
}

}  // namespace

std::vector<SuiteCase> run_op_suite(std::uint64_t seed, const GradCheckOptions& options) {
  std::vector<SuiteCase> out;
  for (auto& c : make_cases(seed)) {
    out.push_back({c.name, c.op, grad_check(c.build, c.params, options)});
  }
  return out;
}

SuiteCase run_composition_check(std::uint64_t seed, const GradCheckOptions& options) {
  constexpr std::size_t kBatch = 3;
  constexpr std::size_t kPoints = 4;
  constexpr std::uint32_t kDim = 8;

  model::EncoderConfig config;
  config.in_channels = 3;
  config.point_widths = {8, 16};
  config.head_widths = {16, kDim};
  config.embed_dim = kDim;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<geometry::PointCloud> clouds(kBatch);
  for (auto& pc : clouds) {
    for (std::size_t i = 0; i < kPoints; ++i) pc.points.push_back({u(rng), u(rng), u(rng)});
  }

  auto unit_rows = [&](std::size_t r, std::size_t c) {
    TensorD t = random_tensor(r, c, rng);
    for (std::size_t i = 0; i < r; ++i) {
      double n = 0.0;
      for (std::size_t j = 0; j < c; ++j) n += t.at(i, j) * t.at(i, j);
      n = std::sqrt(n);
      for (std::size_t j = 0; j < c; ++j) t.at(i, j) /= n;
    }
    return t;
  };
  const TensorD images = unit_rows(kBatch, kDim);
  const TensorD texts = unit_rows(kBatch, kDim);

  std::vector<ParameterD> params;
  for (const auto& p : model::init_params(config, seed).tensors) {
    params.push_back({p.name, p.tensor.cast<double>()});
  }
  params.push_back({"logit_scale", TensorD::scalar(0.0)});  // tau = 1
  const std::size_t n_enc = params.size() - 1;

  training::LossWeights weights;
  LossBuilder build = [&](GraphD& g, std::span<const Var> p) {
    const Var fp = model::encode_graph(g, config, p.first(n_enc), clouds);
    const Var fi = g.constant(images);
    const Var ft = g.constant(texts);
    return training::total_loss(g, fp, fi, ft, p[n_enc], weights, training::Reduction::kMean)
        .total;
  };
  return {"encode->total_loss", OpKind::kLeaf, grad_check(build, params, options)};
}

}  // namespace ulip::ag
