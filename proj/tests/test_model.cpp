#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "ulip/errors.hpp"
#include "ulip/gradcheck.hpp"
#include "ulip/model.hpp"
#include "ulip/training.hpp"

using namespace ulip;
using namespace ulip::model;

namespace {

geometry::PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, bool color = false) {
  std::uniform_real_distribution<float> u(-1, 1), c(0, 1);
  geometry::PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) pc.points.push_back({u(rng), u(rng), u(rng)});
  if (color) {
    pc.colors.emplace();
    for (std::size_t i = 0; i < n; ++i) pc.colors->push_back({c(rng), c(rng), c(rng)});
  }
  return pc;
}

EncoderConfig small(std::uint32_t channels = 3) {
  EncoderConfig c;
  c.in_channels = channels;
  c.point_widths = {16, 32};
  c.head_widths = {32, 8};
  c.embed_dim = 8;
  return c;
}

bool bitwise_equal(const ag::Tensor& a, const ag::Tensor& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(EncoderConfig{}.validate());
  auto c = small();
  c.in_channels = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small();
  c.head_widths.back() = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small();
  c.point_widths[0] = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const auto d = EncoderConfig::for_dim(32);
  CHECK(d.head_widths.back() == 32);
  CHECK(d.embed_dim == 32);
  CHECK(d.point_widths == std::vector<std::uint32_t>{64, 128, 256});
}

TEST_CASE("init_params") {
  const auto cfg = small();
  const auto a = init_params(cfg, 5);
  const auto b = init_params(cfg, 5);
  const auto c = init_params(cfg, 6);
  REQUIRE(a.tensors.size() == 8);
  CHECK(a.tensors[0].name == "point.0.weight");
  CHECK(a.tensors[7].name == "head.1.bias");
  bool differs = false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(bitwise_equal(a.tensors[i].tensor, b.tensors[i].tensor));
    differs |= !bitwise_equal(a.tensors[i].tensor, c.tensors[i].tensor);
    const auto& t = a.tensors[i].tensor;
    if (a.tensors[i].name.ends_with("bias")) {
      CHECK(std::all_of(t.data.begin(), t.data.end(), [](float v) { return v == 0.0f; }));
    } else {
      const double bound = std::sqrt(6.0 / t.rows());
      CHECK(std::all_of(t.data.begin(), t.data.end(),
                        [bound](float v) { return std::abs(v) <= bound; }));
    }
  }
  CHECK(differs);
  CHECK(a.count() == 3 * 16 + 16 + 16 * 32 + 32 + 32 * 32 + 32 + 32 * 8 + 8);
}

TEST_CASE("outputs are unit norm") {
  std::mt19937_64 rng(1);
  const auto cfg = small();
  const auto p = init_params(cfg, 2);
  std::vector<geometry::PointCloud> clouds;
  for (int i = 0; i < 10; ++i) clouds.push_back(random_cloud(5 + rng() % 100, rng));
  const auto f = encode(p, cfg, clouds);
  REQUIRE(f.rows() == 10);
  REQUIRE(f.cols() == 8);
  for (std::size_t i = 0; i < 10; ++i) {
    double n = 0;
    for (std::size_t j = 0; j < 8; ++j) n += double(f.at(i, j)) * f.at(i, j);
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-5);
  }
}

TEST_CASE("permutation and duplication invariance are bitwise") {
  std::mt19937_64 rng(2);
  const auto cfg = EncoderConfig::for_dim(16);
  const auto p = init_params(cfg, 3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto pc = random_cloud(50 + trial * 37, rng);
    auto perm = pc;
    std::shuffle(perm.points.begin(), perm.points.end(), rng);
    auto dup = pc;
    dup.points.insert(dup.points.end(), pc.points.begin(), pc.points.end());
    const std::vector<geometry::PointCloud> batch{pc, perm, dup};
    const auto f = encode(p, cfg, batch);
    CHECK(std::memcmp(&f.data[0], &f.data[16], 16 * sizeof(float)) == 0);
    CHECK(std::memcmp(&f.data[0], &f.data[32], 16 * sizeof(float)) == 0);
  }
}

TEST_CASE("batch composition does not change a row") {
  std::mt19937_64 rng(3);
  const auto cfg = small();
  const auto p = init_params(cfg, 4);
  std::vector<geometry::PointCloud> clouds;
  for (int i = 0; i < 70; ++i) clouds.push_back(random_cloud(20, rng));
  const auto all = encode(p, cfg, clouds);
  for (std::size_t i : {0, 33, 69}) {
    const auto one = encode(p, cfg, std::span(clouds).subspan(i, 1));
    CHECK(std::memcmp(&all.data[i * 8], one.data.data(), 8 * sizeof(float)) == 0);
  }
}

TEST_CASE("channel handling") {
  std::mt19937_64 rng(4);
  const auto xyz = random_cloud(6, rng);
  const auto rgb = random_cloud(6, rng, true);

  const auto f3 = point_features<float>(rgb, small(3));
  CHECK(f3.cols() == 3);
  const auto f6 = point_features<float>(rgb, small(6));
  CHECK(f6.cols() == 6);
  CHECK(f6.at(2, 4) == (*rgb.colors)[2][1]);
  const auto filled = point_features<float>(xyz, small(6));
  CHECK(filled.at(5, 3) == 0.5f);
  CHECK(filled.at(5, 0) == xyz.points[5][0]);

  auto broken = rgb;
  broken.colors->pop_back();
  CHECK_THROWS_AS(point_features<float>(broken, small(6)), DataError);
  CHECK_THROWS_AS(point_features<float>(geometry::PointCloud{}, small(3)), DataError);

  // xyz encoder ignores colors entirely
  const auto p = init_params(small(3), 1);
  auto plain = rgb;
  plain.colors.reset();
  const std::vector<geometry::PointCloud> b{rgb, plain};
  const auto f = encode(p, small(3), b);
  CHECK(std::memcmp(&f.data[0], &f.data[8], 8 * sizeof(float)) == 0);

  const auto p6 = init_params(small(6), 1);
  const std::vector<geometry::PointCloud> one{rgb};
  CHECK(encode(p6, small(6), one).cols() == 8);
  CHECK_THROWS_AS(encode(p, small(3), std::span<const geometry::PointCloud>{}), DataError);
}

TEST_CASE("gradient flows through the encoder into the full loss") {
  const auto cfg = small();
  std::mt19937_64 rng(6);
  std::vector<geometry::PointCloud> clouds{random_cloud(4, rng), random_cloud(4, rng)};
  std::vector<ag::ParameterD> params;
  for (const auto& t : init_params(cfg, 7).tensors) params.push_back({t.name, t.tensor.cast<double>()});
  params.push_back({"logit_scale", ag::BasicTensor<double>::scalar(0.0)});
  const std::size_t n_enc = params.size() - 1;

  std::normal_distribution<double> n;
  auto unit = [&] {
    std::vector<double> v(16);
    for (auto& x : v) x = n(rng);
    for (std::size_t i = 0; i < 2; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 8; ++j) s += v[i * 8 + j] * v[i * 8 + j];
      for (std::size_t j = 0; j < 8; ++j) v[i * 8 + j] /= std::sqrt(s);
    }
    return ag::BasicTensor<double>::from(2, 8, v);
  };
  const auto fi = unit(), ft = unit();
  const ag::LossBuilder build = [&](ag::GraphD& g, std::span<const ag::Var> p) {
    const auto fp = encode_graph(g, cfg, p.first(n_enc), clouds);
    return training::total_loss(g, fp, g.constant(fi), g.constant(ft), p[n_enc], {},
                                training::Reduction::kSum)
        .total;
  };
  const auto report = ag::grad_check(build, params);
  CHECK(report.valid);
  CHECK(report.pass);
  std::size_t checked = 0;
  for (const auto& e : report.entries) checked += e.checked;
  CHECK(checked > 0);
}
