#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ulip/errors.hpp"
#include "ulip/synth.hpp"
#include "ulip/training.hpp"

using namespace ulip;
using namespace ulip::training;

namespace {

ag::Tensor unit_rows(std::size_t b, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> n;
  auto t = ag::Tensor::zeros(b, d);
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      t.at(i, j) = n(rng);
      s += double(t.at(i, j)) * t.at(i, j);
    }
    for (std::size_t j = 0; j < d; ++j) t.at(i, j) = static_cast<float>(t.at(i, j) / std::sqrt(s));
  }
  return t;
}

// Symmetric InfoNCE written out index by index in long double.
double naive_loss(const ag::Tensor& p, const ag::Tensor& x, double tau, bool mean) {
  const std::size_t b = p.rows(), d = p.cols();
  std::vector<long double> L(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += (long double)p.at(i, k) * x.at(j, k);
      L[i * b + j] = s / tau;
    }
  }
  long double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    long double row = 0, col = 0;
    for (std::size_t j = 0; j < b; ++j) {
      row += std::exp(L[i * b + j]);
      col += std::exp(L[j * b + i]);
    }
    total += std::log(std::exp(L[i * b + i]) / row) + std::log(std::exp(L[i * b + i]) / col);
  }
  total *= -0.5L;
  return static_cast<double>(mean ? total / b : total);
}

ag::Tensor permute_rows(const ag::Tensor& t, const std::vector<std::size_t>& perm) {
  auto out = ag::Tensor::zeros(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out.at(i, j) = t.at(perm[i], j);
  }
  return out;
}

double total_value(const ag::Tensor& fp, const ag::Tensor& fi, const ag::Tensor& ft,
                   LossWeights w, float s) {
  ag::BasicGraph<double> g;
  const auto t = total_loss(g, g.constant(fp.cast<double>()), g.constant(fi.cast<double>()),
                            g.constant(ft.cast<double>()),
                            g.constant(ag::BasicTensor<double>::scalar(s)), w, Reduction::kSum);
  return g.value(t.total).data[0];
}

struct Fixture {
  synth::SynthBundle bundle;
  DataTables tables;
  CloudStore store;
  model::EncoderConfig encoder;
  TrainConfig config;

  Fixture() {
    synth::SynthSpec spec;
    spec.categories = {synth::Primitive::kSphere, synth::Primitive::kCube,
                       synth::Primitive::kTorus, synth::Primitive::kCone};
    spec.train_per_class = 3;
    spec.test_per_class = 1;
    spec.dim = 16;
    spec.views = 4;
    spec.captions_per_view = 3;
    spec.points = 96;
    spec.seed = 5;
    bundle = synth::build_bundle(spec);
    tables = {bundle.mock.images, bundle.mock.texts};
    for (std::size_t i = 0; i < bundle.dataset.shapes.size(); ++i) {
      store.put(synth::cloud_path(bundle.dataset.shapes[i]), bundle.clouds[i]);
    }
    encoder.point_widths = {16, 32};
    encoder.head_widths = {32, 16};
    encoder.embed_dim = 16;
    config.batch_size = 4;
    config.steps = 5;
    config.batch.point_budget = 64;
    config.seed = 9;
  }
  const embedstore::TripletManifest& manifest() const { return bundle.mock.train; }
};

const auto tmp = std::filesystem::temp_directory_path() / "ulip_training";

}  // namespace

TEST_CASE("B = 2 hand value and degenerate batch") {
  const auto f = ag::Tensor::from(2, 2, {1, 0, 0, 1});
  const double expected = 4.0 * -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)) / 2.0;
  CHECK(expected == doctest::Approx(0.62652).epsilon(1e-5));
  CHECK(contrastive_loss_value(f, f, 0.0f, Reduction::kSum) == doctest::Approx(expected).epsilon(1e-7));
  CHECK(naive_loss(f, f, 1.0, false) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(contrastive_loss_value(f, f, 0.0f, Reduction::kMean) == doctest::Approx(expected / 2));

  std::mt19937_64 rng(1);
  for (float s : {-2.0f, 0.0f, 4.6f}) {
    CHECK(contrastive_loss_value(unit_rows(1, 5, rng), unit_rows(1, 5, rng), s, Reduction::kSum) == 0.0);
  }
}

TEST_CASE("contrastive loss matches the naive oracle") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng() % 8, d = 1 + rng() % 16;
    const auto p = unit_rows(b, d, rng), x = unit_rows(b, d, rng);
    const float s = std::uniform_real_distribution<float>(0.0f, 4.6f)(rng);
    const double tau = std::exp(-double(s));
    CHECK(std::abs(contrastive_loss_value(p, x, s, Reduction::kSum) - naive_loss(p, x, tau, false)) < 1e-6);
    CHECK(std::abs(contrastive_loss_value(p, x, s, Reduction::kMean) - naive_loss(p, x, tau, true)) < 1e-6);
  }
}

TEST_CASE("symmetry and permutation equivariance") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 2 + rng() % 7, d = 2 + rng() % 15;
    const auto p = unit_rows(b, d, rng), x = unit_rows(b, d, rng), t = unit_rows(b, d, rng);
    const double l = contrastive_loss_value(p, x, 2.0f, Reduction::kSum);
    CHECK(std::abs(contrastive_loss_value(x, p, 2.0f, Reduction::kSum) - l) < 1e-6);
    std::vector<std::size_t> perm(b);
    for (std::size_t i = 0; i < b; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    const double total = total_value(p, x, t, {}, 2.0f);
    CHECK(std::abs(total_value(permute_rows(p, perm), permute_rows(x, perm), permute_rows(t, perm),
                               {}, 2.0f) - total) < 1e-6);
  }
}

TEST_CASE("perfect alignment at tau = 0.01") {
  auto f = ag::Tensor::zeros(4, 6);
  for (std::size_t i = 0; i < 4; ++i) f.at(i, i) = 1.0f;
  const float s = static_cast<float>(std::log(100.0));
  CHECK(contrastive_loss_value(f, f, s, Reduction::kSum) < 1e-3);
  CHECK(total_value(f, f, f, {}, s) < 1e-3);
}

TEST_CASE("total_loss recomposition") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t b = 2 + rng() % 7, d = 2 + rng() % 15;
    const auto p = unit_rows(b, d, rng), i = unit_rows(b, d, rng), t = unit_rows(b, d, rng);
    const double li = contrastive_loss_value(p, i, 1.5f, Reduction::kSum);
    const double lt = contrastive_loss_value(p, t, 1.5f, Reduction::kSum);
    CHECK(std::abs(total_value(p, i, t, {}, 1.5f) - (li + lt)) < 1e-6);
    CHECK(std::abs(total_value(p, i, i, {}, 1.5f) - 2 * li) < 1e-6);
    CHECK(std::abs(total_value(p, i, t, {1.0f, 0.0f}, 1.5f) - li) < 1e-6);
    CHECK(std::abs(total_value(p, i, t, {0.5f, 2.0f}, 1.5f) - (0.5 * li + 2 * lt)) < 1e-5);
  }
}

TEST_CASE("non-unit rows are rejected") {
  const auto good = ag::Tensor::from(2, 2, {1, 0, 0, 1});
  const auto bad = ag::Tensor::from(2, 2, {1, 0, 0, 0.5f});
  CHECK_THROWS_AS(contrastive_loss_value(good, bad, 0.0f, Reduction::kSum), InvariantError);
  const auto wide = ag::Tensor::from(2, 3, {1, 0, 0, 0, 1, 0});
  CHECK_THROWS_AS(contrastive_loss_value(good, wide, 0.0f, Reduction::kSum), ShapeError);
}

TEST_CASE("logit scale") {
  const auto ls = LogitScale::from_tau(0.07f);
  CHECK(ls.tau() == doctest::Approx(0.07f));
  CHECK(ls.scale() == doctest::Approx(1.0 / 0.07));
  auto big = LogitScale::from_tau(0.001f);
  big.clamp(100.0f);
  CHECK(big.scale() <= 100.0f * (1 + 1e-6f));
  CHECK(big.tau() > 0.0f);
  CHECK_THROWS_AS(LogitScale::from_tau(0.0f), ConfigError);
}

TEST_CASE("sample_batch") {
  Fixture fx;
  const auto& m = fx.manifest();
  std::mt19937_64 rng(1);
  BatchOptions opt;
  opt.point_budget = 32;

  SUBCASE("exhaustive draw covers every shape once") {
    const auto b = sample_batch(m, fx.tables, fx.store, m.shapes.size(), rng, opt);
    auto s = b.shapes;
    std::sort(s.begin(), s.end());
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(s[i] == i);
    for (const auto& c : b.clouds) CHECK(c.size() == 32);
  }
  SUBCASE("features follow the chosen view") {
    const auto b = sample_batch(m, fx.tables, fx.store, 5, rng, opt);
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& view = m.shapes[b.shapes[i]].views[b.views[i]];
      const auto img = fx.tables.images.row(view.image_row);
      CHECK(std::equal(img.begin(), img.end(), &b.image.data[i * 16]));
      const auto top = embedstore::select_topk(view, 1, fx.tables.images, fx.tables.texts);
      CHECK(std::equal(top.begin(), top.end(), &b.text.data[i * 16]));
    }
  }
  SUBCASE("single view is always chosen") {
    auto one = m;
    for (auto& s : one.shapes) s.views.resize(1);
    for (int k = 0; k < 20; ++k) {
      const auto b = sample_batch(one, fx.tables, fx.store, 3, rng, opt);
      for (auto v : b.views) CHECK(v == 0);
    }
  }
  SUBCASE("view frequencies are uniform") {
    embedstore::TripletManifest single;
    single.shapes.push_back(m.shapes[0]);
    single.shapes.push_back(m.shapes[1]);
    REQUIRE(single.shapes[0].views.size() == 4);
    BatchOptions light;
    light.point_budget = 4;
    light.subsample = Subsample::kTruncate;
    std::vector<double> count(4, 0);
    const int draws = 10000;
    for (int k = 0; k < draws; ++k) {
      const auto b = sample_batch(single, fx.tables, fx.store, 2, rng, light);
      for (std::size_t i = 0; i < 2; ++i) {
        if (b.shapes[i] == 0) count[b.views[i]] += 1;
      }
    }
    for (double c : count) CHECK(std::abs(c / draws - 0.25) < 0.02);
  }
  SUBCASE("deterministic and independent of worker count") {
    BatchOptions aug = opt;
    aug.augment.rotate_z = true;
    aug.augment.jitter_sigma = 0.01f;
    aug.augment.dropout_rate = 0.1f;
    std::mt19937_64 r1(7), r2(7);
    const auto a = sample_batch(m, fx.tables, fx.store, 8, r1, aug);
    aug.workers = 4;
    const auto b = sample_batch(m, fx.tables, fx.store, 8, r2, aug);
    CHECK(a.shapes == b.shapes);
    CHECK(a.views == b.views);
    for (std::size_t i = 0; i < 8; ++i) CHECK(a.clouds[i].points == b.clouds[i].points);
    CHECK(r1() == r2());
  }
  SUBCASE("errors name the shape") {
    CHECK_THROWS_AS(sample_batch(m, fx.tables, fx.store, m.shapes.size() + 1, rng, opt), DataError);
    auto bad = m;
    bad.shapes[0].views[0].image_row = 100000;
    for (auto& s : bad.shapes) s.views.resize(1);
    bad.shapes.resize(1);
    try {
      sample_batch(bad, fx.tables, fx.store, 1, rng, opt);
      FAIL("expected InvariantError");
    } catch (const InvariantError& e) {
      CHECK(std::string(e.what()).find(bad.shapes[0].shape_id) != std::string::npos);
    }
    CloudStore empty(tmp / "missing");
    try {
      sample_batch(m, fx.tables, empty, 1, rng, opt);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("not found") != std::string::npos);
    }
  }
}

TEST_CASE("fit_budget") {
  std::mt19937_64 rng(5);
  geometry::PointCloud pc;
  for (int i = 0; i < 50; ++i) pc.points.push_back({float(i), 0, 0});
  CHECK(fit_budget(pc, 100, Subsample::kFps).points == pc.points);
  const auto t = fit_budget(pc, 3, Subsample::kTruncate);
  CHECK(t.points == std::vector<geometry::Vec3>{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}});
  const auto f = fit_budget(pc, 3, Subsample::kFps);
  CHECK(f.points == std::vector<geometry::Vec3>{{0, 0, 0}, {49, 0, 0}, {24, 0, 0}});
}

TEST_CASE("training loop") {
  Fixture fx;

  SUBCASE("lr = 0 leaves parameters unchanged") {
    fx.config.adam.lr = 0.0f;
    const auto r = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
    const auto init = model::init_params(fx.encoder, fx.config.seed);
    for (std::size_t i = 0; i < init.tensors.size(); ++i) {
      CHECK(r.checkpoint.params.tensors[i].tensor.data == init.tensors[i].tensor.data);
    }
    CHECK(r.checkpoint.logit_scale.tau() == doctest::Approx(0.07f));
  }
  SUBCASE("same seed gives the same digest") {
    auto a = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
    auto b = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
    CHECK(a.checkpoint.digest == b.checkpoint.digest);
    fx.config.batch.workers = 3;
    auto c = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
    CHECK(a.checkpoint.digest == c.checkpoint.digest);
    fx.config.seed += 1;
    auto d = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
    CHECK(a.checkpoint.digest != d.checkpoint.digest);
    REQUIRE(a.log.size() == 5);
    CHECK(a.log[4].step == 4);
  }
  SUBCASE("tau stays positive and clamped") {
    fx.config.adam.lr = 0.05f;
    fx.config.max_logit_scale = 15.0f;
    fx.config.steps = 8;
    const auto r = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
    for (const auto& rec : r.log) {
      CHECK(rec.tau > 0.0);
      CHECK(1.0 / rec.tau <= 15.0 * (1 + 1e-6));
    }
  }
  SUBCASE("non-finite loss aborts with a recovery checkpoint") {
    std::filesystem::create_directories(tmp);
    const auto path = tmp / "recovery.uckp";
    std::filesystem::remove(path);
    for (std::size_t i = 0; i < fx.bundle.dataset.shapes.size(); ++i) {
      auto pc = fx.bundle.clouds[i];
      for (auto& q : pc.points) q = {NAN, NAN, NAN};
      fx.store.put(synth::cloud_path(fx.bundle.dataset.shapes[i]), pc);
    }
    TrainHooks hooks;
    hooks.recovery_path = path;
    try {
      train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config, hooks);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
    CHECK(load_checkpoint(path).step == 0);
  }
  SUBCASE("config errors") {
    fx.config.batch_size = 1;
    CHECK_THROWS_AS(train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config), ConfigError);
    fx.config.batch_size = 100;
    CHECK_THROWS_AS(train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config), ConfigError);
    fx.config.batch_size = 4;
    fx.encoder = model::EncoderConfig::for_dim(32);
    CHECK_THROWS_AS(train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config), ConfigError);
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  Fixture fx;
  fx.config.steps = 3;
  auto r = train(fx.manifest(), fx.tables, fx.store, fx.encoder, fx.config);
  auto& ck = r.checkpoint;
  const auto bytes = encode_checkpoint(ck);
  auto back = decode_checkpoint(bytes, "mem");
  CHECK(back.digest == ck.digest);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.step == 3);
  CHECK(back.rng_state == ck.rng_state);
  CHECK(back.encoder.point_widths == fx.encoder.point_widths);
  CHECK(back.train.batch_size == 4);

  std::filesystem::create_directories(tmp);
  save_checkpoint(ck, tmp / "c.uckp");
  const auto loaded = load_checkpoint(tmp / "c.uckp");
  std::vector<geometry::PointCloud> clouds(fx.bundle.clouds.begin(), fx.bundle.clouds.begin() + 6);
  const auto before = model::encode(ck.params, ck.encoder, clouds);
  const auto after = model::encode(loaded.params, loaded.encoder, clouds);
  CHECK(std::memcmp(before.data.data(), after.data.data(), before.data.size() * 4) == 0);

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(decode_checkpoint(flipped, "flip"), CorruptionError);
  const std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 7);
  CHECK_THROWS_AS(decode_checkpoint(cut, "cut"), CorruptionError);
  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic, "magic"), BadMagicError);
  CHECK_THROWS_AS(load_checkpoint(tmp / "nope.uckp"), DataError);
}

TEST_CASE("loss csv") {
  std::vector<LossRecord> log{{0, 1.5, 0.75, 0.75, 0.07}, {1, 1.25, 0.5, 0.75, 0.0625}};
  std::ostringstream os;
  write_loss_csv(log, os);
  const auto text = os.str();
  CHECK(text.rfind("step,loss_total,loss_p2i,loss_p2t,tau\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("\n1,1.25,0.5,0.75,0.0625") != std::string::npos);
}
