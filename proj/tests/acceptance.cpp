// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance            run criteria 1-9
//   acceptance 2 4 9      run a subset

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ulip/embedstore.hpp"
#include "ulip/errors.hpp"
#include "ulip/eval.hpp"
#include "ulip/geometry.hpp"
#include "ulip/gradcheck_suite.hpp"
#include "ulip/model.hpp"
#include "ulip/synth.hpp"
#include "ulip/training.hpp"

using namespace ulip;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

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

geometry::PointCloud random_cloud(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(-1, 1);
  geometry::PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) pc.points.push_back({u(rng), u(rng), u(rng)});
  return pc;
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  std::size_t cases = 0, failed = 0;
  double worst = 0;
  auto take = [&](const ag::SuiteCase& c) {
    ++cases;
    if (!c.report.pass || !c.report.valid) {
      ++failed;
      std::cout << "    fail: " << c.name << " " << c.report.note << "\n";
    }
    for (const auto& e : c.report.entries) worst = std::max(worst, e.max_rel_error);
  };
  for (const auto& c : ag::run_op_suite(0)) take(c);
  take(ag::run_composition_check(0));
  const double secs = seconds_since(t0);
  return {failed == 0 && secs < 10.0,
          std::to_string(cases - failed) + "/" + std::to_string(cases) +
              " cases, worst rel err " + fmt("%.2e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

// Symmetric InfoNCE index by index in long double.
double naive_loss(const ag::Tensor& p, const ag::Tensor& x, double tau) {
  const std::size_t b = p.rows(), d = p.cols();
  long double total = 0;
  auto logit = [&](std::size_t i, std::size_t j) {
    long double s = 0;
    for (std::size_t k = 0; k < d; ++k) s += (long double)p.at(i, k) * x.at(j, k);
    return s / tau;
  };
  for (std::size_t i = 0; i < b; ++i) {
    long double row = 0, col = 0;
    for (std::size_t j = 0; j < b; ++j) {
      row += std::exp(logit(i, j));
      col += std::exp(logit(j, i));
    }
    total += std::log(std::exp(logit(i, i)) / row) + std::log(std::exp(logit(i, i)) / col);
  }
  return static_cast<double>(-0.5L * total);
}

Outcome loss_oracle() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 1 + rng() % 8, d = 1 + rng() % 16;
    const auto p = unit_rows(b, d, rng), x = unit_rows(b, d, rng);
    const float s = std::uniform_real_distribution<float>(0.0f, 4.6f)(rng);
    const double got = training::contrastive_loss_value(p, x, s, training::Reduction::kSum);
    worst = std::max(worst, std::abs(got - naive_loss(p, x, std::exp(-double(s)))));
  }
  const double b1 = training::contrastive_loss_value(unit_rows(1, 4, rng), unit_rows(1, 4, rng),
                                                     2.0f, training::Reduction::kSum);
  const auto f = ag::Tensor::from(2, 2, {1, 0, 0, 1});
  const double b2 = training::contrastive_loss_value(f, f, 0.0f, training::Reduction::kSum);
  const bool pass = worst < 1e-6 && b1 == 0.0 && std::abs(b2 - 0.62652) < 5e-6;
  return {pass, "max |err| " + fmt("%.2e", worst) + " over 100 instances, B=1 loss " +
                    fmt("%g", b1) + ", B=2 loss " + fmt("%.6f", b2)};
}

Outcome invariance() {
  std::mt19937_64 rng(3);
  const auto cfg = model::EncoderConfig::for_dim(64);
  std::size_t ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto params = model::init_params(cfg, trial);
    const auto pc = random_cloud(8 + rng() % 300, rng);
    auto perm = pc;
    std::shuffle(perm.points.begin(), perm.points.end(), rng);
    auto dup = pc;
    dup.points.insert(dup.points.end(), pc.points.begin(), pc.points.end());
    std::shuffle(dup.points.begin(), dup.points.end(), rng);
    const std::vector<geometry::PointCloud> a{pc}, b{perm}, c{dup};
    const auto fa = model::encode(params, cfg, a);
    const auto fb = model::encode(params, cfg, b);
    const auto fc = model::encode(params, cfg, c);
    const std::size_t bytes = fa.data.size() * sizeof(float);
    ok += std::memcmp(fa.data.data(), fb.data.data(), bytes) == 0 &&
          std::memcmp(fa.data.data(), fc.data.data(), bytes) == 0;
  }
  return {ok == 100, std::to_string(ok) + "/100 trials bitwise identical"};
}

std::vector<std::size_t> brute_fps(const geometry::PointCloud& pc, std::size_t m,
                                   std::size_t start) {
  std::vector<std::size_t> sel{start};
  std::vector<bool> taken(pc.size(), false);
  taken[start] = true;
  while (sel.size() < m) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      if (taken[i]) continue;
      double dmin = INFINITY;
      for (auto s : sel) {
        double d = 0;
        for (int k = 0; k < 3; ++k) {
          const double t = double(pc.points[i][k]) - double(pc.points[s][k]);
          d += t * t;
        }
        dmin = std::min(dmin, d);
      }
      if (dmin > best) {
        best = dmin;
        arg = i;
      }
    }
    sel.push_back(arg);
    taken[arg] = true;
  }
  return sel;
}

Outcome fps_and_ranking() {
  std::mt19937_64 rng(4);
  std::size_t fps_ok = 0, fps_n = 0;
  for (std::size_t n = 1; n <= 64; ++n) {
    for (int rep = 0; rep < 8; ++rep) {
      geometry::PointCloud pc;
      if (rep % 2) {
        std::uniform_int_distribution<int> g(0, 2);
        for (std::size_t i = 0; i < n; ++i) pc.points.push_back({float(g(rng)), float(g(rng)), float(g(rng))});
      } else {
        pc = random_cloud(n, rng);
      }
      const std::size_t m = 1 + rng() % n, start = rng() % n;
      ++fps_n;
      fps_ok += geometry::farthest_point_sample(pc, m, start) == brute_fps(pc, m, start);
    }
  }

  std::size_t rank_ok = 0, rank_n = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng() % 10, d = 2 + rng() % 8;
    embedstore::EmbeddingTable images, texts;
    images.dim = texts.dim = static_cast<std::uint32_t>(d);
    const auto im = unit_rows(1, d, rng);
    images.values = im.data;
    if (trial % 2) {
      // a few distinct rows reused: exact score ties
      const auto pool = unit_rows(3, d, rng);
      for (std::size_t i = 0; i < n; ++i) texts.append(pool.row(rng() % 3));
    } else {
      texts.values = unit_rows(n, d, rng).data;
    }
    embedstore::ViewRecord v;
    for (std::uint32_t i = 0; i < n; ++i) v.caption_rows.push_back(i);
    std::shuffle(v.caption_rows.begin(), v.caption_rows.end(), rng);

    std::vector<double> score(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) s += double(im.at(0, k)) * texts.row(v.caption_rows[i])[k];
      score[i] = s;
    }
    std::vector<std::uint32_t> oracle(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t before = 0;
      for (std::size_t j = 0; j < n; ++j) before += score[j] > score[i] || (score[j] == score[i] && j < i);
      oracle[before] = v.caption_rows[i];
    }
    bool ok = embedstore::rank_captions(v, images, texts) == oracle;
    for (std::size_t k = 1; k <= n && ok; ++k) {
      std::vector<double> mean(d, 0.0);
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += texts.row(oracle[i])[j];
      }
      double norm = 0;
      for (double m : mean) norm += m * m;
      norm = std::sqrt(norm);
      if (norm < 1e-6) continue;
      std::vector<float> got;
      try {
        got = embedstore::select_topk(v, k, images, texts);
      } catch (const NumericalError&) {
        ok = false;
        break;
      }
      for (std::size_t j = 0; j < d; ++j) {
        const double want = k == 1 ? double(texts.row(oracle[0])[j]) : mean[j] / norm;
        ok = ok && std::abs(got[j] - want) < (k == 1 ? 0.0 : 1e-6) + 1e-12;
      }
    }
    ++rank_n;
    rank_ok += ok;
  }
  return {fps_ok == fps_n && rank_ok == rank_n,
          "fps " + std::to_string(fps_ok) + "/" + std::to_string(fps_n) + ", ranking+top-k " +
              std::to_string(rank_ok) + "/" + std::to_string(rank_n)};
}

// ---------------------------------------------------------------------------
// Synthetic end-to-end runs

struct RunSettings {
  std::uint64_t seed = 0;
  std::size_t views = 12;
  std::size_t wrong_captions = 0;
  std::size_t caption_topk = 1;
};

struct RunResult {
  eval::EvalReport report;
  double seconds = 0;
  double first_loss = 0;
  double last_loss = 0;
};

RunResult synthetic_run(const RunSettings& rs) {
  const auto t0 = Clock::now();
  synth::SynthSpec spec;  // 8 categories, 35 + 10 per class, D = 64, sigma 0.05, 2048 points
  spec.views = rs.views;
  spec.captions_per_view = 10;
  spec.wrong_captions = rs.wrong_captions;
  spec.seed = rs.seed;
  const auto bundle = synth::build_bundle(spec);

  training::CloudStore store;
  std::vector<geometry::PointCloud> test_clouds;
  std::vector<std::uint32_t> test_y;
  for (std::size_t i = 0; i < bundle.dataset.shapes.size(); ++i) {
    const auto& s = bundle.dataset.shapes[i];
    store.put(synth::cloud_path(s), bundle.clouds[i]);
    if (!s.train) {
      test_clouds.push_back(bundle.clouds[i]);
      test_y.push_back(s.label);
    }
  }
  training::DataTables tables{bundle.mock.images, bundle.mock.texts};
  const auto encoder = model::EncoderConfig::for_dim(spec.dim);
  training::TrainConfig cfg;  // B = 32, 300 steps, lr 1e-3
  cfg.seed = rs.seed;
  cfg.batch.caption_topk = rs.caption_topk;
  const auto result = training::train(bundle.mock.train, tables, store, encoder, cfg);

  const auto feats = model::encode(result.checkpoint.params, encoder, test_clouds);
  const auto preds = eval::zero_shot_classify(feats, bundle.mock.labels, 5);
  RunResult r;
  r.report = eval::compute_metrics(preds, test_y, bundle.mock.labels.count());
  r.seconds = seconds_since(t0);
  auto window_mean = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += result.log[i].total;
    return s / static_cast<double>(to - from);
  };
  r.first_loss = window_mean(0, 50);
  r.last_loss = window_mean(result.log.size() - 50, result.log.size());
  return r;
}

Outcome end_to_end() {
  bool pass = true;
  std::ostringstream os;
  for (std::uint64_t seed : {0, 1, 2}) {
    const auto r = synthetic_run({seed});
    const bool ok = r.report.top1 >= 0.85 && r.report.top5 >= 0.99 && r.seconds < 180.0 &&
                    r.last_loss < r.first_loss;
    pass = pass && ok;
    os << (seed ? "; " : "") << "seed " << seed << ": top1 " << fmt("%.3f", r.report.top1)
       << " top5 " << fmt("%.3f", r.report.top5) << " loss " << fmt("%.3f", r.first_loss) << "->"
       << fmt("%.3f", r.last_loss) << " " << fmt("%.0f", r.seconds) << " s";
  }
  return {pass, os.str()};
}

double mean_top1(RunSettings rs, std::size_t seeds, std::ostream& os) {
  double sum = 0;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    rs.seed = 100 + s;
    const auto r = synthetic_run(rs);
    sum += r.report.top1;
    std::cout << "    views " << rs.views << " wrong " << rs.wrong_captions << " k "
              << rs.caption_topk << " seed " << rs.seed << ": top1 " << fmt("%.4f", r.report.top1)
              << " (" << fmt("%.0f", r.seconds) << " s)" << std::endl;
  }
  const double m = sum / static_cast<double>(seeds);
  os << fmt("%.4f", m);
  return m;
}

Outcome views_trend() {
  std::ostringstream os;
  os << "mean top1 views 1/2/8: ";
  RunSettings rs;
  rs.views = 1;
  const double v1 = mean_top1(rs, 5, os);
  os << " / ";
  rs.views = 2;
  const double v2 = mean_top1(rs, 5, os);
  os << " / ";
  rs.views = 8;
  const double v8 = mean_top1(rs, 5, os);
  const double slack = 0.01;
  return {v2 >= v1 - slack && v8 >= v2 - slack, os.str()};
}

Outcome topk_trend() {
  std::ostringstream os;
  os << "2/10 wrong captions, mean top1 k=1 vs k=10: ";
  RunSettings rs;
  rs.wrong_captions = 2;
  rs.caption_topk = 1;
  const double k1 = mean_top1(rs, 5, os);
  os << " vs ";
  rs.caption_topk = 10;
  const double k10 = mean_top1(rs, 5, os);
  return {k1 >= k10, os.str()};
}

// ---------------------------------------------------------------------------

template <class E, class F>
bool throws_as(F&& f) {
  try {
    f();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome determinism_and_formats() {
  std::vector<std::string> failures;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  };

  synth::SynthSpec spec;
  spec.categories = {synth::Primitive::kSphere, synth::Primitive::kCube, synth::Primitive::kTorus,
                     synth::Primitive::kCone};
  spec.train_per_class = 6;
  spec.test_per_class = 2;
  spec.dim = 32;
  spec.views = 4;
  spec.captions_per_view = 5;
  spec.points = 256;
  const auto bundle = synth::build_bundle(spec);
  training::CloudStore store;
  for (std::size_t i = 0; i < bundle.dataset.shapes.size(); ++i) {
    store.put(synth::cloud_path(bundle.dataset.shapes[i]), bundle.clouds[i]);
  }
  training::DataTables tables{bundle.mock.images, bundle.mock.texts};
  model::EncoderConfig enc = model::EncoderConfig::for_dim(32);
  enc.point_widths = {32, 64};
  enc.head_widths = {64, 32};
  training::TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.steps = 20;
  cfg.batch.point_budget = 128;
  cfg.batch.augment.rotate_z = true;
  cfg.batch.augment.jitter_sigma = 0.01f;
  auto a = training::train(bundle.mock.train, tables, store, enc, cfg);
  auto b = training::train(bundle.mock.train, tables, store, enc, cfg);
  expect(a.checkpoint.digest == b.checkpoint.digest, "checkpoint digests differ across runs");
  cfg.batch.workers = 4;
  auto c = training::train(bundle.mock.train, tables, store, enc, cfg);
  expect(a.checkpoint.digest == c.checkpoint.digest, "worker count changed the digest");

  // round trips
  const auto ck_bytes = training::encode_checkpoint(a.checkpoint);
  auto back = training::decode_checkpoint(ck_bytes, "ckpt");
  expect(training::encode_checkpoint(back) == ck_bytes, "checkpoint round trip");
  const auto f0 = model::encode(a.checkpoint.params, enc, bundle.clouds);
  const auto f1 = model::encode(back.params, back.encoder, bundle.clouds);
  expect(std::memcmp(f0.data.data(), f1.data.data(), f0.data.size() * 4) == 0,
         "reloaded checkpoint encodes differently");

  const auto upc = geometry::encode_point_cloud(bundle.clouds[0]);
  expect(geometry::encode_point_cloud(geometry::decode_point_cloud(upc, "upc")) == upc, "UPC1 round trip");
  expect(geometry::decode_point_cloud(upc, "upc").points == bundle.clouds[0].points, "UPC1 values");
  const auto ulp = embedstore::encode_table(bundle.mock.images);
  expect(embedstore::encode_table(embedstore::decode_table(ulp, "ulp")) == ulp, "ULP2 round trip");

  // corruption
  auto bad_magic = [](std::vector<std::uint8_t> v) {
    v[0] ^= 0x20;
    return v;
  };
  auto truncate = [](const std::vector<std::uint8_t>& v, std::size_t drop) {
    return std::vector<std::uint8_t>(v.begin(), v.end() - static_cast<std::ptrdiff_t>(drop));
  };
  expect(throws_as<BadMagicError>([&] { geometry::decode_point_cloud(bad_magic(upc), "u"); }), "UPC1 magic");
  expect(throws_as<TruncatedError>([&] { geometry::decode_point_cloud(truncate(upc, 5), "u"); }), "UPC1 truncation");
  expect(throws_as<BadMagicError>([&] { embedstore::decode_table(bad_magic(ulp), "t"); }), "ULP2 magic");
  expect(throws_as<TruncatedError>([&] { embedstore::decode_table(truncate(ulp, 5), "t"); }), "ULP2 truncation");
  expect(throws_as<BadMagicError>([&] { training::decode_checkpoint(bad_magic(ck_bytes), "c"); }), "UCKP magic");
  expect(throws_as<CorruptionError>([&] { training::decode_checkpoint(truncate(ck_bytes, 5), "c"); }), "UCKP truncation");
  auto flipped = ck_bytes;
  flipped[flipped.size() / 3] ^= 0x01;
  expect(throws_as<CorruptionError>([&] { training::decode_checkpoint(flipped, "c"); }), "UCKP bit flip");

  std::string detail = failures.empty() ? "digests stable, round trips bit exact, corruption rejected"
                                        : "failed:";
  for (const auto& f : failures) detail += " [" + f + "]";
  return {failures.empty(), detail};
}

Outcome metrics() {
  std::mt19937_64 rng(9);
  std::size_t ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = 2 + rng() % 9, n = 1 + rng() % 80;
    std::vector<std::uint32_t> y(n);
    for (auto& v : y) v = static_cast<std::uint32_t>(rng() % (1 + rng() % c));
    eval::Predictions p(n);
    for (auto& row : p) {
      std::vector<std::uint32_t> ids(c);
      for (std::uint32_t k = 0; k < c; ++k) ids[k] = k;
      std::shuffle(ids.begin(), ids.end(), rng);
      ids.resize(std::min<std::size_t>(5, c));
      row = ids;
    }
    std::vector<double> hit(c, 0), cnt(c, 0);
    double t1 = 0, t5 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      cnt[y[i]] += 1;
      if (p[i][0] == y[i]) {
        t1 += 1;
        hit[y[i]] += 1;
      }
      if (std::find(p[i].begin(), p[i].end(), y[i]) != p[i].end()) t5 += 1;
    }
    double avg = 0, classes = 0;
    for (std::size_t k = 0; k < c; ++k) {
      if (cnt[k] > 0) {
        avg += hit[k] / cnt[k];
        classes += 1;
      }
    }
    const auto r = eval::compute_metrics(p, y, c);
    auto close = [](double a, double b) { return std::abs(a - b) < 1e-12; };
    ok += close(r.top1, t1 / n) && close(r.top5, t5 / n) && close(r.overall_accuracy, t1 / n) &&
          close(r.class_average_accuracy, avg / classes);
  }
  std::vector<std::uint32_t> y(100, 0);
  std::fill(y.begin() + 90, y.end(), 1u);
  const auto r = eval::compute_metrics(eval::Predictions(100, {0, 1}), y, 2);
  const bool hand = std::abs(r.overall_accuracy - 0.9) < 1e-12 &&
                    std::abs(r.class_average_accuracy - 0.5) < 1e-12;
  return {ok == 1000 && hand, std::to_string(ok) + "/1000 recounts agree, 90/10 case overall " +
                                  fmt("%.2f", r.overall_accuracy) + " class-avg " +
                                  fmt("%.2f", r.class_average_accuracy)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-9"};
  std::vector<int> only;
  app.add_option("criteria", only, "Subset of criteria to run");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"loss oracle equivalence", loss_oracle},
      {"permutation/duplicate invariance", invariance},
      {"FPS and ranking oracles", fps_and_ranking},
      {"end-to-end synthetic alignment", end_to_end},
      {"views-ablation trend", views_trend},
      {"top-k caption trend", topk_trend},
      {"determinism and formats", determinism_and_formats},
      {"metrics correctness", metrics},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": "
              << o.detail << " [" << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
