#include "ulip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ulip/errors.hpp"
#include "ulip/optim.hpp"

namespace ulip::eval {

void LabelEmbeddings::validate(std::uint32_t dim) const {
  if (count() < 2) throw InvariantError("labels: need at least 2 categories");
  if (table.dim != dim) {
    throw InvariantError("labels: dim " + std::to_string(table.dim) + " != feature dim " +
                         std::to_string(dim));
  }
  if (!names.empty() && names.size() != count()) {
    throw InvariantError("labels: " + std::to_string(names.size()) + " names for " +
                         std::to_string(count()) + " rows");
  }
}

Predictions zero_shot_classify(const ag::Tensor& features, const LabelEmbeddings& labels,
                               std::size_t k) {
  labels.validate(static_cast<std::uint32_t>(features.cols()));
  const std::size_t c = labels.count();
  const std::size_t keep = std::min(k, c);
  Predictions out(features.rows());
  std::vector<float> scores(c);
  std::vector<std::uint32_t> order(c);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      scores[j] = embedstore::clip_score(features.row(i), labels.table.row(j));
    }
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return scores[a] > scores[b]; });
    out[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return out;
}

EvalReport compute_metrics(const Predictions& predictions, std::span<const std::uint32_t> truth,
                           std::size_t num_classes) {
  if (predictions.empty()) throw DataError("compute_metrics: empty input");
  if (predictions.size() != truth.size()) {
    throw DataError("compute_metrics: " + std::to_string(predictions.size()) +
                    " predictions for " + std::to_string(truth.size()) + " labels");
  }
  EvalReport r;
  r.samples = truth.size();
  r.confusion.assign(num_classes, std::vector<std::uint64_t>(num_classes, 0));
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& p = predictions[i];
    if (p.empty()) throw DataError("compute_metrics: empty prediction list at " + std::to_string(i));
    if (truth[i] >= num_classes || p[0] >= num_classes) {
      throw DataError("compute_metrics: label out of range at sample " + std::to_string(i));
    }
    r.confusion[truth[i]][p[0]] += 1;
    if (p[0] == truth[i]) ++hit1;
    const std::size_t depth = std::min<std::size_t>(5, p.size());
    if (std::find(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(depth), truth[i]) !=
        p.begin() + static_cast<std::ptrdiff_t>(depth)) {
      ++hit5;
    }
  }
  const double n = static_cast<double>(truth.size());
  r.top1 = static_cast<double>(hit1) / n;
  r.top5 = static_cast<double>(hit5) / n;
  r.overall_accuracy = r.top1;
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto row_total =
        std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::uint64_t{0});
    if (row_total == 0) continue;
    recall_sum += static_cast<double>(r.confusion[c][c]) / static_cast<double>(row_total);
    ++present;
  }
  r.class_average_accuracy = recall_sum / static_cast<double>(present);
  return r;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  j["top1"] = r.top1;
  j["top5"] = r.top5;
  j["overall_accuracy"] = r.overall_accuracy;
  j["class_average_accuracy"] = r.class_average_accuracy;
  j["confusion"] = r.confusion;
  return j.dump(2) + "\n";
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  os.precision(9);
  os << "samples,top1,top5,overall_accuracy,class_average_accuracy\n";
  os << r.samples << ',' << r.top1 << ',' << r.top5 << ',' << r.overall_accuracy << ','
     << r.class_average_accuracy << '\n';
  return os.str();
}

std::string confusion_csv(const EvalReport& r, std::span<const std::string> names) {
  std::ostringstream os;
  const std::size_t c = r.confusion.size();
  auto name = [&](std::size_t i) { return i < names.size() ? names[i] : std::to_string(i); };
  os << "truth\\predicted";
  for (std::size_t j = 0; j < c; ++j) os << ',' << name(j);
  os << '\n';
  for (std::size_t i = 0; i < c; ++i) {
    os << name(i);
    for (std::size_t j = 0; j < c; ++j) os << ',' << r.confusion[i][j];
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Probes

ag::Tensor LinearClassifier::logits(const ag::Tensor& x) const {
  ag::Graph g;
  const auto y = g.add(g.matmul(g.constant(x), g.constant(weight.tensor)), g.constant(bias.tensor));
  return g.value(y);
}

Predictions LinearClassifier::predict(const ag::Tensor& x, std::size_t k) const {
  const ag::Tensor z = logits(x);
  const std::size_t c = z.cols();
  Predictions out(z.rows());
  std::vector<std::uint32_t> order(c);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    std::iota(order.begin(), order.end(), 0u);
    const auto row = z.row(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b]; });
    out[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, c)));
  }
  return out;
}

namespace {

void check_labels(std::span<const std::uint32_t> y, std::size_t num_classes, const char* what) {
  if (y.empty()) throw DataError(std::string(what) + ": empty split");
  if (num_classes < 2) throw DataError(std::string(what) + ": need at least 2 classes");
  std::set<std::uint32_t> seen;
  for (auto v : y) {
    if (v >= num_classes) throw DataError(std::string(what) + ": label out of range");
    seen.insert(v);
  }
  if (seen.size() < 2) {
    throw DataError(std::string(what) + ": training set has a single class");
  }
}

LinearClassifier init_head(std::size_t dim, std::size_t num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const float bound = static_cast<float>(std::sqrt(6.0 / static_cast<double>(dim + num_classes)));
  std::uniform_real_distribution<float> dist(-bound, bound);
  LinearClassifier h;
  h.weight = {"probe.weight", ag::Tensor::zeros(dim, num_classes)};
  for (auto& v : h.weight.tensor.data) v = dist(rng);
  h.weight.tensor.set_requires_grad(true);
  h.bias = {"probe.bias", ag::Tensor::zeros(1, num_classes)};
  h.bias.tensor.set_requires_grad(true);
  return h;
}

// Mean softmax cross-entropy of logits against labels.
ag::Var cross_entropy(ag::Graph& g, ag::Var logits, std::span<const std::uint32_t> y,
                      std::size_t num_classes) {
  ag::Tensor onehot = ag::Tensor::zeros(y.size(), num_classes);
  for (std::size_t i = 0; i < y.size(); ++i) onehot.at(i, y[i]) = 1.0f;
  const ag::Var picked = g.sum_all(g.mul(g.log_softmax_rows(logits), g.constant(onehot)));
  return g.scale(picked, g.constant(ag::Tensor::scalar(-1.0f / static_cast<float>(y.size()))));
}

std::vector<std::size_t> minibatch(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (batch == 0 || batch >= n) return idx;
  for (std::size_t i = 0; i < batch; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(batch);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

ProbeResult linear_probe(const ag::Tensor& train_x, std::span<const std::uint32_t> train_y,
                         const ag::Tensor& test_x, std::span<const std::uint32_t> test_y,
                         std::size_t num_classes, const ProbeConfig& config) {
  check_labels(train_y, num_classes, "linear_probe");
  if (train_x.rows() != train_y.size() || test_x.rows() != test_y.size()) {
    throw DataError("linear_probe: feature/label count mismatch");
  }
  const std::size_t n = train_y.size(), d = train_x.cols();

  std::vector<std::size_t> canon(n);
  std::iota(canon.begin(), canon.end(), std::size_t{0});
  std::sort(canon.begin(), canon.end(), [&](std::size_t a, std::size_t b) {
    if (train_y[a] != train_y[b]) return train_y[a] < train_y[b];
    const auto ra = train_x.row(a), rb = train_x.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  ag::Tensor xs = ag::Tensor::zeros(n, d);
  std::vector<std::uint32_t> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(train_x.row(canon[i]).begin(), train_x.row(canon[i]).end(),
              xs.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    ys[i] = train_y[canon[i]];
  }

  ProbeResult res;
  res.head = init_head(d, num_classes, config.seed);
  std::mt19937_64 rng(config.seed ^ 0x51ed270b2a9d4f0bULL);
  ag::AdamState adam;
  ag::AdamHyper hyper;
  hyper.lr = config.lr;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = minibatch(n, config.batch_size, rng);
    ag::Tensor bx = ag::Tensor::zeros(idx.size(), d);
    std::vector<std::uint32_t> by(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy(xs.row(idx[i]).begin(), xs.row(idx[i]).end(),
                bx.data.begin() + static_cast<std::ptrdiff_t>(i * d));
      by[i] = ys[idx[i]];
    }
    res.head.weight.tensor.zero_grad();
    res.head.bias.tensor.zero_grad();
    ag::Graph g;
    const auto logits = g.add(g.matmul(g.constant(std::move(bx)), g.leaf(res.head.weight.tensor)),
                              g.leaf(res.head.bias.tensor));
    g.backward(cross_entropy(g, logits, by, num_classes));
    std::array<ag::Parameter, 2> ps{std::move(res.head.weight), std::move(res.head.bias)};
    ag::adam_step(ps, adam, hyper);
    res.head.weight = std::move(ps[0]);
    res.head.bias = std::move(ps[1]);
  }
  res.train_report = compute_metrics(res.head.predict(train_x), train_y, num_classes);
  if (!test_y.empty()) {
    res.test_report = compute_metrics(res.head.predict(test_x), test_y, num_classes);
  }
  return res;
}

ProbeResult finetune(const model::EncoderParams& encoder, const model::EncoderConfig& enc_config,
                     std::span<const geometry::PointCloud> train_clouds,
                     std::span<const std::uint32_t> train_y,
                     std::span<const geometry::PointCloud> test_clouds,
                     std::span<const std::uint32_t> test_y, std::size_t num_classes,
                     const ProbeConfig& config) {
  check_labels(train_y, num_classes, "finetune");
  if (train_clouds.size() != train_y.size() || test_clouds.size() != test_y.size()) {
    throw DataError("finetune: cloud/label count mismatch");
  }
  const std::size_t n = train_y.size();

  // Canonical order by label, then by the embedding of the initial encoder.
  const ag::Tensor init_emb = model::encode(encoder, enc_config, train_clouds);
  std::vector<std::size_t> canon(n);
  std::iota(canon.begin(), canon.end(), std::size_t{0});
  std::sort(canon.begin(), canon.end(), [&](std::size_t a, std::size_t b) {
    if (train_y[a] != train_y[b]) return train_y[a] < train_y[b];
    const auto ra = init_emb.row(a), rb = init_emb.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  });
  std::vector<geometry::PointCloud> clouds(n);
  std::vector<std::uint32_t> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    clouds[i] = train_clouds[canon[i]];
    ys[i] = train_y[canon[i]];
  }

  ProbeResult res;
  res.encoder = encoder;
  for (auto& p : res.encoder.tensors) p.tensor.set_requires_grad(true);
  res.head = init_head(enc_config.embed_dim, num_classes, config.seed);
  std::mt19937_64 rng(config.seed ^ 0x51ed270b2a9d4f0bULL);
  ag::AdamState head_adam, enc_adam;
  ag::AdamHyper head_hyper, enc_hyper;
  head_hyper.lr = config.lr;
  enc_hyper.lr = config.encoder_lr;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = minibatch(n, config.batch_size, rng);
    std::vector<geometry::PointCloud> bc;
    std::vector<std::uint32_t> by;
    for (auto i : idx) {
      bc.push_back(clouds[i]);
      by.push_back(ys[i]);
    }
    for (auto& p : res.encoder.tensors) p.tensor.zero_grad();
    res.head.weight.tensor.zero_grad();
    res.head.bias.tensor.zero_grad();
    ag::Graph g;
    std::vector<ag::Var> leaves;
    for (auto& p : res.encoder.tensors) leaves.push_back(g.leaf(p.tensor));
    const auto emb = model::encode_graph<float>(g, enc_config, leaves, bc);
    const auto logits =
        g.add(g.matmul(emb, g.leaf(res.head.weight.tensor)), g.leaf(res.head.bias.tensor));
    g.backward(cross_entropy(g, logits, by, num_classes));
    std::array<ag::Parameter, 2> ps{std::move(res.head.weight), std::move(res.head.bias)};
    ag::adam_step(ps, head_adam, head_hyper);
    res.head.weight = std::move(ps[0]);
    res.head.bias = std::move(ps[1]);
    ag::adam_step(res.encoder.tensors, enc_adam, enc_hyper);
  }
  res.train_report = compute_metrics(
      res.head.predict(model::encode(res.encoder, enc_config, train_clouds)), train_y, num_classes);
  if (!test_y.empty()) {
    res.test_report = compute_metrics(
        res.head.predict(model::encode(res.encoder, enc_config, test_clouds)), test_y,
        num_classes);
  }
  return res;
}

}  // namespace ulip::eval
