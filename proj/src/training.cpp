#include "ulip/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ulip/binio.hpp"
#include "ulip/config.hpp"
#include "ulip/errors.hpp"

namespace ulip::training {

namespace {

// Keep large per-step buffers on the heap between steps.
void retain_large_allocations() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace

namespace {

constexpr char kCheckpointMagic[] = "UCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void require_unit_rows(const ag::BasicTensor<T>& t, const char* what) {
  for (std::size_t i = 0; i < t.rows(); ++i) {
    double s = 0.0;
    for (auto v : t.row(i)) s += static_cast<double>(v) * v;
    if (!(std::abs(std::sqrt(s) - 1.0) <= 1e-3)) {
      throw InvariantError(std::string("contrastive_loss: ") + what + " row " +
                           std::to_string(i) + " is not unit norm (" +
                           std::to_string(std::sqrt(s)) + ")");
    }
  }
}

void write_tensor(binio::Writer& w, const std::string& name, const std::vector<std::size_t>& shape,
                  std::span<const float> data) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.f32s(data);
}

struct NamedBlob {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

NamedBlob read_tensor(binio::Reader& r) {
  NamedBlob b;
  b.name = r.str();
  const auto rank = r.u32();
  if (rank == 0 || rank > 4) throw FormatError(r.what() + ": bad tensor rank for " + b.name);
  std::size_t n = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    b.shape.push_back(r.u32());
    n *= b.shape.back();
  }
  b.data = r.f32s(n);
  return b;
}

}  // namespace

LogitScale LogitScale::from_tau(float tau) {
  if (!(tau > 0.0f)) throw ConfigError("logit scale: tau_init must be > 0");
  LogitScale ls;
  ls.s.tensor = ag::Tensor::scalar(static_cast<float>(std::log(1.0 / tau)));
  ls.s.tensor.set_requires_grad(true);
  return ls;
}

void clamp_log_scale(float& s, float max_scale) {
  const float cap = static_cast<float>(std::log(static_cast<double>(max_scale)));
  if (s > cap) s = cap;
}

void LogitScale::clamp(float max_scale) { clamp_log_scale(s.tensor.data[0], max_scale); }

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
  if (weights.image < 0.0f || weights.text < 0.0f) {
    throw ConfigError("train: loss weights must be >= 0");
  }
  if (!(adam.lr >= 0.0f)) throw ConfigError("train: lr must be >= 0");
  if (!(tau_init > 0.0f)) throw ConfigError("train: tau_init must be > 0");
  if (!(max_logit_scale > 0.0f)) throw ConfigError("train: tau_max must be > 0");
  if (batch.point_budget == 0) throw ConfigError("train: point_budget must be >= 1");
  if (batch.caption_topk == 0) throw ConfigError("train: caption_topk must be >= 1");
}

template <class T>
ag::Var contrastive_loss(ag::BasicGraph<T>& g, ag::Var fp, ag::Var fx, ag::Var log_scale,
                         Reduction reduction) {
  const auto& P = g.value(fp);
  const auto& X = g.value(fx);
  if (P.shape != X.shape) {
    throw ShapeError("contrastive_loss: feature shapes differ");
  }
  require_unit_rows(P, "3D feature");
  require_unit_rows(X, "paired feature");
  const std::size_t batch = P.rows();
  const ag::Var logits = g.scale(g.matmul(fp, g.transpose(fx)), g.exp_scalar(log_scale));
  const ag::Var rows = g.nll_diagonal(g.log_softmax_rows(logits));
  const ag::Var cols = g.nll_diagonal(g.log_softmax_rows(g.transpose(logits)));
  const double factor =
      reduction == Reduction::kMean ? 0.5 / static_cast<double>(batch) : 0.5;
  return g.scale(g.add(rows, cols), g.constant(ag::BasicTensor<T>::scalar(static_cast<T>(factor))));
}

template <class T>
LossTerms total_loss(ag::BasicGraph<T>& g, ag::Var fp, ag::Var fi, ag::Var ft,
                     ag::Var log_scale, const LossWeights& weights, Reduction reduction) {
  LossTerms out;
  out.p2i = contrastive_loss(g, fp, fi, log_scale, reduction);
  out.p2t = contrastive_loss(g, fp, ft, log_scale, reduction);
  const ag::Var wi = g.constant(ag::BasicTensor<T>::scalar(static_cast<T>(weights.image)));
  const ag::Var wt = g.constant(ag::BasicTensor<T>::scalar(static_cast<T>(weights.text)));
  out.total = g.add(g.scale(out.p2i, wi), g.scale(out.p2t, wt));
  return out;
}

double contrastive_loss_value(const ag::Tensor& fp, const ag::Tensor& fx, float log_scale,
                              Reduction reduction) {
  ag::BasicGraph<double> g;
  const ag::Var loss =
      contrastive_loss(g, g.constant(fp.cast<double>()), g.constant(fx.cast<double>()),
                       g.constant(ag::BasicTensor<double>::scalar(log_scale)), reduction);
  return g.value(loss).data[0];
}

// ---------------------------------------------------------------------------
// Data

const geometry::PointCloud& CloudStore::get(const embedstore::ShapeRecord& shape) {
  auto it = cache_.find(shape.point_cloud_path);
  if (it != cache_.end()) return it->second;
  const std::filesystem::path p = base_ / shape.point_cloud_path;
  if (!std::filesystem::exists(p)) {
    throw DataError("shape '" + shape.shape_id + "': point cloud file not found: " + p.string());
  }
  try {
    auto [pos, inserted] = cache_.emplace(shape.point_cloud_path, geometry::read_point_cloud(p));
    return pos->second;
  } catch (const DataError& e) {
    throw DataError("shape '" + shape.shape_id + "': " + e.what());
  }
}

void CloudStore::put(const std::string& path, geometry::PointCloud cloud) {
  cache_[path] = std::move(cloud);
}

geometry::PointCloud fit_budget(const geometry::PointCloud& pc, std::size_t budget,
                                Subsample mode) {
  if (pc.size() <= budget) return pc;
  if (mode == Subsample::kTruncate) {
    std::vector<std::size_t> idx(budget);
    for (std::size_t i = 0; i < budget; ++i) idx[i] = i;
    return geometry::select(pc, idx);
  }
  return geometry::select(pc, geometry::farthest_point_sample(pc, budget, 0));
}

Batch sample_batch(const embedstore::TripletManifest& manifest, const DataTables& tables,
                   CloudStore& clouds, std::size_t batch_size, std::mt19937_64& rng,
                   const BatchOptions& options) {
  const std::size_t n = manifest.shapes.size();
  if (batch_size == 0 || batch_size > n) {
    throw DataError("sample_batch: batch size " + std::to_string(batch_size) +
                    " exceeds shape count " + std::to_string(n));
  }
  // Partial Fisher-Yates: the first batch_size slots are the draw.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < batch_size; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(order[i], order[pick(rng)]);
  }

  Batch b;
  const std::uint32_t dim = tables.images.dim;
  b.image = ag::Tensor::zeros(batch_size, dim);
  b.text = ag::Tensor::zeros(batch_size, dim);
  std::vector<std::uint64_t> seeds(batch_size);
  std::vector<const geometry::PointCloud*> sources(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto& shape = manifest.shapes[order[i]];
    if (shape.views.empty()) throw InvariantError("shape '" + shape.shape_id + "': no views");
    std::uniform_int_distribution<std::size_t> pick(0, shape.views.size() - 1);
    const std::size_t vpos = pick(rng);
    const auto& view = shape.views[vpos];
    if (view.image_row >= tables.images.count()) {
      throw InvariantError("shape '" + shape.shape_id + "': image_row " +
                           std::to_string(view.image_row) + " out of range");
    }
    for (auto c : view.caption_rows) {
      if (c >= tables.texts.count()) {
        throw InvariantError("shape '" + shape.shape_id + "': caption row " +
                             std::to_string(c) + " out of range");
      }
    }
    const auto img = tables.images.row(view.image_row);
    std::copy(img.begin(), img.end(), b.image.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
    const auto txt = embedstore::select_topk(view, std::min(options.caption_topk,
                                                            view.caption_rows.size()),
                                             tables.images, tables.texts);
    std::copy(txt.begin(), txt.end(), b.text.data.begin() + static_cast<std::ptrdiff_t>(i * dim));
    seeds[i] = rng();
    sources[i] = &clouds.get(shape);
    b.shapes.push_back(order[i]);
    b.views.push_back(vpos);
  }

  b.clouds.resize(batch_size);
  auto prepare = [&](std::size_t i) {
    b.clouds[i] = fit_budget(geometry::augment(*sources[i], options.augment, seeds[i]),
                             options.point_budget, options.subsample);
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, batch_size));
  if (workers == 1) {
    for (std::size_t i = 0; i < batch_size; ++i) prepare(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < batch_size; i += workers) prepare(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(Checkpoint& ckpt) {
  binio::Writer w;
  w.magic(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  config::Json doc;
  doc["encoder"] = config::to_json(ckpt.encoder);
  doc["train"] = config::to_json(ckpt.train);
  w.str(doc.dump());

  w.u32(static_cast<std::uint32_t>(ckpt.params.tensors.size() + 1));
  for (const auto& p : ckpt.params.tensors) write_tensor(w, p.name, p.tensor.shape, p.tensor.data);
  write_tensor(w, ckpt.logit_scale.s.name, ckpt.logit_scale.s.tensor.shape,
               ckpt.logit_scale.s.tensor.data);

  w.u64(ckpt.adam.t);
  w.u32(static_cast<std::uint32_t>(ckpt.adam.m.size()));
  for (std::size_t i = 0; i < ckpt.adam.m.size(); ++i) {
    const std::vector<std::size_t> shape{ckpt.adam.m[i].size()};
    write_tensor(w, "adam.m." + std::to_string(i), shape, ckpt.adam.m[i]);
    write_tensor(w, "adam.v." + std::to_string(i), shape, ckpt.adam.v[i]);
  }
  w.u64(ckpt.step);
  w.str(ckpt.rng_state);
  ckpt.digest = sha256(w.buffer());
  w.bytes(ckpt.digest);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
  {
    binio::Reader magic(bytes, what);
    magic.expect_magic(std::string_view(kCheckpointMagic, 4));
  }
  if (bytes.size() < 4 + 4 + 32) throw CorruptionError(what + ": checkpoint too short");
  const auto body = bytes.first(bytes.size() - 32);
  Digest stored;
  std::copy(bytes.end() - 32, bytes.end(), stored.begin());
  if (sha256(body) != stored) {
    throw CorruptionError(what + ": checkpoint digest mismatch (corrupted or truncated)");
  }

  binio::Reader r(body, what);
  r.expect_magic(std::string_view(kCheckpointMagic, 4));
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(what + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.digest = stored;
  try {
    const auto doc = config::Json::parse(r.str());
    ckpt.encoder = config::encoder_from_json(doc.at("encoder"));
    ckpt.train = config::train_from_json(doc.at("train"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": bad config document: " + e.what());
  }
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto blob = read_tensor(r);
    ag::Parameter p{blob.name, {}};
    p.tensor.shape = blob.shape;
    p.tensor.data = std::move(blob.data);
    p.tensor.set_requires_grad(true);
    if (p.name == "logit_scale") {
      ckpt.logit_scale.s = std::move(p);
    } else {
      ckpt.params.tensors.push_back(std::move(p));
    }
  }
  ckpt.adam.t = r.u64();
  const auto groups = r.u32();
  for (std::uint32_t i = 0; i < groups; ++i) {
    ckpt.adam.m.push_back(read_tensor(r).data);
    ckpt.adam.v.push_back(read_tensor(r).data);
  }
  ckpt.step = r.u64();
  ckpt.rng_state = r.str();
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes in checkpoint");
  return ckpt;
}

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path), path.string());
}

void write_loss_csv(std::span<const LossRecord> log, std::ostream& out) {
  out << "step,loss_total,loss_p2i,loss_p2t,tau\n";
  out << std::setprecision(9);
  for (const auto& r : log) {
    out << r.step << ',' << r.total << ',' << r.p2i << ',' << r.p2t << ',' << r.tau << '\n';
  }
}

// ---------------------------------------------------------------------------
// Training loop

TrainResult train(const embedstore::TripletManifest& manifest, const DataTables& tables,
                  CloudStore& clouds, const model::EncoderConfig& encoder,
                  const TrainConfig& config, const TrainHooks& hooks) {
  retain_large_allocations();
  encoder.validate();
  config.validate();
  embedstore::validate_manifest(manifest, tables.images, tables.texts);
  if (tables.images.dim != encoder.embed_dim) {
    throw ConfigError("train: table dim " + std::to_string(tables.images.dim) +
                      " != encoder embed_dim " + std::to_string(encoder.embed_dim));
  }
  if (config.batch_size > manifest.shapes.size()) {
    throw ConfigError("train: batch_size " + std::to_string(config.batch_size) +
                      " exceeds shape count " + std::to_string(manifest.shapes.size()));
  }

  TrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.encoder = encoder;
  ck.train = config;

  // Encoder tensors followed by the logit scale; one Adam group each.
  std::vector<ag::Parameter> params = model::init_params(encoder, config.seed).tensors;
  params.push_back(LogitScale::from_tau(config.tau_init).s);
  const std::size_t n_enc = params.size() - 1;

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  ag::AdamState adam;

  auto snapshot = [&](std::uint64_t step) {
    Checkpoint c;
    c.encoder = encoder;
    c.train = config;
    c.params.tensors.assign(params.begin(), params.begin() + static_cast<std::ptrdiff_t>(n_enc));
    c.logit_scale.s = params.back();
    c.adam = adam;
    c.step = step;
    std::ostringstream os;
    os << rng;
    c.rng_state = os.str();
    return c;
  };

  for (std::size_t step = 0; step < config.steps; ++step) {
    const Batch batch = sample_batch(manifest, tables, clouds, config.batch_size, rng, config.batch);
    for (auto& p : params) p.tensor.zero_grad();

    auto fail = [&](const std::string& msg) {
      if (hooks.recovery_path) {
        Checkpoint last = snapshot(step);
        save_checkpoint(last, *hooks.recovery_path);
      }
      throw NumericalError("train: step " + std::to_string(step) + ": " + msg);
    };

    ag::Graph g;
    std::vector<ag::Var> leaves;
    leaves.reserve(n_enc);
    for (std::size_t i = 0; i < n_enc; ++i) leaves.push_back(g.leaf(params[i].tensor));
    const ag::Var ls = g.leaf(params.back().tensor);
    LossTerms loss;
    double total = 0.0;
    try {
      const ag::Var fp = model::encode_graph<float>(g, encoder, leaves, batch.clouds);
      loss = total_loss(g, fp, g.constant(batch.image), g.constant(batch.text), ls,
                        config.weights, config.reduction);
      total = g.value(loss.total).data[0];
    } catch (const NumericalError& e) {
      fail(e.what());
    }
    if (!std::isfinite(total)) fail("non-finite loss");
    g.backward(loss.total);

    ag::AdamHyper hyper = config.adam;
    if (config.cosine_decay && config.steps > 0) {
      hyper.lr = static_cast<float>(
          config.adam.lr * 0.5 *
          (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                          static_cast<double>(config.steps))));
    }
    try {
      ag::adam_step(params, adam, hyper);
    } catch (const NumericalError& e) {
      fail(e.what());
    }
    clamp_log_scale(params.back().tensor.data[0], config.max_logit_scale);

    LossRecord rec;
    rec.step = step;
    rec.total = total;
    rec.p2i = g.value(loss.p2i).data[0];
    rec.p2t = g.value(loss.p2t).data[0];
    rec.tau = std::exp(-static_cast<double>(params.back().tensor.data[0]));
    result.log.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
  }

  ck = snapshot(config.steps);
  encode_checkpoint(ck);
  return result;
}

template ag::Var contrastive_loss<float>(ag::BasicGraph<float>&, ag::Var, ag::Var, ag::Var,
                                         Reduction);
template ag::Var contrastive_loss<double>(ag::BasicGraph<double>&, ag::Var, ag::Var, ag::Var,
                                          Reduction);
template LossTerms total_loss<float>(ag::BasicGraph<float>&, ag::Var, ag::Var, ag::Var, ag::Var,
                                     const LossWeights&, Reduction);
template LossTerms total_loss<double>(ag::BasicGraph<double>&, ag::Var, ag::Var, ag::Var, ag::Var,
                                      const LossWeights&, Reduction);

}  // namespace ulip::training
