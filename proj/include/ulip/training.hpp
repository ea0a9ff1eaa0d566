#pragma once

#include <cstdint>
#include <filesystem>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ulip/ag.hpp"
#include "ulip/digest.hpp"
#include "ulip/embedstore.hpp"
#include "ulip/geometry.hpp"
#include "ulip/model.hpp"
#include "ulip/optim.hpp"

namespace ulip::training {

enum class Reduction { kSum, kMean };
enum class Subsample { kFps, kTruncate };

/// Learnable log inverse temperature: logits = sim * exp(s), tau = exp(-s).
struct LogitScale {
  ag::Parameter s{"logit_scale", ag::Tensor::scalar(0.0f)};

  static LogitScale from_tau(float tau);
  float tau() const { return static_cast<float>(std::exp(-double(s.tensor.data[0]))); }
  float scale() const { return static_cast<float>(std::exp(double(s.tensor.data[0]))); }
  /// Caps exp(s) at `max_scale`.
  void clamp(float max_scale);
};

/// Caps exp(s) at `max_scale` in place.
void clamp_log_scale(float& s, float max_scale);

struct LossWeights {
  float image = 1.0f;
  float text = 1.0f;
};

struct BatchOptions {
  std::size_t point_budget = 2048;
  Subsample subsample = Subsample::kFps;
  geometry::AugmentSpec augment;
  std::size_t caption_topk = 1;
  std::size_t workers = 1;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t steps = 300;
  ag::AdamHyper adam;
  std::uint64_t seed = 0;
  Reduction reduction = Reduction::kMean;
  LossWeights weights;
  BatchOptions batch;
  float tau_init = 0.07f;
  float max_logit_scale = 100.0f;
  bool cosine_decay = false;

  void validate() const;
};

// Symmetric in-batch InfoNCE between rows of `fp` and `fx` (both B x D, unit
// rows): -1/2 sum_i [log softmax_row(L)_ii + log softmax_col(L)_ii] with
// L = fp fx^T * exp(s); divided by B under kMean.
template <class T>
ag::Var contrastive_loss(ag::BasicGraph<T>& g, ag::Var fp, ag::Var fx, ag::Var log_scale,
                         Reduction reduction);

struct LossTerms {
  ag::Var total;
  ag::Var p2i;
  ag::Var p2t;
};

template <class T>
LossTerms total_loss(ag::BasicGraph<T>& g, ag::Var fp, ag::Var fi, ag::Var ft,
                     ag::Var log_scale, const LossWeights& weights, Reduction reduction);

/// Forward-only convenience wrapper, evaluated in 64-bit arithmetic.
double contrastive_loss_value(const ag::Tensor& fp, const ag::Tensor& fx, float log_scale,
                              Reduction reduction);

/// Loads UPC1 clouds referenced by a manifest, relative to `base`, and caches
/// them. Entries may also be inserted directly for in-memory datasets.
class CloudStore {
 public:
  explicit CloudStore(std::filesystem::path base = {}) : base_(std::move(base)) {}

  const geometry::PointCloud& get(const embedstore::ShapeRecord& shape);
  void put(const std::string& path, geometry::PointCloud cloud);
  const std::filesystem::path& base() const { return base_; }

 private:
  std::filesystem::path base_;
  std::map<std::string, geometry::PointCloud> cache_;
};

struct DataTables {
  embedstore::EmbeddingTable images;
  embedstore::EmbeddingTable texts;
};

struct Batch {
  std::vector<std::size_t> shapes;  // indices into the manifest
  std::vector<std::size_t> views;   // position within each shape's view list
  std::vector<geometry::PointCloud> clouds;
  ag::Tensor image;  // B x D
  ag::Tensor text;   // B x D
};

/// Reduces a cloud to the point budget (FPS from index 0, or a prefix).
geometry::PointCloud fit_budget(const geometry::PointCloud& pc, std::size_t budget,
                                Subsample mode);

/// B distinct shapes without replacement, one uniformly drawn view each.
Batch sample_batch(const embedstore::TripletManifest& manifest, const DataTables& tables,
                   CloudStore& clouds, std::size_t batch_size, std::mt19937_64& rng,
                   const BatchOptions& options);

struct Checkpoint {
  model::EncoderConfig encoder;
  TrainConfig train;
  model::EncoderParams params;
  LogitScale logit_scale;
  ag::AdamState adam;
  std::uint64_t step = 0;
  std::string rng_state;
  Digest digest{};
};

std::vector<std::uint8_t> encode_checkpoint(Checkpoint& ckpt);  // fills ckpt.digest
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what);
void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct LossRecord {
  std::uint64_t step = 0;
  double total = 0.0;
  double p2i = 0.0;
  double p2t = 0.0;
  double tau = 0.0;
};

void write_loss_csv(std::span<const LossRecord> log, std::ostream& out);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
};

struct TrainHooks {
  // Receives the last good checkpoint when a step produces a non-finite loss.
  std::optional<std::filesystem::path> recovery_path;
  // Called after every step (e.g. for streaming the loss CSV).
  std::function<void(const LossRecord&)> on_step;
};

TrainResult train(const embedstore::TripletManifest& manifest, const DataTables& tables,
                  CloudStore& clouds, const model::EncoderConfig& encoder,
                  const TrainConfig& config, const TrainHooks& hooks = {});

}  // namespace ulip::training
