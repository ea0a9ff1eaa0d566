#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ulip/ag.hpp"
#include "ulip/embedstore.hpp"
#include "ulip/geometry.hpp"
#include "ulip/model.hpp"

namespace ulip::eval {

struct LabelEmbeddings {
  std::vector<std::string> names;
  embedstore::EmbeddingTable table;

  std::size_t count() const { return table.count(); }
  void validate(std::uint32_t dim) const;
};

/// Ranked category ids per sample, best first.
using Predictions = std::vector<std::vector<std::uint32_t>>;

/// Ranks categories by cosine similarity; ties go to the lower id. Each list
/// holds min(k, C) entries.
Predictions zero_shot_classify(const ag::Tensor& features, const LabelEmbeddings& labels,
                               std::size_t k = 5);

struct EvalReport {
  double top1 = 0.0;
  double top5 = 0.0;
  double overall_accuracy = 0.0;
  double class_average_accuracy = 0.0;
  std::size_t samples = 0;
  std::vector<std::vector<std::uint64_t>> confusion;  // [truth][predicted]
};

EvalReport compute_metrics(const Predictions& predictions, std::span<const std::uint32_t> truth,
                           std::size_t num_classes);

std::string report_json(const EvalReport& r);
std::string report_csv(const EvalReport& r);  // header + one row
std::string confusion_csv(const EvalReport& r, std::span<const std::string> names = {});

// ---------------------------------------------------------------------------
// Supervised probes

enum class FitMode { kLinearProbe, kFinetune };

struct ProbeConfig {
  std::size_t steps = 200;
  float lr = 1e-2f;
  float encoder_lr = 1e-4f;  // finetune only
  std::size_t batch_size = 0;  // 0 = full batch
  std::uint64_t seed = 0;
};

struct LinearClassifier {
  ag::Parameter weight;  // D x C
  ag::Parameter bias;    // 1 x C

  ag::Tensor logits(const ag::Tensor& x) const;
  Predictions predict(const ag::Tensor& x, std::size_t k = 5) const;
};

struct ProbeResult {
  LinearClassifier head;
  model::EncoderParams encoder;  // finetune only
  EvalReport train_report;
  EvalReport test_report;
};

/// Softmax cross-entropy on frozen embeddings. Training samples are put in a
/// canonical order first, so any permutation of the same set trains
/// identically.
ProbeResult linear_probe(const ag::Tensor& train_x, std::span<const std::uint32_t> train_y,
                         const ag::Tensor& test_x, std::span<const std::uint32_t> test_y,
                         std::size_t num_classes, const ProbeConfig& config);

/// Encoder and linear head trained jointly (separate learning rates).
ProbeResult finetune(const model::EncoderParams& encoder, const model::EncoderConfig& enc_config,
                     std::span<const geometry::PointCloud> train_clouds,
                     std::span<const std::uint32_t> train_y,
                     std::span<const geometry::PointCloud> test_clouds,
                     std::span<const std::uint32_t> test_y, std::size_t num_classes,
                     const ProbeConfig& config);

}  // namespace ulip::eval
