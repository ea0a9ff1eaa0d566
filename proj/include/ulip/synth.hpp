#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ulip/embedstore.hpp"
#include "ulip/eval.hpp"
#include "ulip/geometry.hpp"

namespace ulip::synth {

enum class Primitive { kSphere, kCube, kCylinder, kCone, kTorus, kPyramid, kCapsule, kEllipsoid };

std::string_view primitive_name(Primitive p);
Primitive parse_primitive(std::string_view name);
std::vector<Primitive> all_primitives();

struct SynthSpec {
  std::vector<Primitive> categories = all_primitives();
  std::size_t train_per_class = 35;
  std::size_t test_per_class = 10;
  float shape_noise = 0.005f;   // vertex noise sigma, clipped at 3 sigma
  float scale_jitter = 0.2f;    // isotropic scale in [1 - j, 1 + j]
  float aspect_jitter = 0.08f;  // per-axis stretch in [1 - a, 1 + a]
  std::uint32_t dim = 64;
  float sigma_image = 0.05f;
  float sigma_text = 0.05f;
  std::size_t views = 12;
  std::size_t captions_per_view = 10;
  std::size_t wrong_captions = 0;  // per view, drawn from another category's anchor
  std::size_t points = 2048;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Base primitive, roughly filling [-1, 1]^3, before any jitter.
geometry::Mesh make_primitive(Primitive p);

struct SynthShape {
  std::string shape_id;
  std::uint32_t label = 0;
  bool train = true;
  geometry::Mesh mesh;
};

struct SynthDataset {
  std::vector<SynthShape> shapes;
};

SynthDataset gen_dataset(const SynthSpec& spec);

struct MockOutputs {
  embedstore::EmbeddingTable images;
  embedstore::EmbeddingTable texts;
  eval::LabelEmbeddings labels;
  embedstore::TripletManifest train;
  embedstore::TripletManifest test;
  std::vector<std::string> warnings;
};

/// Category anchors on the unit sphere, deterministic in (seed, dim, count).
std::vector<std::vector<float>> make_anchors(std::size_t count, std::uint32_t dim,
                                             std::uint64_t seed);

MockOutputs mock_frozen_encoders(const SynthSpec& spec, const SynthDataset& dataset);

/// Surface-sampled, unit-sphere-normalized cloud for one shape.
geometry::PointCloud shape_cloud(const SynthSpec& spec, const SynthShape& shape,
                                 std::size_t ordinal);

std::string cloud_path(const SynthShape& shape);

/// Everything a training run needs, in memory.
struct SynthBundle {
  SynthSpec spec;
  SynthDataset dataset;
  MockOutputs mock;
  std::vector<geometry::PointCloud> clouds;  // parallel to dataset.shapes
};

SynthBundle build_bundle(const SynthSpec& spec);

/// Writes clouds/*.upc, images.ulp2, texts.ulp2, labels.ulp2, labels.txt,
/// train.json, test.json under `dir`.
void write_bundle(const SynthBundle& bundle, const std::filesystem::path& dir);

}  // namespace ulip::synth
