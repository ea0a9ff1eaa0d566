#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ulip::embedstore {

inline constexpr double kNormTolerance = 1e-3;

/// Row-major M x D table of unit-norm embeddings in the frozen space.
struct EmbeddingTable {
  std::uint32_t dim = 0;
  std::vector<float> values;
  std::string provenance;

  std::size_t count() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(values).subspan(i * dim, dim);
  }
  void append(std::span<const float> r);
};

/// Throws InvariantError naming the first row whose norm is outside 1 +/- 1e-3.
void check_unit_rows(const EmbeddingTable& table, const std::string& what);

std::vector<std::uint8_t> encode_table(const EmbeddingTable& table);
EmbeddingTable decode_table(std::span<const std::uint8_t> bytes, const std::string& what);
void write_table(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable read_table(const std::filesystem::path& path);

struct ViewRecord {
  std::uint32_t view_index = 0;
  std::uint32_t image_row = 0;
  std::vector<std::uint32_t> caption_rows;
};

struct ShapeRecord {
  std::string shape_id;
  std::string point_cloud_path;
  std::optional<std::uint32_t> label;
  std::vector<ViewRecord> views;
};

struct TripletManifest {
  std::vector<ShapeRecord> shapes;
};

std::string manifest_to_json(const TripletManifest& m);
TripletManifest manifest_from_json(const std::string& text, const std::string& what);
void write_manifest(const TripletManifest& m, const std::filesystem::path& path);
TripletManifest read_manifest(const std::filesystem::path& path);

/// Checks that every view exists and every row reference is in range.
void validate_manifest(const TripletManifest& m, const EmbeddingTable& images,
                       const EmbeddingTable& texts);

/// Dot product accumulated in double; cosine similarity for unit rows.
float clip_score(std::span<const float> a, std::span<const float> b);

/// Caption rows of `view` sorted by clip score against its image, descending;
/// equal scores keep their original order.
std::vector<std::uint32_t> rank_captions(const ViewRecord& view, const EmbeddingTable& images,
                                         const EmbeddingTable& texts);

/// k = 1 returns the best caption row unchanged; k > 1 the normalized mean
/// of the top-k rows.
std::vector<float> select_topk(const ViewRecord& view, std::size_t k,
                               const EmbeddingTable& images, const EmbeddingTable& texts);

}  // namespace ulip::embedstore
