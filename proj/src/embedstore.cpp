#include "ulip/embedstore.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "ulip/binio.hpp"
#include "ulip/errors.hpp"

namespace ulip::embedstore {

namespace {

constexpr char kTableMagic[] = "ULP2";
constexpr std::uint32_t kTableVersion = 1;

double row_norm(std::span<const float> r) {
  double s = 0.0;
  for (float v : r) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

}  // namespace

void EmbeddingTable::append(std::span<const float> r) {
  if (dim == 0) dim = static_cast<std::uint32_t>(r.size());
  if (r.size() != dim) {
    throw InvariantError("embedding table: row of dim " + std::to_string(r.size()) +
                         " appended to table of dim " + std::to_string(dim));
  }
  values.insert(values.end(), r.begin(), r.end());
}

void check_unit_rows(const EmbeddingTable& table, const std::string& what) {
  if (table.dim == 0 || table.count() == 0 || table.values.size() % table.dim != 0) {
    throw InvariantError(what + ": table must have positive dim and count");
  }
  for (std::size_t i = 0; i < table.count(); ++i) {
    const double n = row_norm(table.row(i));
    if (!(std::abs(n - 1.0) <= kNormTolerance)) {
      throw InvariantError(what + ": row " + std::to_string(i) + " has norm " +
                           std::to_string(n) + ", expected 1 +/- 1e-3");
    }
  }
}

std::vector<std::uint8_t> encode_table(const EmbeddingTable& table) {
  check_unit_rows(table, "write_table");
  binio::Writer w;
  w.magic(std::string_view(kTableMagic, 4));
  w.u32(kTableVersion);
  w.u32(table.dim);
  w.u32(static_cast<std::uint32_t>(table.count()));
  w.f32s(table.values);
  return w.take();
}

EmbeddingTable decode_table(std::span<const std::uint8_t> bytes, const std::string& what) {
  binio::Reader r(bytes, what);
  r.expect_magic(std::string_view(kTableMagic, 4));
  const auto version = r.u32();
  if (version != kTableVersion) {
    throw FormatError(what + ": unsupported ULP2 version " + std::to_string(version));
  }
  EmbeddingTable t;
  t.dim = r.u32();
  const auto count = r.u32();
  if (t.dim == 0 || count == 0) throw InvariantError(what + ": zero dim or row count");
  t.values = r.f32s(static_cast<std::size_t>(t.dim) * count);
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  t.provenance = what;
  check_unit_rows(t, what);
  return t;
}

void write_table(const EmbeddingTable& table, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_table(table));
}

EmbeddingTable read_table(const std::filesystem::path& path) {
  return decode_table(binio::read_file(path), path.string());
}

std::string manifest_to_json(const TripletManifest& m) {
  nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
  for (const auto& s : m.shapes) {
    nlohmann::ordered_json js;
    js["shape_id"] = s.shape_id;
    js["point_cloud_path"] = s.point_cloud_path;
    js["label"] = s.label ? nlohmann::ordered_json(*s.label) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json views = nlohmann::ordered_json::array();
    for (const auto& v : s.views) {
      views.push_back({{"view_index", v.view_index},
                       {"image_row", v.image_row},
                       {"caption_rows", v.caption_rows}});
    }
    js["views"] = std::move(views);
    shapes.push_back(std::move(js));
  }
  nlohmann::ordered_json doc;
  doc["shapes"] = std::move(shapes);
  return doc.dump(1) + "\n";
}

TripletManifest manifest_from_json(const std::string& text, const std::string& what) {
  TripletManifest m;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& js : doc.at("shapes")) {
      ShapeRecord s;
      s.shape_id = js.at("shape_id").get<std::string>();
      s.point_cloud_path = js.at("point_cloud_path").get<std::string>();
      if (js.contains("label") && !js.at("label").is_null()) {
        s.label = js.at("label").get<std::uint32_t>();
      }
      for (const auto& jv : js.at("views")) {
        ViewRecord v;
        v.view_index = jv.at("view_index").get<std::uint32_t>();
        v.image_row = jv.at("image_row").get<std::uint32_t>();
        v.caption_rows = jv.at("caption_rows").get<std::vector<std::uint32_t>>();
        s.views.push_back(std::move(v));
      }
      m.shapes.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": invalid manifest: " + e.what());
  }
  return m;
}

void write_manifest(const TripletManifest& m, const std::filesystem::path& path) {
  const auto s = manifest_to_json(m);
  binio::write_file_atomic(
      path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

TripletManifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return manifest_from_json(std::string(bytes.begin(), bytes.end()), path.string());
}

void validate_manifest(const TripletManifest& m, const EmbeddingTable& images,
                       const EmbeddingTable& texts) {
  if (images.dim != texts.dim) {
    throw InvariantError("manifest: image dim " + std::to_string(images.dim) +
                         " != text dim " + std::to_string(texts.dim));
  }
  for (const auto& s : m.shapes) {
    if (s.views.empty()) throw InvariantError("shape '" + s.shape_id + "': no views");
    for (const auto& v : s.views) {
      const std::string where =
          "shape '" + s.shape_id + "' view " + std::to_string(v.view_index);
      if (v.image_row >= images.count()) {
        throw InvariantError(where + ": image_row " + std::to_string(v.image_row) +
                             " out of range");
      }
      if (v.caption_rows.empty()) throw InvariantError(where + ": no caption rows");
      for (auto c : v.caption_rows) {
        if (c >= texts.count()) {
          throw InvariantError(where + ": caption row " + std::to_string(c) + " out of range");
        }
      }
    }
  }
}

float clip_score(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw InvariantError("clip_score: dim mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(s);
}

std::vector<std::uint32_t> rank_captions(const ViewRecord& view, const EmbeddingTable& images,
                                         const EmbeddingTable& texts) {
  if (view.caption_rows.empty()) throw InvariantError("rank_captions: empty caption list");
  if (view.image_row >= images.count()) throw InvariantError("rank_captions: bad image row");
  const auto image = images.row(view.image_row);
  std::vector<std::pair<float, std::uint32_t>> scored;
  scored.reserve(view.caption_rows.size());
  for (auto c : view.caption_rows) {
    if (c >= texts.count()) throw InvariantError("rank_captions: bad caption row");
    scored.emplace_back(clip_score(image, texts.row(c)), c);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::uint32_t> out;
  out.reserve(scored.size());
  for (const auto& [score, row] : scored) out.push_back(row);
  return out;
}

std::vector<float> select_topk(const ViewRecord& view, std::size_t k,
                               const EmbeddingTable& images, const EmbeddingTable& texts) {
  if (k == 0 || k > view.caption_rows.size()) {
    throw InvariantError("select_topk: k=" + std::to_string(k) + " outside [1, " +
                         std::to_string(view.caption_rows.size()) + "]");
  }
  const auto ranked = rank_captions(view, images, texts);
  if (k == 1) {
    const auto r = texts.row(ranked[0]);
    return {r.begin(), r.end()};
  }
  std::vector<double> mean(texts.dim, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto r = texts.row(ranked[i]);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += r[j];
  }
  double norm = 0.0;
  for (auto& v : mean) {
    v /= static_cast<double>(k);
    norm += v * v;
  }
  norm = std::sqrt(norm);
  if (norm < 1e-6) {
    throw NumericalError("select_topk: top-" + std::to_string(k) +
                         " caption mean is near zero (opposing captions)");
  }
  std::vector<float> out(mean.size());
  for (std::size_t j = 0; j < mean.size(); ++j) out[j] = static_cast<float>(mean[j] / norm);
  return out;
}

}  // namespace ulip::embedstore
