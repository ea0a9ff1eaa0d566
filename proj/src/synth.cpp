#include "ulip/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "ulip/binio.hpp"
#include "ulip/errors.hpp"

namespace ulip::synth {

namespace {

using geometry::Mesh;
using geometry::Vec3;

constexpr std::pair<Primitive, std::string_view> kNames[] = {
    {Primitive::kSphere, "sphere"},   {Primitive::kCube, "cube"},
    {Primitive::kCylinder, "cylinder"}, {Primitive::kCone, "cone"},
    {Primitive::kTorus, "torus"},     {Primitive::kPyramid, "pyramid"},
    {Primitive::kCapsule, "capsule"}, {Primitive::kEllipsoid, "ellipsoid"},
};

constexpr std::uint64_t kAnchorSalt = 0xa11c0de5eed00001ULL;
constexpr std::uint64_t kEmbedSalt = 0xe3bedd1e90000002ULL;
constexpr std::uint64_t kSplitSalt = 0x5b117000000003ULL;
constexpr std::uint64_t kCloudSalt = 0xc10d000000000004ULL;

Vec3 normalized(Vec3 v) {
  const double n = std::sqrt(double(v[0]) * v[0] + double(v[1]) * v[1] + double(v[2]) * v[2]);
  return {static_cast<float>(v[0] / n), static_cast<float>(v[1] / n),
          static_cast<float>(v[2] / n)};
}

// Midpoint subdivision; each triangle becomes four. With `project`, new
// vertices are pushed onto the unit sphere.
Mesh subdivide(const Mesh& in, bool project) {
  Mesh out;
  out.vertices = in.vertices;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> mid;
  auto midpoint = [&](std::uint32_t a, std::uint32_t b) {
    const auto key = std::minmax(a, b);
    auto it = mid.find(key);
    if (it != mid.end()) return it->second;
    const auto& va = out.vertices[a];
    const auto& vb = out.vertices[b];
    Vec3 m = {(va[0] + vb[0]) * 0.5f, (va[1] + vb[1]) * 0.5f, (va[2] + vb[2]) * 0.5f};
    if (project) m = normalized(m);
    out.vertices.push_back(m);
    const auto id = static_cast<std::uint32_t>(out.vertices.size() - 1);
    mid.emplace(key, id);
    return id;
  };
  for (const auto& t : in.triangles) {
    const auto ab = midpoint(t[0], t[1]);
    const auto bc = midpoint(t[1], t[2]);
    const auto ca = midpoint(t[2], t[0]);
    out.triangles.push_back({t[0], ab, ca});
    out.triangles.push_back({t[1], bc, ab});
    out.triangles.push_back({t[2], ca, bc});
    out.triangles.push_back({ab, bc, ca});
  }
  return out;
}

Mesh icosphere(int levels) {
  const float p = static_cast<float>((1.0 + std::sqrt(5.0)) / 2.0);
  Mesh m;
  const Vec3 raw[] = {{-1, p, 0}, {1, p, 0}, {-1, -p, 0}, {1, -p, 0},
                      {0, -1, p}, {0, 1, p}, {0, -1, -p}, {0, 1, -p},
                      {p, 0, -1}, {p, 0, 1}, {-p, 0, -1}, {-p, 0, 1}};
  for (const auto& v : raw) m.vertices.push_back(normalized(v));
  m.triangles = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                 {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                 {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                 {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int i = 0; i < levels; ++i) m = subdivide(m, true);
  return m;
}

// Surface of revolution about z of a (radius, z) polyline.
Mesh revolve(const std::vector<std::pair<double, double>>& profile, std::size_t segments,
             bool closed) {
  Mesh m;
  const std::size_t rings = profile.size();
  for (const auto& [r, z] : profile) {
    for (std::size_t s = 0; s < segments; ++s) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(s) / static_cast<double>(segments);
      m.vertices.push_back({static_cast<float>(r * std::cos(a)), static_cast<float>(r * std::sin(a)),
                            static_cast<float>(z)});
    }
  }
  const std::size_t spans = closed ? rings : rings - 1;
  for (std::size_t i = 0; i < spans; ++i) {
    const std::size_t j = (i + 1) % rings;
    for (std::size_t s = 0; s < segments; ++s) {
      const std::size_t t = (s + 1) % segments;
      const auto a = static_cast<std::uint32_t>(i * segments + s);
      const auto b = static_cast<std::uint32_t>(i * segments + t);
      const auto c = static_cast<std::uint32_t>(j * segments + t);
      const auto d = static_cast<std::uint32_t>(j * segments + s);
      m.triangles.push_back({a, b, c});
      m.triangles.push_back({a, c, d});
    }
  }
  return m;
}

void append_line(std::vector<std::pair<double, double>>& out, std::pair<double, double> from,
                 std::pair<double, double> to, std::size_t steps) {
  for (std::size_t i = out.empty() ? 0 : 1; i <= steps; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(steps);
    out.emplace_back(from.first + t * (to.first - from.first),
                     from.second + t * (to.second - from.second));
  }
}

void append_arc(std::vector<std::pair<double, double>>& out, double cz, double radius,
                double a0, double a1, std::size_t steps) {
  for (std::size_t i = out.empty() ? 0 : 1; i <= steps; ++i) {
    const double a = a0 + (a1 - a0) * static_cast<double>(i) / static_cast<double>(steps);
    out.emplace_back(std::max(0.0, radius * std::cos(a)), cz + radius * std::sin(a));
  }
}

Mesh box() {
  Mesh m;
  m.vertices = {{-1, -1, -1}, {1, -1, -1}, {1, 1, -1}, {-1, 1, -1},
                {-1, -1, 1},  {1, -1, 1},  {1, 1, 1},  {-1, 1, 1}};
  m.triangles = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
                 {1, 2, 6}, {1, 6, 5}, {2, 3, 7}, {2, 7, 6}, {3, 0, 4}, {3, 4, 7}};
  for (int i = 0; i < 3; ++i) m = subdivide(m, false);
  return m;
}

Mesh pyramid() {
  Mesh m;
  m.vertices = {{-1, -1, -1}, {1, -1, -1}, {1, 1, -1}, {-1, 1, -1}, {0, 0, 1}};
  m.triangles = {{0, 2, 1}, {0, 3, 2}, {0, 1, 4}, {1, 2, 4}, {2, 3, 4}, {3, 0, 4}};
  for (int i = 0; i < 3; ++i) m = subdivide(m, false);
  return m;
}

}  // namespace

std::string_view primitive_name(Primitive p) {
  for (const auto& [k, n] : kNames) {
    if (k == p) return n;
  }
  return "unknown";
}

Primitive parse_primitive(std::string_view name) {
  for (const auto& [k, n] : kNames) {
    if (n == name) return k;
  }
  throw ConfigError("unknown primitive '" + std::string(name) + "'");
}

std::vector<Primitive> all_primitives() {
  std::vector<Primitive> out;
  for (const auto& [k, n] : kNames) out.push_back(k);
  return out;
}

void SynthSpec::validate() const {
  if (categories.size() < 2) throw ConfigError("synth: need at least 2 categories");
  if (shape_noise < 0 || sigma_image < 0 || sigma_text < 0 || scale_jitter < 0 ||
      aspect_jitter < 0) {
    throw ConfigError("synth: noise scales must be >= 0");
  }
  if (scale_jitter >= 1 || aspect_jitter >= 1) throw ConfigError("synth: jitter must be < 1");
  if (dim == 0 || views == 0 || captions_per_view == 0 || points == 0) {
    throw ConfigError("synth: dim, views, captions_per_view and points must be >= 1");
  }
  if (train_per_class + test_per_class == 0) throw ConfigError("synth: no shapes requested");
  if (wrong_captions >= captions_per_view) {
    throw ConfigError("synth: wrong_captions must be < captions_per_view");
  }
}

Mesh make_primitive(Primitive p) {
  constexpr std::size_t kSegments = 48;
  const double half_pi = std::numbers::pi / 2.0;
  std::vector<std::pair<double, double>> prof;
  switch (p) {
    case Primitive::kSphere:
      return icosphere(4);
    case Primitive::kEllipsoid: {
      Mesh m = icosphere(4);
      for (auto& v : m.vertices) {
        v[1] *= 0.65f;
        v[2] *= 0.4f;
      }
      return m;
    }
    case Primitive::kCube:
      return box();
    case Primitive::kPyramid:
      return pyramid();
    case Primitive::kCylinder:
      append_line(prof, {0.0, -1.0}, {1.0, -1.0}, 4);
      append_line(prof, {1.0, -1.0}, {1.0, 1.0}, 8);
      append_line(prof, {1.0, 1.0}, {0.0, 1.0}, 4);
      return revolve(prof, kSegments, false);
    case Primitive::kCone:
      append_line(prof, {0.0, -1.0}, {1.0, -1.0}, 4);
      append_line(prof, {1.0, -1.0}, {0.0, 1.0}, 10);
      return revolve(prof, kSegments, false);
    case Primitive::kCapsule:
      append_arc(prof, -0.5, 0.5, -half_pi, 0.0, 8);
      append_line(prof, {0.5, -0.5}, {0.5, 0.5}, 6);
      append_arc(prof, 0.5, 0.5, 0.0, half_pi, 8);
      return revolve(prof, kSegments, false);
    case Primitive::kTorus: {
      constexpr std::size_t kTube = 24;
      for (std::size_t i = 0; i < kTube; ++i) {
        const double a = 2.0 * std::numbers::pi * static_cast<double>(i) / kTube;
        prof.emplace_back(0.7 + 0.3 * std::cos(a), 0.3 * std::sin(a));
      }
      return revolve(prof, kSegments, true);
    }
  }
  throw ConfigError("unknown primitive");
}

SynthDataset gen_dataset(const SynthSpec& spec) {
  spec.validate();
  SynthDataset ds;
  const std::size_t per_class = spec.train_per_class + spec.test_per_class;
  std::mt19937_64 split_rng(spec.seed ^ kSplitSalt);
  std::size_t ordinal = 0;
  for (std::size_t c = 0; c < spec.categories.size(); ++c) {
    const Mesh base = make_primitive(spec.categories[c]);
    std::vector<std::size_t> perm(per_class);
    for (std::size_t i = 0; i < per_class; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), split_rng);
    std::vector<bool> is_train(per_class, false);
    for (std::size_t i = 0; i < spec.train_per_class; ++i) is_train[perm[i]] = true;

    for (std::size_t i = 0; i < per_class; ++i, ++ordinal) {
      std::mt19937_64 rng(spec.seed ^ ordinal);
      std::uniform_real_distribution<double> unit(-1.0, 1.0);
      std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
      std::normal_distribution<double> gauss(0.0, 1.0);
      const double aspect[3] = {1.0 + spec.aspect_jitter * unit(rng),
                                1.0 + spec.aspect_jitter * unit(rng),
                                1.0 + spec.aspect_jitter * unit(rng)};
      const double scale = 1.0 + spec.scale_jitter * unit(rng);
      const double th = angle(rng);
      const double cs = std::cos(th), sn = std::sin(th);

      SynthShape shape;
      std::ostringstream id;
      id << primitive_name(spec.categories[c]) << '_';
      id.width(4);
      id.fill('0');
      id << i;
      shape.shape_id = id.str();
      shape.label = static_cast<std::uint32_t>(c);
      shape.train = is_train[i];
      shape.mesh = base;
      const double limit = 3.0 * spec.shape_noise;
      for (auto& v : shape.mesh.vertices) {
        double x = v[0] * aspect[0] * scale, y = v[1] * aspect[1] * scale,
               z = v[2] * aspect[2] * scale;
        const double rx = cs * x - sn * y, ry = sn * x + cs * y;
        x = rx;
        y = ry;
        if (spec.shape_noise > 0) {
          double n[3] = {gauss(rng) * spec.shape_noise, gauss(rng) * spec.shape_noise,
                         gauss(rng) * spec.shape_noise};
          const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
          if (len > limit) {
            for (double& e : n) e *= limit / len;
          }
          x += n[0];
          y += n[1];
          z += n[2];
        }
        v = {static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)};
      }
      ds.shapes.push_back(std::move(shape));
    }
  }
  return ds;
}

std::vector<std::vector<float>> make_anchors(std::size_t count, std::uint32_t dim,
                                             std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ kAnchorSalt);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<float>> anchors(count, std::vector<float>(dim));
  for (auto& a : anchors) {
    std::vector<double> g(dim);
    double n = 0.0;
    for (auto& v : g) {
      v = gauss(rng);
      n += v * v;
    }
    n = std::sqrt(n);
    for (std::size_t j = 0; j < dim; ++j) a[j] = static_cast<float>(g[j] / n);
  }
  return anchors;
}

namespace {

// Noise g ~ N(0, I / D), so E|g|^2 = 1 and sigma is the relative noise norm.
std::vector<float> noisy_row(const std::vector<float>& anchor, float sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(anchor.size())));
  std::vector<double> v(anchor.size());
  double n = 0.0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    v[j] = anchor[j] + sigma * gauss(rng);
    n += v[j] * v[j];
  }
  n = std::sqrt(n);
  std::vector<float> out(v.size());
  if (sigma == 0.0f) return anchor;
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = static_cast<float>(v[j] / n);
  return out;
}

}  // namespace

MockOutputs mock_frozen_encoders(const SynthSpec& spec, const SynthDataset& dataset) {
  spec.validate();
  MockOutputs out;
  const std::size_t n_cat = spec.categories.size();
  if (spec.dim < n_cat) {
    out.warnings.push_back("anchor dim " + std::to_string(spec.dim) + " < category count " +
                           std::to_string(n_cat) + "; anchors may collide");
  }
  const auto anchors = make_anchors(n_cat, spec.dim, spec.seed);
  out.images.dim = spec.dim;
  out.images.provenance = "mock-image";
  out.texts.dim = spec.dim;
  out.texts.provenance = "mock-text";
  out.labels.table.dim = spec.dim;
  out.labels.table.provenance = "mock-label";
  for (std::size_t c = 0; c < n_cat; ++c) {
    out.labels.names.emplace_back(primitive_name(spec.categories[c]));
    out.labels.table.append(anchors[c]);
  }

  std::mt19937_64 rng(spec.seed ^ kEmbedSalt);
  for (const auto& shape : dataset.shapes) {
    embedstore::ShapeRecord rec;
    rec.shape_id = shape.shape_id;
    rec.point_cloud_path = cloud_path(shape);
    rec.label = shape.label;
    const auto& anchor = anchors[shape.label];
    for (std::size_t v = 0; v < spec.views; ++v) {
      embedstore::ViewRecord view;
      view.view_index = static_cast<std::uint32_t>(v);
      view.image_row = static_cast<std::uint32_t>(out.images.count());
      out.images.append(noisy_row(anchor, spec.sigma_image, rng));

      std::vector<bool> wrong(spec.captions_per_view, false);
      if (spec.wrong_captions > 0) {
        std::vector<std::size_t> slots(spec.captions_per_view);
        for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
        for (std::size_t i = 0; i < spec.wrong_captions; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, slots.size() - 1);
          std::swap(slots[i], slots[pick(rng)]);
          wrong[slots[i]] = true;
        }
      }
      for (std::size_t k = 0; k < spec.captions_per_view; ++k) {
        std::size_t cat = shape.label;
        if (wrong[k]) {
          std::uniform_int_distribution<std::size_t> other(1, n_cat - 1);
          cat = (shape.label + other(rng)) % n_cat;
        }
        view.caption_rows.push_back(static_cast<std::uint32_t>(out.texts.count()));
        out.texts.append(noisy_row(anchors[cat], spec.sigma_text, rng));
      }
      rec.views.push_back(std::move(view));
    }
    (shape.train ? out.train : out.test).shapes.push_back(std::move(rec));
  }
  return out;
}

std::string cloud_path(const SynthShape& shape) { return "clouds/" + shape.shape_id + ".upc"; }

geometry::PointCloud shape_cloud(const SynthSpec& spec, const SynthShape& shape,
                                 std::size_t ordinal) {
  return geometry::normalize_unit_sphere(
      geometry::sample_surface(shape.mesh, spec.points, spec.seed ^ ordinal ^ kCloudSalt));
}

SynthBundle build_bundle(const SynthSpec& spec) {
  SynthBundle b;
  b.spec = spec;
  b.dataset = gen_dataset(spec);
  b.mock = mock_frozen_encoders(spec, b.dataset);
  b.clouds.reserve(b.dataset.shapes.size());
  for (std::size_t i = 0; i < b.dataset.shapes.size(); ++i) {
    b.clouds.push_back(shape_cloud(spec, b.dataset.shapes[i], i));
  }
  return b;
}

void write_bundle(const SynthBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "clouds");
  for (std::size_t i = 0; i < bundle.dataset.shapes.size(); ++i) {
    geometry::write_point_cloud(bundle.clouds[i], dir / cloud_path(bundle.dataset.shapes[i]));
  }
  embedstore::write_table(bundle.mock.images, dir / "images.ulp2");
  embedstore::write_table(bundle.mock.texts, dir / "texts.ulp2");
  embedstore::write_table(bundle.mock.labels.table, dir / "labels.ulp2");
  std::string names;
  for (const auto& n : bundle.mock.labels.names) names += n + "\n";
  binio::write_file_atomic(dir / "labels.txt",
                           std::span(reinterpret_cast<const std::uint8_t*>(names.data()),
                                     names.size()));
  embedstore::write_manifest(bundle.mock.train, dir / "train.json");
  embedstore::write_manifest(bundle.mock.test, dir / "test.json");
}

}  // namespace ulip::synth
