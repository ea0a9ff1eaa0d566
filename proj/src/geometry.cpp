#include "ulip/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "ulip/binio.hpp"
#include "ulip/errors.hpp"

namespace ulip::geometry {

namespace {

constexpr char kPointCloudMagic[] = "UPC1";
constexpr std::uint32_t kPointCloudVersion = 1;

// Parses one face-vertex token ("7", "7/2", "7//3", "-1") into a 0-based index.
long parse_face_index(const std::string& tok, std::size_t nverts, const std::string& where,
                      std::size_t line) {
  const auto slash = tok.find('/');
  const std::string head = tok.substr(0, slash);
  long idx = 0;
  try {
    std::size_t used = 0;
    idx = std::stol(head, &used);
    if (used != head.size()) throw std::invalid_argument(head);
  } catch (const std::exception&) {
    throw MeshError(where + ":" + std::to_string(line) + ": malformed face index '" + tok + "'",
                    line);
  }
  long zero_based = idx > 0 ? idx - 1 : static_cast<long>(nverts) + idx;
  if (idx == 0 || zero_based < 0 || zero_based >= static_cast<long>(nverts)) {
    throw MeshError(where + ":" + std::to_string(line) + ": face index " + std::to_string(idx) +
                        " out of range (have " + std::to_string(nverts) + " vertices)",
                    line);
  }
  return zero_based;
}

double dist2(const Vec3& a, const Vec3& b) {
  const double dx = static_cast<double>(a[0]) - b[0];
  const double dy = static_cast<double>(a[1]) - b[1];
  const double dz = static_cast<double>(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

Mesh parse_obj(std::istream& in, const std::string& source) {
  Mesh mesh;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) {
        throw MeshError(source + ":" + std::to_string(lineno) + ": malformed vertex", lineno);
      }
      if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
        throw MeshError(source + ":" + std::to_string(lineno) + ": non-finite vertex", lineno);
      }
      mesh.vertices.push_back({static_cast<float>(x), static_cast<float>(y),
                               static_cast<float>(z)});
    } else if (tag == "f") {
      std::vector<std::uint32_t> poly;
      std::string tok;
      while (ls >> tok) {
        poly.push_back(static_cast<std::uint32_t>(
            parse_face_index(tok, mesh.vertices.size(), source, lineno)));
      }
      if (poly.size() < 3) {
        throw MeshError(source + ":" + std::to_string(lineno) + ": face needs >= 3 vertices",
                        lineno);
      }
      for (std::size_t i = 1; i + 1 < poly.size(); ++i) {
        mesh.triangles.push_back({poly[0], poly[i], poly[i + 1]});
      }
    }
  }
  if (mesh.triangles.empty()) {
    throw MeshError(source + ":" + std::to_string(lineno) + ": mesh has no triangles", lineno);
  }
  return mesh;
}

Mesh load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open mesh file: " + path.string());
  return parse_obj(in, path.string());
}

void write_obj(const Mesh& mesh, const std::filesystem::path& path) {
  std::ostringstream os;
  os.precision(9);
  for (const auto& v : mesh.vertices) os << "v " << v[0] << ' ' << v[1] << ' ' << v[2] << '\n';
  for (const auto& t : mesh.triangles) {
    os << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  }
  const std::string s = os.str();
  binio::write_file_atomic(
      path, std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

double triangle_area(const Mesh& mesh, std::size_t tri) {
  const auto& t = mesh.triangles[tri];
  const auto& a = mesh.vertices[t[0]];
  const auto& b = mesh.vertices[t[1]];
  const auto& c = mesh.vertices[t[2]];
  const double ux = double(b[0]) - a[0], uy = double(b[1]) - a[1], uz = double(b[2]) - a[2];
  const double vx = double(c[0]) - a[0], vy = double(c[1]) - a[1], vz = double(c[2]) - a[2];
  const double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
  return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
}

PointCloud sample_surface(const Mesh& mesh, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DataError("sample_surface: point count must be >= 1");
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    total += triangle_area(mesh, i);
    cumulative[i] = total;
  }
  if (!(total > 0.0)) throw MeshError("sample_surface: mesh has zero total area", 0);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointCloud pc;
  pc.points.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double pick = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    std::size_t tri = static_cast<std::size_t>(it - cumulative.begin());
    if (tri >= cumulative.size()) tri = cumulative.size() - 1;
    const auto& t = mesh.triangles[tri];
    const auto& a = mesh.vertices[t[0]];
    const auto& b = mesh.vertices[t[1]];
    const auto& c = mesh.vertices[t[2]];
    const double r1 = std::sqrt(unit(rng));
    const double r2 = unit(rng);
    const double wa = 1.0 - r1, wb = r1 * (1.0 - r2), wc = r1 * r2;
    Vec3 p;
    for (int k = 0; k < 3; ++k) p[k] = static_cast<float>(wa * a[k] + wb * b[k] + wc * c[k]);
    pc.points.push_back(p);
  }
  return pc;
}

std::vector<std::size_t> farthest_point_sample(const PointCloud& pc, std::size_t m,
                                               std::size_t start) {
  const std::size_t n = pc.size();
  if (m == 0 || m > n) {
    throw DataError("farthest_point_sample: requested " + std::to_string(m) +
                    " points from a cloud of " + std::to_string(n));
  }
  if (start >= n) throw DataError("farthest_point_sample: start index out of range");
  std::vector<std::size_t> out;
  out.reserve(m);
  std::vector<double> mind(n, std::numeric_limits<double>::infinity());
  std::size_t cur = start;
  for (std::size_t s = 0; s < m; ++s) {
    out.push_back(cur);
    mind[cur] = -1.0;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (mind[i] < 0.0) continue;
      const double d = dist2(pc.points[i], pc.points[cur]);
      if (d < mind[i]) mind[i] = d;
      if (mind[i] > best_d) {
        best_d = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  return out;
}

PointCloud select(const PointCloud& pc, const std::vector<std::size_t>& indices) {
  PointCloud out;
  out.points.reserve(indices.size());
  for (auto i : indices) out.points.push_back(pc.points.at(i));
  if (pc.colors) {
    out.colors.emplace();
    out.colors->reserve(indices.size());
    for (auto i : indices) out.colors->push_back(pc.colors->at(i));
  }
  return out;
}

PointCloud normalize_unit_sphere(const PointCloud& pc) {
  if (pc.size() == 0) throw DataError("normalize_unit_sphere: empty point cloud");
  double c[3] = {0, 0, 0};
  for (const auto& p : pc.points) {
    for (int k = 0; k < 3; ++k) c[k] += p[k];
  }
  for (double& v : c) v /= static_cast<double>(pc.size());
  double max_norm = 0.0;
  for (const auto& p : pc.points) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += (p[k] - c[k]) * (p[k] - c[k]);
    max_norm = std::max(max_norm, std::sqrt(s));
  }
  if (!(max_norm > 0.0)) {
    throw DataError("normalize_unit_sphere: all points identical (zero scale)");
  }
  PointCloud out = pc;
  for (auto& p : out.points) {
    for (int k = 0; k < 3; ++k) p[k] = static_cast<float>((p[k] - c[k]) / max_norm);
  }
  return out;
}

std::vector<Viewpoint> make_viewpoints(std::size_t k, double elevation) {
  if (k == 0) throw DataError("make_viewpoints: view count must be >= 1");
  const double step = 360.0 / static_cast<double>(k);
  std::vector<Viewpoint> views(k);
  for (std::size_t i = 0; i < k; ++i) {
    views[i] = {static_cast<double>(i) * step, elevation, i};
  }
  return views;
}

PointCloud augment(const PointCloud& pc, const AugmentSpec& spec, std::uint64_t seed) {
  if (spec.scale_lo > spec.scale_hi) throw DataError("augment: scale range lo > hi");
  if (spec.dropout_rate < 0.0f || spec.dropout_rate >= 1.0f) {
    throw DataError("augment: dropout rate must be in [0, 1)");
  }
  if (spec.jitter_sigma < 0.0f) throw DataError("augment: jitter sigma must be >= 0");
  PointCloud out = pc;
  if (spec.is_identity()) return out;
  std::mt19937_64 rng(seed);
  if (spec.rotate_z) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    const double th = angle(rng);
    const double cs = std::cos(th), sn = std::sin(th);
    for (auto& p : out.points) {
      const double x = p[0], y = p[1];
      p[0] = static_cast<float>(cs * x - sn * y);
      p[1] = static_cast<float>(sn * x + cs * y);
    }
  }
  if (spec.scale_lo != 1.0f || spec.scale_hi != 1.0f) {
    std::uniform_real_distribution<float> scale(spec.scale_lo, spec.scale_hi);
    const float s = spec.scale_lo == spec.scale_hi ? spec.scale_lo : scale(rng);
    for (auto& p : out.points) {
      for (auto& v : p) v *= s;
    }
  }
  if (spec.jitter_sigma > 0.0f) {
    std::normal_distribution<float> noise(0.0f, spec.jitter_sigma);
    for (auto& p : out.points) {
      for (auto& v : p) v += noise(rng);
    }
  }
  if (spec.dropout_rate > 0.0f) {
    std::bernoulli_distribution drop(spec.dropout_rate);
    std::vector<std::size_t> keep;
    keep.reserve(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!drop(rng)) keep.push_back(i);
    }
    if (keep.empty()) keep.push_back(0);
    out = select(out, keep);
  }
  return out;
}

std::array<double, 3> view_direction(const Viewpoint& vp) {
  const double az = vp.azimuth * std::numbers::pi / 180.0;
  const double el = vp.elevation * std::numbers::pi / 180.0;
  return {std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
}

DepthImage render_pointsplat(const PointCloud& pc, const Viewpoint& vp, std::size_t res) {
  if (res == 0) throw DataError("render_pointsplat: resolution must be >= 1");
  const double az = vp.azimuth * std::numbers::pi / 180.0;
  const auto d = view_direction(vp);
  const std::array<double, 3> right = {-std::sin(az), std::cos(az), 0.0};
  const std::array<double, 3> up = {d[1] * right[2] - d[2] * right[1],
                                    d[2] * right[0] - d[0] * right[2],
                                    d[0] * right[1] - d[1] * right[0]};
  DepthImage img;
  img.res = res;
  img.pixels.assign(res * res, 0.0f);
  const double half = static_cast<double>(res) / 2.0;
  const double center = (static_cast<double>(res) - 1.0) / 2.0;
  for (const auto& p : pc.points) {
    const double x = right[0] * p[0] + right[1] * p[1] + right[2] * p[2];
    const double y = up[0] * p[0] + up[1] * p[1] + up[2] * p[2];
    const double z = d[0] * p[0] + d[1] * p[1] + d[2] * p[2];
    if (std::abs(x) > 1.0 || std::abs(y) > 1.0) continue;
    const double hi = static_cast<double>(res) - 1.0;
    const double col = std::clamp(std::round(x * half + center), 0.0, hi);
    const double row = std::clamp(std::round(center - y * half), 0.0, hi);
    const float value = static_cast<float>(1.0 / (2.0 - std::clamp(z, -1.0, 1.0)));
    float& px = img.pixels[static_cast<std::size_t>(row) * res + static_cast<std::size_t>(col)];
    px = std::max(px, value);
  }
  return img;
}

std::vector<std::uint8_t> encode_point_cloud(const PointCloud& pc) {
  binio::Writer w;
  w.magic(std::string_view(kPointCloudMagic, 4));
  w.u32(kPointCloudVersion);
  w.u32(static_cast<std::uint32_t>(pc.size()));
  w.u8(pc.has_color() ? 1 : 0);
  for (const auto& p : pc.points) w.f32s(p);
  if (pc.colors) {
    for (const auto& c : *pc.colors) w.f32s(c);
  }
  return w.take();
}

PointCloud decode_point_cloud(std::span<const std::uint8_t> bytes, const std::string& what) {
  binio::Reader r(bytes, what);
  r.expect_magic(std::string_view(kPointCloudMagic, 4));
  const auto version = r.u32();
  if (version != kPointCloudVersion) {
    throw FormatError(what + ": unsupported UPC1 version " + std::to_string(version));
  }
  const auto n = r.u32();
  const auto has_color = r.u8();
  if (n == 0) throw InvariantError(what + ": point cloud has zero points");
  if (has_color > 1) throw FormatError(what + ": invalid has_color flag");
  auto read_block = [&](std::vector<Vec3>& dst) {
    const auto flat = r.f32s(static_cast<std::size_t>(n) * 3);
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) dst[i] = {flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]};
  };
  PointCloud pc;
  read_block(pc.points);
  if (has_color) {
    pc.colors.emplace();
    read_block(*pc.colors);
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes after payload");
  for (std::size_t i = 0; i < n; ++i) {
    for (float v : pc.points[i]) {
      if (!std::isfinite(v)) {
        throw InvariantError(what + ": non-finite coordinate at point " + std::to_string(i));
      }
    }
  }
  return pc;
}

void write_point_cloud(const PointCloud& pc, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_point_cloud(pc));
}

PointCloud read_point_cloud(const std::filesystem::path& path) {
  const auto bytes = binio::read_file(path);
  return decode_point_cloud(bytes, path.string());
}

}  // namespace ulip::geometry
