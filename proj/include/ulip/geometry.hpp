#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ulip::geometry {

using Vec3 = std::array<float, 3>;

struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::optional<std::vector<Vec3>> colors;  // rgb in [0, 1]

  std::size_t size() const { return points.size(); }
  bool has_color() const { return colors.has_value(); }
};

struct Viewpoint {
  double azimuth = 0.0;    // degrees, [0, 360)
  double elevation = 0.0;  // degrees
  std::size_t index = 0;
};

struct AugmentSpec {
  bool rotate_z = false;
  float scale_lo = 1.0f;
  float scale_hi = 1.0f;
  float jitter_sigma = 0.0f;
  float dropout_rate = 0.0f;

  bool is_identity() const {
    return !rotate_z && scale_lo == 1.0f && scale_hi == 1.0f && jitter_sigma == 0.0f &&
           dropout_rate == 0.0f;
  }
};

struct DepthImage {
  std::size_t res = 0;
  std::vector<float> pixels;  // row-major, row 0 at the top

  float at(std::size_t row, std::size_t col) const { return pixels[row * res + col]; }
};

inline constexpr double kDefaultElevation = 30.0;

// OBJ subset: `v x y z` and `f a b c ...` (1-based, negative indices relative,
// `a/b/c` forms accepted); polygons are fan-triangulated; other lines ignored.
Mesh parse_obj(std::istream& in, const std::string& source = "<stream>");
Mesh load_mesh(const std::filesystem::path& path);
void write_obj(const Mesh& mesh, const std::filesystem::path& path);

double triangle_area(const Mesh& mesh, std::size_t tri);

/// Area-weighted uniform surface sampling.
PointCloud sample_surface(const Mesh& mesh, std::size_t n, std::uint64_t seed);

/// Greedy max-min subsampling; ties go to the lowest index.
std::vector<std::size_t> farthest_point_sample(const PointCloud& pc, std::size_t m,
                                               std::size_t start = 0);

PointCloud select(const PointCloud& pc, const std::vector<std::size_t>& indices);

/// Centers on the centroid and scales so the farthest point has norm 1.
PointCloud normalize_unit_sphere(const PointCloud& pc);

std::vector<Viewpoint> make_viewpoints(std::size_t k, double elevation = kDefaultElevation);

/// z-rotation, uniform scale, gaussian jitter, then dropout (>= 1 point kept).
PointCloud augment(const PointCloud& pc, const AugmentSpec& spec, std::uint64_t seed);

/// Unit view direction pointing from the origin toward the camera.
std::array<double, 3> view_direction(const Viewpoint& vp);

/// Orthographic point splat. Pixel value is inverse camera distance
/// 1 / (2 - depth) for the nearest point, background 0. The view square
/// [-1, 1]^2 maps onto the image; points outside it are dropped.
DepthImage render_pointsplat(const PointCloud& pc, const Viewpoint& vp, std::size_t res);

// UPC1 point-cloud files.
std::vector<std::uint8_t> encode_point_cloud(const PointCloud& pc);
PointCloud decode_point_cloud(std::span<const std::uint8_t> bytes, const std::string& what);
void write_point_cloud(const PointCloud& pc, const std::filesystem::path& path);
PointCloud read_point_cloud(const std::filesystem::path& path);

}  // namespace ulip::geometry
