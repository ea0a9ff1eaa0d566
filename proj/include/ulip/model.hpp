#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ulip/ag.hpp"
#include "ulip/geometry.hpp"

namespace ulip::model {

/// Shared per-point MLP, max pool over points, head MLP, L2 normalize.
struct EncoderConfig {
  std::uint32_t in_channels = 3;  // 3 = xyz, 6 = xyzrgb
  std::vector<std::uint32_t> point_widths{64, 128, 256};
  std::vector<std::uint32_t> head_widths{256, 64};
  std::uint32_t embed_dim = 64;

  void validate() const;
  /// Defaults with the head's last width set to `dim`.
  static EncoderConfig for_dim(std::uint32_t dim);
};

struct EncoderParams {
  // point.{i}.weight, point.{i}.bias, ..., head.{i}.weight, head.{i}.bias
  std::vector<ag::Parameter> tensors;

  std::size_t count() const;  // total scalar count
};

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Validates a point cloud against the config and lays it out as an
/// N x in_channels matrix. Missing colors are filled with 0.5; surplus colors
/// are dropped for xyz-only encoders.
template <class T>
ag::BasicTensor<T> point_features(const geometry::PointCloud& pc, const EncoderConfig& config);

/// Builds the encoder graph. `params` are leaves in EncoderParams order.
/// Returns a B x D node of unit rows.
template <class T>
ag::Var encode_graph(ag::BasicGraph<T>& g, const EncoderConfig& config,
                     std::span<const ag::Var> params,
                     std::span<const geometry::PointCloud> clouds);

/// Inference without gradient tracking. Evaluated in chunks; every row
/// is computed independently so chunking never changes results.
ag::Tensor encode(const EncoderParams& params, const EncoderConfig& config,
                  std::span<const geometry::PointCloud> clouds);

}  // namespace ulip::model
