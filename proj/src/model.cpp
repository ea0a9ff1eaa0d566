#include "ulip/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "ulip/errors.hpp"

namespace ulip::model {

void EncoderConfig::validate() const {
  if (in_channels != 3 && in_channels != 6) {
    throw ConfigError("encoder: in_channels must be 3 or 6, got " + std::to_string(in_channels));
  }
  if (point_widths.empty() || head_widths.empty()) {
    throw ConfigError("encoder: point and head widths must be non-empty");
  }
  for (auto w : point_widths) {
    if (w == 0) throw ConfigError("encoder: point widths must be >= 1");
  }
  for (auto w : head_widths) {
    if (w == 0) throw ConfigError("encoder: head widths must be >= 1");
  }
  if (head_widths.back() != embed_dim) {
    throw ConfigError("encoder: last head width " + std::to_string(head_widths.back()) +
                      " != embed_dim " + std::to_string(embed_dim));
  }
}

EncoderConfig EncoderConfig::for_dim(std::uint32_t dim) {
  EncoderConfig c;
  c.embed_dim = dim;
  c.head_widths = {256, dim};
  return c;
}

std::size_t EncoderParams::count() const {
  std::size_t n = 0;
  for (const auto& p : tensors) n += p.tensor.size();
  return n;
}

EncoderParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  EncoderParams params;
  auto add_layer = [&](const std::string& prefix, std::uint32_t fan_in, std::uint32_t fan_out) {
    const float bound = static_cast<float>(std::sqrt(6.0 / fan_in));
    std::uniform_real_distribution<float> dist(-bound, bound);
    ag::Parameter w{prefix + ".weight", ag::Tensor::zeros(fan_in, fan_out)};
    for (auto& v : w.tensor.data) v = dist(rng);
    w.tensor.set_requires_grad(true);
    ag::Parameter b{prefix + ".bias", ag::Tensor::zeros(1, fan_out)};
    b.tensor.set_requires_grad(true);
    params.tensors.push_back(std::move(w));
    params.tensors.push_back(std::move(b));
  };
  std::uint32_t width = config.in_channels;
  for (std::size_t i = 0; i < config.point_widths.size(); ++i) {
    add_layer("point." + std::to_string(i), width, config.point_widths[i]);
    width = config.point_widths[i];
  }
  for (std::size_t i = 0; i < config.head_widths.size(); ++i) {
    add_layer("head." + std::to_string(i), width, config.head_widths[i]);
    width = config.head_widths[i];
  }
  return params;
}

template <class T>
ag::BasicTensor<T> point_features(const geometry::PointCloud& pc, const EncoderConfig& config) {
  if (pc.size() == 0) throw DataError("encode: empty point cloud");
  if (pc.colors && pc.colors->size() != pc.size()) {
    throw DataError("encode: channel mismatch, " + std::to_string(pc.colors->size()) +
                    " colors for " + std::to_string(pc.size()) + " points");
  }
  const std::size_t c = config.in_channels;
  auto x = ag::BasicTensor<T>::zeros(pc.size(), c);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) x.data[i * c + k] = static_cast<T>(pc.points[i][k]);
    if (c == 6) {
      for (std::size_t k = 0; k < 3; ++k) {
        x.data[i * c + 3 + k] = pc.colors ? static_cast<T>((*pc.colors)[i][k]) : T(0.5);
      }
    }
  }
  return x;
}

template <class T>
ag::Var encode_graph(ag::BasicGraph<T>& g, const EncoderConfig& config,
                     std::span<const ag::Var> params,
                     std::span<const geometry::PointCloud> clouds) {
  config.validate();
  const std::size_t n_point = config.point_widths.size();
  const std::size_t n_head = config.head_widths.size();
  if (params.size() != 2 * (n_point + n_head)) {
    throw ShapeError("encode: expected " + std::to_string(2 * (n_point + n_head)) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  if (clouds.empty()) throw DataError("encode: empty batch");

  std::vector<ag::Var> pooled;
  pooled.reserve(clouds.size());
  for (const auto& pc : clouds) {
    ag::Var h = g.constant(point_features<T>(pc, config));
    for (std::size_t l = 0; l < n_point; ++l) {
      h = g.relu(g.add(g.matmul(h, params[2 * l]), params[2 * l + 1]));
    }
    pooled.push_back(g.max_axis(h, 0));
  }
  ag::Var z = g.concat_rows(pooled);
  for (std::size_t l = 0; l < n_head; ++l) {
    const std::size_t at = 2 * (n_point + l);
    z = g.add(g.matmul(z, params[at]), params[at + 1]);
    if (l + 1 < n_head) z = g.relu(z);
  }
  return g.l2_normalize_rows(z);
}

ag::Tensor encode(const EncoderParams& params, const EncoderConfig& config,
                  std::span<const geometry::PointCloud> clouds) {
  constexpr std::size_t kChunk = 16;
  if (clouds.empty()) throw DataError("encode: empty batch");
  ag::Tensor out = ag::Tensor::zeros(clouds.size(), config.embed_dim);
  for (std::size_t start = 0; start < clouds.size(); start += kChunk) {
    const std::size_t len = std::min(kChunk, clouds.size() - start);
    ag::Graph g;
    std::vector<ag::Var> leaves;
    leaves.reserve(params.tensors.size());
    for (const auto& p : params.tensors) leaves.push_back(g.constant(p.tensor));
    const ag::Var y = encode_graph<float>(g, config, leaves, clouds.subspan(start, len));
    const auto& v = g.value(y);
    std::copy(v.data.begin(), v.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(start * config.embed_dim));
  }
  return out;
}

template ag::BasicTensor<float> point_features<float>(const geometry::PointCloud&,
                                                      const EncoderConfig&);
template ag::BasicTensor<double> point_features<double>(const geometry::PointCloud&,
                                                        const EncoderConfig&);
template ag::Var encode_graph<float>(ag::BasicGraph<float>&, const EncoderConfig&,
                                     std::span<const ag::Var>,
                                     std::span<const geometry::PointCloud>);
template ag::Var encode_graph<double>(ag::BasicGraph<double>&, const EncoderConfig&,
                                      std::span<const ag::Var>,
                                      std::span<const geometry::PointCloud>);

}  // namespace ulip::model
