#include "ulip/config.hpp"

#include <algorithm>

#include "ulip/errors.hpp"

namespace ulip::config {

namespace {

template <class V>
void read_opt(const Json& j, const char* key, V& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

const char* reduction_name(training::Reduction r) {
  return r == training::Reduction::kSum ? "sum" : "mean";
}

const char* subsample_name(training::Subsample s) {
  return s == training::Subsample::kFps ? "fps" : "truncate";
}

}  // namespace

void reject_unknown(const Json& obj, std::initializer_list<const char*> allowed,
                    const std::string& section) {
  if (!obj.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    const bool ok = std::any_of(allowed.begin(), allowed.end(),
                                [&](const char* a) { return key == a; });
    if (!ok) throw ConfigError(section + ": unknown key '" + key + "'");
  }
}

Json to_json(const model::EncoderConfig& c) {
  Json j;
  j["in_channels"] = c.in_channels;
  j["point_widths"] = c.point_widths;
  j["head_widths"] = c.head_widths;
  j["embed_dim"] = c.embed_dim;
  return j;
}

Json to_json(const geometry::AugmentSpec& a) {
  Json j;
  j["rotate_z"] = a.rotate_z;
  j["scale_range"] = {a.scale_lo, a.scale_hi};
  j["jitter_sigma"] = a.jitter_sigma;
  j["dropout_rate"] = a.dropout_rate;
  return j;
}

Json to_json(const training::TrainConfig& c) {
  Json j;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["lr"] = c.adam.lr;
  j["beta1"] = c.adam.beta1;
  j["beta2"] = c.adam.beta2;
  j["eps"] = c.adam.eps;
  j["seed"] = c.seed;
  j["reduction"] = reduction_name(c.reduction);
  j["loss_weights"] = {c.weights.image, c.weights.text};
  j["point_budget"] = c.batch.point_budget;
  j["subsample"] = subsample_name(c.batch.subsample);
  j["caption_topk"] = c.batch.caption_topk;
  j["augment"] = to_json(c.batch.augment);
  j["tau_init"] = c.tau_init;
  j["tau_max"] = c.max_logit_scale;
  j["cosine_decay"] = c.cosine_decay;
  return j;
}

model::EncoderConfig encoder_from_json(const Json& j, model::EncoderConfig c) {
  reject_unknown(j, {"in_channels", "point_widths", "head_widths", "embed_dim"}, "model");
  read_opt(j, "in_channels", c.in_channels, "model");
  read_opt(j, "point_widths", c.point_widths, "model");
  read_opt(j, "head_widths", c.head_widths, "model");
  read_opt(j, "embed_dim", c.embed_dim, "model");
  return c;
}

geometry::AugmentSpec augment_from_json(const Json& j, geometry::AugmentSpec a) {
  reject_unknown(j, {"rotate_z", "scale_range", "jitter_sigma", "dropout_rate"}, "augment");
  read_opt(j, "rotate_z", a.rotate_z, "augment");
  if (j.contains("scale_range")) {
    std::vector<float> r;
    read_opt(j, "scale_range", r, "augment");
    if (r.size() != 2) throw ConfigError("augment.scale_range: expected [lo, hi]");
    a.scale_lo = r[0];
    a.scale_hi = r[1];
  }
  read_opt(j, "jitter_sigma", a.jitter_sigma, "augment");
  read_opt(j, "dropout_rate", a.dropout_rate, "augment");
  return a;
}

training::TrainConfig train_from_json(const Json& j, training::TrainConfig c) {
  reject_unknown(j,
                 {"batch_size", "steps", "lr", "beta1", "beta2", "eps", "seed", "reduction",
                  "loss_weights", "point_budget", "subsample", "caption_topk", "augment",
                  "tau_init", "tau_max", "cosine_decay", "workers"},
                 "train");
  read_opt(j, "batch_size", c.batch_size, "train");
  read_opt(j, "steps", c.steps, "train");
  read_opt(j, "lr", c.adam.lr, "train");
  read_opt(j, "beta1", c.adam.beta1, "train");
  read_opt(j, "beta2", c.adam.beta2, "train");
  read_opt(j, "eps", c.adam.eps, "train");
  read_opt(j, "seed", c.seed, "train");
  if (j.contains("reduction")) {
    std::string r;
    read_opt(j, "reduction", r, "train");
    if (r == "sum") {
      c.reduction = training::Reduction::kSum;
    } else if (r == "mean") {
      c.reduction = training::Reduction::kMean;
    } else {
      throw ConfigError("train.reduction: expected 'sum' or 'mean', got '" + r + "'");
    }
  }
  if (j.contains("loss_weights")) {
    std::vector<float> w;
    read_opt(j, "loss_weights", w, "train");
    if (w.size() != 2) throw ConfigError("train.loss_weights: expected [w_image, w_text]");
    c.weights = {w[0], w[1]};
  }
  read_opt(j, "point_budget", c.batch.point_budget, "train");
  if (j.contains("subsample")) {
    std::string s;
    read_opt(j, "subsample", s, "train");
    if (s == "fps") {
      c.batch.subsample = training::Subsample::kFps;
    } else if (s == "truncate") {
      c.batch.subsample = training::Subsample::kTruncate;
    } else {
      throw ConfigError("train.subsample: expected 'fps' or 'truncate', got '" + s + "'");
    }
  }
  read_opt(j, "caption_topk", c.batch.caption_topk, "train");
  if (j.contains("augment")) c.batch.augment = augment_from_json(j.at("augment"), c.batch.augment);
  read_opt(j, "tau_init", c.tau_init, "train");
  read_opt(j, "tau_max", c.max_logit_scale, "train");
  read_opt(j, "cosine_decay", c.cosine_decay, "train");
  read_opt(j, "workers", c.batch.workers, "train");
  return c;
}

}  // namespace ulip::config
