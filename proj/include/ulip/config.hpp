#pragma once

#include <string>

#include <json.hpp>

#include "ulip/model.hpp"
#include "ulip/training.hpp"

namespace ulip::config {

using Json = nlohmann::ordered_json;

/// Throws ConfigError naming the first key of `obj` not in `allowed`.
void reject_unknown(const Json& obj, std::initializer_list<const char*> allowed,
                    const std::string& section);

Json to_json(const model::EncoderConfig& c);
Json to_json(const training::TrainConfig& c);
Json to_json(const geometry::AugmentSpec& a);

/// Overlay `j` onto `base`; unknown keys are rejected.
model::EncoderConfig encoder_from_json(const Json& j, model::EncoderConfig base = {});
training::TrainConfig train_from_json(const Json& j, training::TrainConfig base = {});
geometry::AugmentSpec augment_from_json(const Json& j, geometry::AugmentSpec base = {});

}  // namespace ulip::config
