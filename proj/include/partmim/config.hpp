#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "partmim/losses.hpp"
#include "partmim/mask_sampling.hpp"
#include "partmim/model.hpp"
#include "partmim/training.hpp"

namespace partmim {

using nlohmann::json;

json to_json(const ModelConfig& c);
json to_json(const SamplerConfig& c);
json to_json(const LossConfig& c);
json to_json(const TrainConfig& c);

// Parsers reject unknown keys; missing keys keep their defaults.
ModelConfig model_config_from_json(const json& j);
SamplerConfig sampler_config_from_json(const json& j);
LossConfig loss_config_from_json(const json& j);
TrainConfig train_config_from_json(const json& j);

/// Applies "dotted.key=value" assignments. Values parse as JSON when
/// possible, otherwise as strings. Short aliases: gamma, tau, beta, strategy.
void apply_overrides(json& config, const std::vector<std::string>& assignments);

/// Starts from `base`, merges the JSON config file (when `path` is non-empty),
/// applies overrides and validates.
TrainConfig load_train_config(const std::string& path, const std::vector<std::string>& overrides,
                              const TrainConfig& base = {});

/// Settings for the desk-scale synthetic run (64x32 images, 8x4 patch grid).
TrainConfig desk_scale_config();

/// Smallest model used for gradient checks: dim 8, depth 1, 2 heads, 2x2 grid of 8 px patches.
TrainConfig tiny_check_config();

}  // namespace partmim
