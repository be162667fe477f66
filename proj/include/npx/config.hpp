#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "npx/gan_training.hpp"
#include "npx/siamese.hpp"

namespace npx {

/// Run configuration parsing. Missing keys keep their defaults; unknown keys
/// and type mismatches raise one ValidationError naming every offending key.
GanRunConfig parse_gan_config(const nlohmann::json& j);
GanRunConfig parse_gan_config_file(const std::filesystem::path& path);

SiameseRunConfig parse_siamese_config(const nlohmann::json& j);
SiameseRunConfig parse_siamese_config_file(const std::filesystem::path& path);

}  // namespace npx
