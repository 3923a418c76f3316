#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "cab/model.hpp"

namespace cab {

using ConfigEntries = std::vector<std::pair<std::string, std::string>>;

// Lossless key=value form of a model configuration.
ConfigEntries model_config_entries(const ModelConfig& cfg);
// Keys absent from `entries` keep their defaults. Throws ConfigError on an
// unknown key or malformed value.
ModelConfig model_config_from_entries(const ConfigEntries& entries);

// Text checkpoint: a format tag, the model configuration, then every
// parameter as "param <name> <rows> <cols> <trainable>" followed by its
// row-major values on one line.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
// Throws FileError when unreadable and ParseError when the content does not
// match the layout implied by its configuration.
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace cab
