#pragma once

#include <filesystem>
#include <string>

#include "lungcad/pipeline.hpp"

namespace lungcad::cli {

// Parses a JSON config document. Missing keys keep their defaults; unknown
// keys and out-of-range values raise kConfiguration.
PipelineConfig parse_config(const std::string& json_text, const std::string& source = "config");
PipelineConfig load_config(const std::filesystem::path& path);

// Fully resolved config, suitable for parse_config.
std::string config_to_json(const PipelineConfig& cfg);

}  // namespace lungcad::cli
