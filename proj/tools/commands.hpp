#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lungcad/pipeline.hpp"

namespace lungcad::cli {

// Flags shared by every command. Set values override the config file.
struct CommonOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<double> threshold;  // CADe candidate threshold
  std::optional<std::string> scorer;
  std::filesystem::path out;
};

PipelineConfig resolve_config(const CommonOptions& opt);

// Each command writes its artifacts under `out` (a directory, except for
// cmd_extract where it names the CSV).
void cmd_phantom_gen(std::size_t n, const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_score(const std::vector<std::filesystem::path>& volumes, const PipelineConfig& cfg,
               const std::filesystem::path& out);
void cmd_extract(const std::filesystem::path& probmap, const std::string& patient_id, const PipelineConfig& cfg,
                 const std::filesystem::path& out);
void cmd_detect(const std::filesystem::path& manifest, const PipelineConfig& cfg, const std::filesystem::path& out);
void cmd_eval_froc(const std::filesystem::path& candidates, const std::filesystem::path& annotations,
                   const std::optional<std::filesystem::path>& manifest, Resolution resolution,
                   const PipelineConfig& cfg, const std::filesystem::path& out);
// `detections` (from cmd_detect) skips re-running CADe on the manifest.
void cmd_train_mil(const std::filesystem::path& manifest, const std::optional<std::filesystem::path>& detections,
                   const PipelineConfig& cfg, const std::filesystem::path& out);
double cmd_eval_roc(const std::filesystem::path& model, const std::filesystem::path& manifest,
                    const std::optional<std::filesystem::path>& detections, const PipelineConfig& cfg,
                    const std::filesystem::path& out);
CouplingResult cmd_experiment_coupling(const std::filesystem::path& manifest,
                                       const std::optional<std::filesystem::path>& detections,
                                       const PipelineConfig& cfg, const std::filesystem::path& out);

int exit_code(ErrorKind kind);
// {"error":"<kind>","message":"..."}
std::string error_line(const std::string& kind, const std::string& message);

// Full command-line entry point; returns the process exit code.
int run(int argc, char** argv);

}  // namespace lungcad::cli
