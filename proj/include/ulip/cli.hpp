#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "ulip/model.hpp"
#include "ulip/training.hpp"

namespace ulip::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

/// JSON run configuration with sections data, model, train, eval and output.
/// Relative paths are taken relative to the working directory.
struct RunConfig {
  // data
  std::optional<std::filesystem::path> manifest;
  std::optional<std::filesystem::path> images;
  std::optional<std::filesystem::path> texts;
  // eval
  std::optional<std::filesystem::path> labels;
  std::optional<std::filesystem::path> label_names;
  std::optional<std::filesystem::path> eval_manifest;
  std::size_t eval_k = 5;
  // model / train
  model::EncoderConfig model;
  training::TrainConfig train;
  // output
  std::filesystem::path output = "out";
};

RunConfig parse_run_config(const std::string& text, const std::string& what);
RunConfig load_run_config(const std::filesystem::path& path);

/// Runs one subcommand. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ulip::cli
