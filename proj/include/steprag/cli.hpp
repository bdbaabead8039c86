#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steprag/error.hpp"

namespace steprag {

namespace exit_code {
inline constexpr int kOk = 0;
inline constexpr int kOther = 1;
inline constexpr int kUsage = 2;
inline constexpr int kConfig = 3;
inline constexpr int kBackend = 4;
inline constexpr int kData = 5;
}  // namespace exit_code

/// Maps a library failure onto the process exit code.
int exit_code_for(const Error& error) noexcept;

struct RunManifest {
  std::string subcommand;
  std::string config_path;
  std::string config_fingerprint;            // FNV-1a of the config file bytes
  std::string effective_config_fingerprint;  // after flag overrides
  std::uint64_t seed = 0;
  std::string backend;
  std::map<std::string, std::string> inputs;
  std::vector<std::string> outputs;
  std::string started_at;  // UTC, ISO 8601
  double wall_clock_seconds = 0.0;
  std::map<std::string, std::size_t> calls;  // per role
  int exit_code = 0;
  std::optional<std::string> error;
};

void to_json(nlohmann::json& j, const RunManifest& manifest);
void from_json(const nlohmann::json& j, RunManifest& manifest);

inline constexpr const char* kManifestName = "manifest.json";

/// Parses argv (program name first), runs the subcommand and writes
/// <out>/manifest.json. Never throws.
int run_command(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);
int run_command(int argc, const char* const* argv);

}  // namespace steprag
