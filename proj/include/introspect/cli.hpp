#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace introspect::cli {

using nlohmann::json;

/// Exit statuses of the command line.
inline constexpr int exit_ok = 0;
inline constexpr int exit_failure = 1;
inline constexpr int exit_config = 2;
inline constexpr int exit_numerical = 3;

/// The subcommands that take a module config, in usage order.
const std::vector<std::string>& commands();

/// Defaults of `command`'s config; every accepted key appears here.
json default_config(const std::string& command);

/// Overlays `user` on the defaults. Unknown keys raise ConfigError. Relative
/// path-valued strings are resolved against `base_dir`.
json effective_config(const std::string& command, const json& user, const std::filesystem::path& base_dir);

struct RunResult {
  std::vector<std::string> artifacts;  // relative to the output directory
};

/// Runs one subcommand on an effective config and writes its manifest.
/// `recipe` runs every step of a recipe under out/<step>.
RunResult run_command(const std::string& command, const json& cfg, std::uint64_t seed,
                      const std::filesystem::path& out);

/// Parses argv and runs; returns the process exit status. Errors go to stderr.
int run_cli(int argc, const char* const* argv);

}  // namespace introspect::cli
