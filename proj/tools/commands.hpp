#pragma once

#include "config.hpp"

#include "ematrace/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace ematrace::cli {

struct RunOptions {
  std::filesystem::path out_dir;
  bool force = false;
};

// Command names in display order.
const std::vector<std::string>& command_names();
std::string command_summary(const std::string& command);
std::vector<KeySpec> command_keys(const std::string& command);

// Runs one command with a resolved config. Throws ConfigError,
// InvariantError, spen::DivergenceError or other std::exception.
void run_command(const std::string& command, const Config& config, const RunOptions& options, const Logger& log);

}  // namespace ematrace::cli
