#pragma once

// Flat key=value experiment configuration. Every command declares its keys
// with defaults; files and command-line assignments may only set declared
// keys.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ematrace::cli {

// Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit code 3.
class InvariantError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

class Config {
 public:
  explicit Config(std::vector<KeySpec> specs);

  // Lines of `key = value`; blank lines and lines starting with '#' are skipped.
  void load_file(const std::filesystem::path& path);
  // One `key=value` assignment.
  void assign(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& str(const std::string& key) const;
  long long integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::string> list(const std::string& key) const;  // comma separated

  // Resolved values, one `key = value` line each, in declaration order.
  std::string snapshot() const;
  std::string help() const;

 private:
  const KeySpec& spec(const std::string& key) const;
  std::vector<KeySpec> specs_;
  std::map<std::string, std::string> values_;
};

}  // namespace ematrace::cli
