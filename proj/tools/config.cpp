#include "config.hpp"

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace ematrace::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config::Config(std::vector<KeySpec> specs) : specs_(std::move(specs)) {
  for (const auto& s : specs_) {
    if (!values_.emplace(s.key, s.default_value).second) throw std::logic_error("duplicate config key " + s.key);
  }
}

const KeySpec& Config::spec(const std::string& key) const {
  for (const auto& s : specs_) {
    if (s.key == key) return s;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

void Config::set(const std::string& key, const std::string& value) {
  spec(key);
  values_[key] = value;
}

void Config::assign(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      assign(t);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

const std::string& Config::str(const std::string& key) const {
  spec(key);
  return values_.at(key);
}

long long Config::integer(const std::string& key) const {
  const std::string& v = str(key);
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return x;
}

double Config::real(const std::string& key) const {
  const std::string& v = str(key);
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

bool Config::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError(key + ": expected 0/1/true/false, got '" + v + "'");
}

std::vector<std::string> Config::list(const std::string& key) const {
  std::vector<std::string> out;
  std::stringstream ss(str(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string Config::snapshot() const {
  std::string out;
  for (const auto& s : specs_) out += s.key + " = " + values_.at(s.key) + "\n";
  return out;
}

std::string Config::help() const {
  std::size_t w = 0;
  for (const auto& s : specs_) w = std::max(w, s.key.size() + s.default_value.size() + 3);
  std::string out = "Config keys (key=value, default shown):\n";
  for (const auto& s : specs_) {
    std::string head = "  " + s.key + "=" + s.default_value;
    head.resize(std::max(head.size() + 2, w + 4), ' ');
    out += head + s.help + "\n";
  }
  return out;
}

}  // namespace ematrace::cli
