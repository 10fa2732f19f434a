#pragma once

// Command-line front end: search, train, fuse and eval.
//
// Configuration is a JSON document with nested sections. Every key can also be
// given as a dotted flag (--search.lr_alpha=0.1); flags beat the file, the file
// beats built-in defaults, and unknown keys are rejected.

#include <json.hpp>

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsds::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KeyType { integer, real, optional_real, text };

struct ConfigKey {
  std::string name;  // dotted, e.g. "search.lr_alpha"
  KeyType type;
  nlohmann::json default_value;
  std::string help;
};

const std::vector<ConfigKey>& config_keys();

/// Built-in defaults as a nested document.
nlohmann::json default_config();

/// Converts a flag's text to the key's JSON type; throws ConfigError on bad input.
nlohmann::json parse_value(const ConfigKey& key, const std::string& text);

/// Merges defaults < file < flags. Unknown keys in the file or flags raise ConfigError.
nlohmann::json resolve_config(const nlohmann::json& file, const std::map<std::string, std::string>& flags);

/// Reads a JSON config file; throws ConfigError when missing or malformed.
nlohmann::json read_config_file(const std::string& path);

int run(int argc, const char* const* argv);

}  // namespace hsds::cli
