#pragma once

// Line-oriented `key = value` files with `[section]` headers. `#` and `;`
// start comments; blank lines are ignored.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dyntex::config {

struct IniEntry {
  std::string section;
  std::string key;
  std::string value;
  int line = 0;
};

/// Throws Error(ConfigError) on malformed lines or duplicate keys.
std::vector<IniEntry> parse_ini(std::string_view text, const std::string& origin = "<config>");
std::vector<IniEntry> read_ini(const std::filesystem::path& path);

/// Value parsers; throw Error(ConfigError) naming `what` on bad input.
int parse_int(const std::string& text, const std::string& what);
std::uint64_t parse_u64(const std::string& text, const std::string& what);
double parse_double(const std::string& text, const std::string& what);

}  // namespace dyntex::config
