#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace aevb::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsageError = 1;
inline constexpr int kNumericFailure = 2;

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// Flat "key = value" text, one pair per line, '#' starts a comment. Throws
// std::runtime_error naming the line for malformed lines.
std::vector<ConfigEntry> parse_config(const std::string& text);

// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aevb::cli
