#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace maskattn {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

// Parses `key = value` lines. '#' starts a comment; blank lines are skipped.
// Malformed lines and repeated keys raise ConfigError.
KeyValues parse_key_values(const std::string& text);
std::string format_key_values(const KeyValues& entries);

// Value conversions; `key` only appears in error messages.
std::size_t parse_count(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
double parse_real(const std::string& key, const std::string& value);
// on/off, true/false, 1/0.
bool parse_switch(const std::string& key, const std::string& value);
std::vector<double> parse_real_list(const std::string& key, const std::string& value);

// Shortest text that parses back to the same double (%.17g).
std::string format_real(double value);
std::string format_real_list(const std::vector<double>& values);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace maskattn
