#pragma once

// Flat `key=value` configuration text: one pair per line, `#` starts a
// comment, blank lines ignored.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace bayesbeat {

/// Throws std::invalid_argument with the 1-based line number of a malformed
/// line or a duplicated key.
std::map<std::string, std::string> parse_kv_text(std::string_view text);
std::map<std::string, std::string> load_kv_file(const std::filesystem::path& path);

/// Removes and returns the entries whose key starts with `prefix.`, with the
/// prefix stripped.
std::map<std::string, std::string> take_prefixed(std::map<std::string, std::string>& kv, std::string_view prefix);

std::vector<std::string> split(std::string_view text, char sep);
std::string trim(std::string_view text);

std::size_t parse_size(std::string_view text, std::string_view what);
std::uint64_t parse_u64(std::string_view text, std::string_view what);
double parse_double(std::string_view text, std::string_view what);
bool parse_bool(std::string_view text, std::string_view what);

/// Shortest text that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace bayesbeat
