#include "bayesbeat/kvconfig.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bayesbeat {

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    out.push_back(trim(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::map<std::string, std::string> parse_kv_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    std::string_view line = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (!body.empty()) {
      const auto eq = body.find('=');
      if (eq == std::string::npos || eq == 0)
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
      std::string key = trim(std::string_view(body).substr(0, eq));
      if (!kv.emplace(key, trim(std::string_view(body).substr(eq + 1))).second)
        throw std::invalid_argument("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return kv;
}

std::map<std::string, std::string> load_kv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_kv_text(ss.str());
}

std::map<std::string, std::string> take_prefixed(std::map<std::string, std::string>& kv, std::string_view prefix) {
  std::map<std::string, std::string> out;
  const std::string p = std::string(prefix) + ".";
  for (auto it = kv.begin(); it != kv.end();) {
    if (it->first.starts_with(p)) {
      out.emplace(it->first.substr(p.size()), it->second);
      it = kv.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

std::uint64_t parse_u64(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc{} || ptr != t.data() + t.size())
    throw std::invalid_argument(std::string(what) + ": expected a non-negative integer, got '" + t + "'");
  return v;
}

std::size_t parse_size(std::string_view text, std::string_view what) {
  return static_cast<std::size_t>(parse_u64(text, what));
}

double parse_double(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE || !std::isfinite(v))
    throw std::invalid_argument(std::string(what) + ": expected a finite number, got '" + t + "'");
  return v;
}

bool parse_bool(std::string_view text, std::string_view what) {
  const std::string t = trim(text);
  if (t == "1" || t == "true") return true;
  if (t == "0" || t == "false") return false;
  throw std::invalid_argument(std::string(what) + ": expected true/false, got '" + t + "'");
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace bayesbeat
