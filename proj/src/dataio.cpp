#include "bayesbeat/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bayesbeat/kvconfig.hpp"
#include "bayesbeat/rng.hpp"
#include "bayesbeat/signal.hpp"

namespace bayesbeat {

std::vector<float> preprocess(std::span<const double> raw, double source_rate) {
  if (source_rate != 128.0 && source_rate != 32.0)
    throw std::invalid_argument("preprocess: source rate must be 128 or 32 Hz");
  const auto expected = static_cast<std::size_t>(kSegmentSeconds * source_rate);
  if (raw.size() != expected)
    throw std::invalid_argument("preprocess: expected " + std::to_string(expected) + " samples (25 s), got " +
                                std::to_string(raw.size()));
  for (double v : raw)
    if (!std::isfinite(v)) throw std::invalid_argument("preprocess: non-finite sample");

  std::vector<double> x(raw.begin(), raw.end());
  if (source_rate == 128.0) x = signal::decimate(x, 4, source_rate);

  const auto pad = static_cast<std::size_t>(4 * kSegmentRate);
  x = signal::sosfiltfilt(signal::butterworth_highpass(2, 0.5, kSegmentRate), x, pad);
  x = signal::sosfiltfilt(signal::butterworth_lowpass(2, 8.0, kSegmentRate), x, pad);

  std::vector<float> out(x.size(), 0.5f);
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const double range = *hi - *lo;
  // Relative test: filtering a constant leaves rounding-level ripple.
  const double scale = std::max(std::abs(*hi), std::abs(*lo));
  if (range > 1e-9 * std::max(scale, 1e-300) && range > 0.0)
    for (std::size_t i = 0; i < x.size(); ++i)
      out[i] = std::clamp(static_cast<float>((x[i] - *lo) / range), 0.0f, 1.0f);
  return out;
}

namespace {

constexpr std::string_view kHeaderPrefix = "bbseg v1 n=";

void append_float(std::string& out, float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

float parse_float(std::string_view s) {
  float v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size() || !std::isfinite(v))
    throw std::invalid_argument("bad sample value '" + std::string(s) + "'");
  return v;
}

}  // namespace

std::string encode_segments(const std::vector<Segment>& segments) {
  std::string out(kHeaderPrefix);
  out += std::to_string(segments.size());
  out += '\n';
  for (const auto& s : segments) {
    if (s.subject_id.empty() || s.subject_id.find_first_of(",\n\r") != std::string::npos)
      throw DataError("subject id '" + s.subject_id + "' is empty or contains a separator");
    if (s.samples.size() != kSegmentLength)
      throw DataError("segment of subject " + s.subject_id + " has " + std::to_string(s.samples.size()) + " samples");
    out += s.subject_id;
    out += ',';
    out += std::to_string(s.label.value_or(-1));
    out += ',';
    if (s.noise_level) {
      char buf[32];
      const auto res = std::to_chars(buf, buf + sizeof buf, *s.noise_level);
      out.append(buf, res.ptr);
    }
    for (float v : s.samples) {
      out += ',';
      append_float(out, v);
    }
    out += '\n';
  }
  return out;
}

std::vector<Segment> decode_segments(std::string_view text) {
  std::vector<Segment> segments;
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) return segments;

  auto next_line = [&text](std::string_view& line) {
    if (text.empty()) return false;
    const auto end = text.find('\n');
    line = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return true;
  };

  std::string_view line;
  next_line(line);
  if (!line.starts_with(kHeaderPrefix)) throw DataError("not a segment file: missing 'bbseg v1 n=<count>' header");
  std::size_t count = 0;
  try {
    count = parse_size(line.substr(kHeaderPrefix.size()), "segment count");
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("segment file header: ") + e.what());
  }

  segments.reserve(count);
  for (std::size_t index = 0; index < count; ++index) {
    if (!next_line(line)) throw DataError("segment file truncated: header announces " + std::to_string(count) +
                                          " records, found " + std::to_string(index));
    try {
      const auto fields = split(line, ',');
      if (fields.size() != 3 + kSegmentLength)
        throw std::invalid_argument("expected " + std::to_string(3 + kSegmentLength) + " fields, got " +
                                    std::to_string(fields.size()));
      Segment s;
      s.subject_id = fields[0];
      if (s.subject_id.empty()) throw std::invalid_argument("empty subject id");
      const auto& lab = fields[1];
      if (lab == "-1") {
        s.label = std::nullopt;
      } else if (lab == "0" || lab == "1") {
        s.label = lab == "1" ? 1 : 0;
      } else {
        throw std::invalid_argument("label must be -1, 0 or 1, got '" + lab + "'");
      }
      if (!fields[2].empty()) {
        const double nl = parse_double(fields[2], "noise_level");
        if (nl < 0.0 || nl > 1.0) throw std::invalid_argument("noise_level outside [0, 1]");
        s.noise_level = nl;
      }
      s.samples.resize(kSegmentLength);
      for (std::size_t i = 0; i < kSegmentLength; ++i) s.samples[i] = parse_float(fields[3 + i]);
      segments.push_back(std::move(s));
    } catch (const std::invalid_argument& e) {
      throw DataError("segment record " + std::to_string(index) + ": " + e.what());
    }
  }
  while (next_line(line))
    if (line.find_first_not_of(" \t") != std::string_view::npos)
      throw DataError("segment file has more records than its header announces (" + std::to_string(count) + ")");
  return segments;
}

void save_segments(const std::vector<Segment>& segments, const std::filesystem::path& path) {
  const std::string text = encode_segments(segments);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<Segment> load_segments(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open segment file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_segments(ss.str());
}

std::string to_string(Partition p) {
  switch (p) {
    case Partition::train: return "train";
    case Partition::val: return "val";
    case Partition::test: return "test";
  }
  return "unknown";
}

std::vector<std::string> SplitManifest::subjects(Partition p) const {
  std::vector<std::string> out;
  for (const auto& [subject, part] : assignment)
    if (part == p) out.push_back(subject);
  return out;
}

std::string SplitManifest::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["fractions"] = {{"train", fractions[0]}, {"val", fractions[1]}, {"test", fractions[2]}};
  for (auto p : {Partition::train, Partition::val, Partition::test}) j["subjects"][to_string(p)] = subjects(p);
  return j.dump(2) + "\n";
}

SplitManifest SplitManifest::from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& f = j.at("fractions");
    m.fractions = {f.at("train").get<double>(), f.at("val").get<double>(), f.at("test").get<double>()};
    for (auto p : {Partition::train, Partition::val, Partition::test})
      for (const auto& s : j.at("subjects").at(to_string(p)))
        if (!m.assignment.emplace(s.get<std::string>(), p).second)
          throw DataError("manifest assigns subject '" + s.get<std::string>() + "' twice");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed split manifest: ") + e.what());
  }
}

SplitManifest split_subjects(const std::vector<Segment>& segments, std::array<double, 3> fractions,
                             std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-6) throw std::invalid_argument("split fractions must sum to 1");

  std::set<std::string> unique;
  for (const auto& s : segments) unique.insert(s.subject_id);
  if (unique.size() < 3)
    throw std::invalid_argument("need at least 3 subjects to split, got " + std::to_string(unique.size()));
  std::vector<std::string> ids(unique.begin(), unique.end());
  Engine engine(stream_seed(seed, 0x5B11));
  std::shuffle(ids.begin(), ids.end(), engine);

  const std::size_t n = ids.size();
  auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
  auto n_test = static_cast<std::size_t>(std::llround(fractions[2] * static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 2);
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1 - n_val);
  const std::size_t n_train = n - n_val - n_test;

  SplitManifest m;
  m.fractions = fractions;
  m.seed = seed;
  for (std::size_t i = 0; i < n; ++i)
    m.assignment[ids[i]] = i < n_train ? Partition::train : (i < n_train + n_val ? Partition::val : Partition::test);
  return m;
}

std::vector<Segment> select_partition(const std::vector<Segment>& segments, const SplitManifest& manifest,
                                      Partition p) {
  std::vector<Segment> out;
  for (const auto& s : segments) {
    const auto it = manifest.assignment.find(s.subject_id);
    if (it == manifest.assignment.end()) throw DataError("subject '" + s.subject_id + "' missing from manifest");
    if (it->second == p) out.push_back(s);
  }
  return out;
}

void require_disjoint_subjects(const std::vector<Segment>& a, const std::vector<Segment>& b, const std::string& what) {
  std::set<std::string> ids;
  for (const auto& s : a) ids.insert(s.subject_id);
  for (const auto& s : b)
    if (ids.count(s.subject_id)) throw DataError(what + ": subject '" + s.subject_id + "' appears in both sets");
}

Tensor make_batch(const std::vector<Segment>& segments, std::span<const std::size_t> indices) {
  Tensor batch(Shape{indices.size(), 1, kSegmentLength});
  float* out = batch.ptr();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = segments.at(indices[b]).samples;
    if (s.size() != kSegmentLength) throw DataError("segment " + std::to_string(indices[b]) + " has wrong length");
    std::copy(s.begin(), s.end(), out + b * kSegmentLength);
  }
  return batch;
}

std::vector<int> batch_labels(const std::vector<Segment>& segments, std::span<const std::size_t> indices) {
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (auto i : indices) {
    const auto& s = segments.at(i);
    if (!s.label) throw DataError("segment " + std::to_string(i) + " has no label");
    labels.push_back(*s.label);
  }
  return labels;
}

}  // namespace bayesbeat
