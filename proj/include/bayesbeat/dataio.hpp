#pragma once

// Segments, preprocessing, segment files and subject-disjoint splits.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bayesbeat/tensor.hpp"

namespace bayesbeat {

inline constexpr std::size_t kSegmentLength = 800;
inline constexpr double kSegmentRate = 32.0;
inline constexpr double kSegmentSeconds = 25.0;

/// Raised for unreadable or malformed data files and inconsistent datasets.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Segment {
  std::string subject_id;
  std::optional<int> label;           // 1 = AF, 0 = non-AF
  std::optional<double> noise_level;  // synthetic provenance only
  std::vector<float> samples;         // kSegmentLength values

  friend bool operator==(const Segment&, const Segment&) = default;
};

/// 25 s of raw signal at 128 Hz or 32 Hz -> 800 samples in [0, 1]:
/// anti-alias + decimate (128 Hz only), zero-phase 0.5-8 Hz band-pass
/// (2nd-order Butterworth high-pass and low-pass), min-max scaling.
/// Constant signals map to 0.5. Throws std::invalid_argument on a wrong
/// rate or duration.
std::vector<float> preprocess(std::span<const double> raw, double source_rate);

/// Text format: header `bbseg v1 n=<count>`, then one record per line:
/// `subject_id,label(-1 if none),noise_level(empty if none),800 floats`.
void save_segments(const std::vector<Segment>& segments, const std::filesystem::path& path);
/// Throws DataError naming the 0-based record index of a malformed record.
std::vector<Segment> load_segments(const std::filesystem::path& path);

std::string encode_segments(const std::vector<Segment>& segments);
std::vector<Segment> decode_segments(std::string_view text);

enum class Partition { train, val, test };
std::string to_string(Partition p);

struct SplitManifest {
  std::map<std::string, Partition> assignment;  // subject -> partition
  std::array<double, 3> fractions{0.70, 0.15, 0.15};
  std::uint64_t seed = 0;

  std::vector<std::string> subjects(Partition p) const;
  std::string to_json() const;
  static SplitManifest from_json(std::string_view text);
};

/// Seeded shuffle of the distinct subject ids, cut by `fractions` (which
/// must be non-negative and sum to 1). Needs >= 3 subjects; every partition
/// gets at least one subject.
SplitManifest split_subjects(const std::vector<Segment>& segments, std::array<double, 3> fractions,
                             std::uint64_t seed);

/// Segments whose subject is assigned to `p`, in input order.
std::vector<Segment> select_partition(const std::vector<Segment>& segments, const SplitManifest& manifest,
                                      Partition p);

/// Throws DataError if any subject id appears in both sets.
void require_disjoint_subjects(const std::vector<Segment>& a, const std::vector<Segment>& b, const std::string& what);

/// Stacks the chosen segments into [B, 1, kSegmentLength].
Tensor make_batch(const std::vector<Segment>& segments, std::span<const std::size_t> indices);
/// Labels of the chosen segments; throws DataError on an unlabelled one.
std::vector<int> batch_labels(const std::vector<Segment>& segments, std::span<const std::size_t> indices);

}  // namespace bayesbeat
