#pragma once

// Synthetic PPG segments: a pulse-train model of sinus rhythm and atrial
// fibrillation with a graded mixture of motion and contact artefacts.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bayesbeat/dataio.hpp"

namespace bayesbeat {

struct SynthSpec {
  std::size_t segments = 4000;
  std::size_t subjects = 50;
  double af_fraction = 0.4;  // exact per subject (rounded), so any subject split keeps the ratio

  double hr_min = 55.0;  // bpm, per-subject resting rate
  double hr_max = 100.0;
  double nsr_jitter = 0.02;  // max relative beat-to-beat deviation in sinus rhythm
  double af_cv_min = 0.20;   // target RR coefficient of variation range in AF
  double af_cv_max = 0.35;

  // Probability of a segment drawing its noise level from the clean
  // [0, 0.1), moderate [0.1, 0.7) or heavy [0.7, 1] band.
  double clean_weight = 0.5;
  double moderate_weight = 0.25;
  double heavy_weight = 0.25;

  // Artefact intensities at noise level 1 (each scales linearly with it).
  double wander_amplitude = 1.0;   // baseline wander, in pulse amplitudes
  double motion_rate = 0.4;        // motion bursts per second
  double motion_amplitude = 2.0;   // peak burst amplitude, in pulse amplitudes
  double contact_loss_prob = 0.8;  // chance of one contact-loss episode
  double gaussian_sigma = 0.6;     // white sensor noise

  double source_rate = 128.0;
  std::uint64_t seed = 7;

  void validate() const;
  /// Keys as in to_text(); throws on unknown keys.
  void apply(const std::map<std::string, std::string>& kv);
  std::string to_text() const;
};

/// Deterministic for a given spec, independent of the thread count.
/// Subjects are named S001, S002, ...; segments are ordered by subject.
std::vector<Segment> synth_generate(const SynthSpec& spec);

/// Raw (pre-preprocessing) waveform of one segment at spec.source_rate,
/// with the beat times used. Exposed for tests of the rhythm model.
struct RawSegment {
  std::vector<double> samples;
  std::vector<double> beat_times;  // seconds
  int label = 0;
  double noise_level = 0.0;
};
RawSegment synth_raw_segment(const SynthSpec& spec, std::size_t subject, int label, std::uint64_t stream);

}  // namespace bayesbeat
