#pragma once

// Small IIR toolkit for PPG preprocessing plus a peak-based rhythm measure.

#include <cstddef>
#include <span>
#include <vector>

namespace bayesbeat::signal {

/// Direct-form-II-transposed second-order section, a0 normalised to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

using Sos = std::vector<Biquad>;

/// Butterworth designs via the bilinear transform with pre-warping.
/// `order` must be even and >= 2; `cutoff` in (0, fs/2).
Sos butterworth_lowpass(int order, double cutoff, double fs);
Sos butterworth_highpass(int order, double cutoff, double fs);

/// Complex-free magnitude response |H(e^{jw})| at frequency `f`.
double magnitude_response(const Sos& sos, double f, double fs);

/// One causal pass, each section started at its steady state for x[0].
std::vector<double> sosfilt(const Sos& sos, std::span<const double> x);

/// Zero-phase forward-backward filtering with odd reflection padding of
/// `padlen` samples at both ends (clamped to x.size() - 1).
std::vector<double> sosfiltfilt(const Sos& sos, std::span<const double> x, std::size_t padlen);

/// Zero-phase anti-alias low-pass then keep every `factor`-th sample.
std::vector<double> decimate(std::span<const double> x, std::size_t factor, double fs);

/// Local maxima at least `rel_height` of the way from min to max, greedily
/// thinned (tallest first) to be `min_distance` samples apart. Positions are
/// refined by parabolic interpolation; sorted ascending.
std::vector<double> detect_peaks(std::span<const double> x, double min_distance, double rel_height = 0.5);

/// Coefficient of variation (sample std / mean) of the intervals between
/// detected pulse peaks. Peaks within 0.25 s of either end and peaks below
/// 70% of the median peak height are ignored. NaN if fewer than three remain.
double rr_cv(std::span<const double> x, double fs, double min_interval_s = 0.27, double rel_height = 0.5);

}  // namespace bayesbeat::signal
