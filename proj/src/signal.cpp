#include "bayesbeat/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace bayesbeat::signal {

namespace {

void check_design(int order, double cutoff, double fs) {
  if (order < 2 || order % 2 != 0) throw std::invalid_argument("Butterworth order must be even and >= 2");
  if (!(fs > 0) || !(cutoff > 0) || !(cutoff < fs / 2))
    throw std::invalid_argument("Butterworth cutoff must lie in (0, fs/2)");
}

// Section quality factors of an even-order Butterworth prototype.
std::vector<double> section_q(int order) {
  std::vector<double> q;
  for (int k = 1; k <= order / 2; ++k) q.push_back(1.0 / (2.0 * std::sin((2 * k - 1) * std::numbers::pi / (2.0 * order))));
  return q;
}

}  // namespace

Sos butterworth_lowpass(int order, double cutoff, double fs) {
  check_design(order, cutoff, fs);
  const double k = std::tan(std::numbers::pi * cutoff / fs);
  Sos sos;
  for (double q : section_q(order)) {
    const double norm = 1.0 / (1.0 + k / q + k * k);
    Biquad s;
    s.b0 = k * k * norm;
    s.b1 = 2.0 * s.b0;
    s.b2 = s.b0;
    s.a1 = 2.0 * (k * k - 1.0) * norm;
    s.a2 = (1.0 - k / q + k * k) * norm;
    sos.push_back(s);
  }
  return sos;
}

Sos butterworth_highpass(int order, double cutoff, double fs) {
  check_design(order, cutoff, fs);
  const double k = std::tan(std::numbers::pi * cutoff / fs);
  Sos sos;
  for (double q : section_q(order)) {
    const double norm = 1.0 / (1.0 + k / q + k * k);
    Biquad s;
    s.b0 = norm;
    s.b1 = -2.0 * norm;
    s.b2 = norm;
    s.a1 = 2.0 * (k * k - 1.0) * norm;
    s.a2 = (1.0 - k / q + k * k) * norm;
    sos.push_back(s);
  }
  return sos;
}

double magnitude_response(const Sos& sos, double f, double fs) {
  const std::complex<double> z1 = std::polar(1.0, -2.0 * std::numbers::pi * f / fs);
  const std::complex<double> z2 = z1 * z1;
  double mag = 1.0;
  for (const auto& s : sos) mag *= std::abs((s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2));
  return mag;
}

std::vector<double> sosfilt(const Sos& sos, std::span<const double> x) {
  std::vector<double> y(x.begin(), x.end());
  if (y.empty()) return y;
  for (const auto& s : sos) {
    // Steady state of this section for a constant input equal to y[0].
    const double x0 = y[0];
    const double dc = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    const double y0 = dc * x0;
    double z2 = s.b2 * x0 - s.a2 * y0;
    double z1 = s.b1 * x0 - s.a1 * y0 + z2;
    for (auto& v : y) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

std::vector<double> sosfiltfilt(const Sos& sos, std::span<const double> x, std::size_t padlen) {
  const std::size_t n = x.size();
  if (n == 0) return {};
  padlen = std::min(padlen, n - 1);
  std::vector<double> ext;
  ext.reserve(n + 2 * padlen);
  for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= padlen; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  auto fwd = sosfilt(sos, ext);
  std::reverse(fwd.begin(), fwd.end());
  auto back = sosfilt(sos, fwd);
  std::reverse(back.begin(), back.end());
  return {back.begin() + static_cast<std::ptrdiff_t>(padlen), back.begin() + static_cast<std::ptrdiff_t>(padlen + n)};
}

std::vector<double> decimate(std::span<const double> x, std::size_t factor, double fs) {
  if (factor == 0) throw std::invalid_argument("decimation factor must be positive");
  if (factor == 1) return {x.begin(), x.end()};
  const double cutoff = 0.8 * (fs / static_cast<double>(factor)) / 2.0;
  const auto filtered = sosfiltfilt(butterworth_lowpass(8, cutoff, fs), x, static_cast<std::size_t>(fs));
  std::vector<double> out;
  for (std::size_t i = 0; i < filtered.size(); i += factor) out.push_back(filtered[i]);
  return out;
}

std::vector<double> detect_peaks(std::span<const double> x, double min_distance, double rel_height) {
  if (x.size() < 3) return {};
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const double floor = *lo + rel_height * (*hi - *lo);
  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < x.size(); ++i)
    if (x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] >= floor) cand.push_back(i);
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  std::vector<std::size_t> kept;
  for (auto c : cand) {
    const bool clear = std::none_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return std::abs(static_cast<double>(k) - static_cast<double>(c)) < min_distance;
    });
    if (clear) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  std::vector<double> out;
  for (auto i : kept) {
    const double a = x[i - 1], b = x[i], c = x[i + 1];
    const double denom = a - 2.0 * b + c;
    const double shift = denom != 0.0 ? 0.5 * (a - c) / denom : 0.0;
    out.push_back(static_cast<double>(i) + std::clamp(shift, -0.5, 0.5));
  }
  return out;
}

double rr_cv(std::span<const double> x, double fs, double min_interval_s, double rel_height) {
  auto all = detect_peaks(x, min_interval_s * fs, rel_height);
  // Drop edge peaks (filter transients, truncated beats) and secondary bumps
  // well below the typical pulse height.
  const double edge = 0.25 * fs;
  std::vector<double> peaks, heights;
  for (double p : all) {
    if (p < edge || p > static_cast<double>(x.size()) - 1.0 - edge) continue;
    peaks.push_back(p);
    heights.push_back(x[static_cast<std::size_t>(std::lround(p))]);
  }
  if (peaks.size() < 3) return std::nan("");
  auto sorted = heights;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
  const double lo = *std::min_element(x.begin(), x.end());
  const double cut = lo + 0.7 * (sorted[sorted.size() / 2] - lo);
  std::vector<double> kept;
  for (std::size_t i = 0; i < peaks.size(); ++i)
    if (heights[i] >= cut) kept.push_back(peaks[i]);
  peaks.swap(kept);
  if (peaks.size() < 3) return std::nan("");
  std::vector<double> rr;
  for (std::size_t i = 1; i < peaks.size(); ++i) rr.push_back((peaks[i] - peaks[i - 1]) / fs);
  const double mean = std::accumulate(rr.begin(), rr.end(), 0.0) / static_cast<double>(rr.size());
  double ss = 0.0;
  for (double v : rr) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(rr.size() - 1)) / mean;
}

}  // namespace bayesbeat::signal
