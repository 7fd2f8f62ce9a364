#include "bayesbeat/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "bayesbeat/kvconfig.hpp"
#include "bayesbeat/rng.hpp"

namespace bayesbeat {

namespace {

// AF rhythms whose realised RR variability falls below this are redrawn.
constexpr double kMinAfSampleCv = 0.17;
constexpr double kMinRr = 0.33;  // s

struct SubjectTraits {
  double rr = 0.8;            // resting RR interval, s
  double systolic_width = 0.06;
  double dicrotic_ratio = 0.35;
  double dicrotic_delay = 0.26;
  double dicrotic_width = 0.075;
};

SubjectTraits subject_traits(const SynthSpec& spec, std::size_t subject) {
  Engine eng(stream_seed(spec.seed, 0x5AB, subject));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SubjectTraits t;
  t.rr = 60.0 / (spec.hr_min + (spec.hr_max - spec.hr_min) * u(eng));
  t.systolic_width = 0.05 + 0.02 * u(eng);
  t.dicrotic_ratio = 0.25 + 0.2 * u(eng);
  t.dicrotic_delay = 0.22 + 0.08 * u(eng);
  t.dicrotic_width = 0.06 + 0.03 * u(eng);
  return t;
}

double sample_cv(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1)) / mean;
}


}  // namespace

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("synth spec: " + msg); };
  if (subjects == 0) fail("subjects must be positive");
  if (segments < subjects) fail("need at least one segment per subject");
  if (!(af_fraction >= 0.0 && af_fraction <= 1.0)) fail("af_fraction must be in [0, 1]");
  if (!(hr_min >= 30.0 && hr_min <= hr_max && hr_max <= 180.0)) fail("heart-rate range must satisfy 30 <= hr_min <= hr_max <= 180");
  if (!(nsr_jitter >= 0.0 && nsr_jitter <= 0.1)) fail("nsr_jitter must be in [0, 0.1]");
  if (!(af_cv_min >= kMinAfSampleCv && af_cv_min <= af_cv_max && af_cv_max <= 1.0))
    fail("AF CV range must satisfy 0.17 <= af_cv_min <= af_cv_max <= 1");
  for (double w : {clean_weight, moderate_weight, heavy_weight})
    if (!(w >= 0.0)) fail("noise band weights must be non-negative");
  for (double a : {wander_amplitude, motion_rate, motion_amplitude, gaussian_sigma})
    if (!(a >= 0.0) || !std::isfinite(a)) fail("artefact intensities must be finite and non-negative");
  if (!(contact_loss_prob >= 0.0 && contact_loss_prob <= 1.0)) fail("contact_loss_prob must be in [0, 1]");
  if (source_rate != 128.0 && source_rate != 32.0) fail("source_rate must be 128 or 32");
}

void SynthSpec::apply(const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "segments") segments = parse_size(v, k);
    else if (k == "subjects") subjects = parse_size(v, k);
    else if (k == "af_fraction") af_fraction = parse_double(v, k);
    else if (k == "hr_min") hr_min = parse_double(v, k);
    else if (k == "hr_max") hr_max = parse_double(v, k);
    else if (k == "nsr_jitter") nsr_jitter = parse_double(v, k);
    else if (k == "af_cv_min") af_cv_min = parse_double(v, k);
    else if (k == "af_cv_max") af_cv_max = parse_double(v, k);
    else if (k == "clean_weight") clean_weight = parse_double(v, k);
    else if (k == "moderate_weight") moderate_weight = parse_double(v, k);
    else if (k == "heavy_weight") heavy_weight = parse_double(v, k);
    else if (k == "wander_amplitude") wander_amplitude = parse_double(v, k);
    else if (k == "motion_rate") motion_rate = parse_double(v, k);
    else if (k == "motion_amplitude") motion_amplitude = parse_double(v, k);
    else if (k == "contact_loss_prob") contact_loss_prob = parse_double(v, k);
    else if (k == "gaussian_sigma") gaussian_sigma = parse_double(v, k);
    else if (k == "source_rate") source_rate = parse_double(v, k);
    else if (k == "seed") seed = parse_u64(v, k);
    else throw std::invalid_argument("synth spec: unknown key '" + k + "'");
  }
}

std::string SynthSpec::to_text() const {
  std::ostringstream os;
  os << "segments=" << segments << '\n' << "subjects=" << subjects << '\n';
  const std::pair<const char*, double> reals[] = {
      {"af_fraction", af_fraction},
      {"hr_min", hr_min},
      {"hr_max", hr_max},
      {"nsr_jitter", nsr_jitter},
      {"af_cv_min", af_cv_min},
      {"af_cv_max", af_cv_max},
      {"clean_weight", clean_weight},
      {"moderate_weight", moderate_weight},
      {"heavy_weight", heavy_weight},
      {"wander_amplitude", wander_amplitude},
      {"motion_rate", motion_rate},
      {"motion_amplitude", motion_amplitude},
      {"contact_loss_prob", contact_loss_prob},
      {"gaussian_sigma", gaussian_sigma},
      {"source_rate", source_rate},
  };
  for (const auto& [key, value] : reals) os << key << '=' << format_double(value) << '\n';
  os << "seed=" << seed << '\n';
  return os.str();
}

RawSegment synth_raw_segment(const SynthSpec& spec, std::size_t subject, int label, std::uint64_t stream) {
  const SubjectTraits traits = subject_traits(spec, subject);
  Engine eng(stream_seed(spec.seed, 0x5E9, subject, stream));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  RawSegment seg;
  seg.label = label;

  const double total_w = spec.clean_weight + spec.moderate_weight + spec.heavy_weight;
  if (total_w > 0.0) {
    const double pick = u(eng) * total_w;
    const double r = u(eng);
    if (pick < spec.clean_weight) seg.noise_level = 0.1 * r;
    else if (pick < spec.clean_weight + spec.moderate_weight) seg.noise_level = 0.1 + 0.6 * r;
    else seg.noise_level = 0.7 + 0.3 * r;
  }
  const double nu = seg.noise_level;

  // Rhythm: beat times covering [-1, 26] s.
  std::vector<double> rr;
  std::vector<double> beats;
  for (int attempt = 0;; ++attempt) {
    rr.clear();
    beats.clear();
    double t = -u(eng) * traits.rr - 1.0;
    if (label == 1) {
      const double mean = traits.rr * (0.65 + 0.25 * u(eng));
      const double cv = spec.af_cv_min + (spec.af_cv_max - spec.af_cv_min) * u(eng);
      const double s = std::sqrt(std::log1p(cv * cv));
      const double m = std::log(mean) - 0.5 * s * s;
      while (t < kSegmentSeconds + 1.0) {
        beats.push_back(t);
        const double step = std::max(kMinRr, std::exp(m + s * normal(eng)));
        t += step;
        if (t > 0.0 && t < kSegmentSeconds) rr.push_back(step);
      }
      if (sample_cv(rr) >= kMinAfSampleCv || attempt >= 1000) break;
    } else {
      const double base = traits.rr * (0.95 + 0.1 * u(eng));
      while (t < kSegmentSeconds + 1.0) {
        beats.push_back(t);
        t += base * (1.0 + spec.nsr_jitter * (2.0 * u(eng) - 1.0));
      }
      break;
    }
  }

  const double fs = spec.source_rate;
  const auto n = static_cast<std::size_t>(kSegmentSeconds * fs);
  seg.samples.assign(n, 0.0);
  const double mean_rr = (beats.back() - beats.front()) / static_cast<double>(beats.size() - 1);
  for (std::size_t b = 0; b < beats.size(); ++b) {
    const double prev = b > 0 ? beats[b] - beats[b - 1] : mean_rr;
    double amp = 1.0 + 0.03 * (2.0 * u(eng) - 1.0);
    // Short filling time gives a weaker pulse.
    if (label == 1) amp *= std::clamp(0.6 + 0.4 * prev / mean_rr, 0.5, 1.3);
    const double tb = beats[b];
    const auto lo = static_cast<long>(std::floor((tb - 0.5) * fs));
    const auto hi = static_cast<long>(std::ceil((tb + traits.dicrotic_delay + 0.5) * fs));
    for (long i = std::max(0L, lo); i <= std::min(static_cast<long>(n) - 1, hi); ++i) {
      const double t = static_cast<double>(i) / fs - tb;
      const double zs = t / traits.systolic_width;
      const double zd = (t - traits.dicrotic_delay) / traits.dicrotic_width;
      seg.samples[i] += amp * (std::exp(-0.5 * zs * zs) + traits.dicrotic_ratio * std::exp(-0.5 * zd * zd));
    }
  }
  for (double b : beats)
    if (b >= 0.0 && b < kSegmentSeconds) seg.beat_times.push_back(b);

  if (nu > 0.0) {
    const double two_pi = 2.0 * std::numbers::pi;
    // Baseline wander.
    const double wa = spec.wander_amplitude * nu;
    const double f1 = 0.05 + 0.3 * u(eng), f2 = 0.2 + 0.3 * u(eng);
    const double a1 = wa * (0.5 + 0.5 * u(eng)), a2 = wa * (0.5 + 0.5 * u(eng));
    const double p1 = two_pi * u(eng), p2 = two_pi * u(eng);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = static_cast<double>(i) / fs;
      seg.samples[i] += a1 * std::sin(two_pi * f1 * t + p1) + a2 * std::sin(two_pi * f2 * t + p2);
    }
    // In-band motion bursts.
    std::poisson_distribution<int> bursts(spec.motion_rate * nu * kSegmentSeconds);
    const int n_bursts = spec.motion_rate > 0.0 ? bursts(eng) : 0;
    for (int k = 0; k < n_bursts; ++k) {
      const double centre = kSegmentSeconds * u(eng);
      const double dur = 0.5 + 2.5 * u(eng);
      const double freq = 0.7 + 2.8 * u(eng);
      const double phase = two_pi * u(eng);
      const double amp = spec.motion_amplitude * nu * (0.5 + 0.5 * u(eng));
      const auto lo = static_cast<long>((centre - dur / 2) * fs), hi = static_cast<long>((centre + dur / 2) * fs);
      for (long i = std::max(0L, lo); i <= std::min(static_cast<long>(n) - 1, hi); ++i) {
        const double t = static_cast<double>(i) / fs;
        const double w = 0.5 - 0.5 * std::cos(two_pi * (t - (centre - dur / 2)) / dur);
        seg.samples[i] += amp * w * std::sin(two_pi * freq * t + phase);
      }
    }
    // Gaussian sensor noise.
    const double sigma = spec.gaussian_sigma * nu;
    for (auto& v : seg.samples) v += sigma * normal(eng);
    // Contact loss: the sensor reads a flat, offset level for a while.
    if (u(eng) < spec.contact_loss_prob * nu) {
      const double dur = 1.0 + 3.0 * u(eng);
      const double start = (kSegmentSeconds - dur) * u(eng);
      const double level = 2.0 * u(eng) - 0.5;
      const auto lo = static_cast<std::size_t>(start * fs), hi = std::min(n, static_cast<std::size_t>((start + dur) * fs));
      for (std::size_t i = lo; i < hi; ++i) seg.samples[i] = level + 0.01 * normal(eng);
    }
  }
  return seg;
}

std::vector<Segment> synth_generate(const SynthSpec& spec) {
  spec.validate();
  struct Job {
    std::size_t subject;
    std::size_t index;
    int label;
  };
  std::vector<Job> jobs;
  const std::size_t base = spec.segments / spec.subjects, extra = spec.segments % spec.subjects;
  for (std::size_t s = 0; s < spec.subjects; ++s) {
    const std::size_t count = base + (s < extra ? 1 : 0);
    const auto n_af = static_cast<std::size_t>(std::llround(spec.af_fraction * static_cast<double>(count)));
    for (std::size_t i = 0; i < count; ++i) jobs.push_back({s, i, i < n_af ? 1 : 0});
  }

  std::vector<Segment> out(jobs.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto raw = synth_raw_segment(spec, jobs[j].subject, jobs[j].label, jobs[j].index);
    char id[16];
    std::snprintf(id, sizeof id, "S%03zu", jobs[j].subject + 1);
    out[j].subject_id = id;
    out[j].label = raw.label;
    out[j].noise_level = raw.noise_level;
    out[j].samples = preprocess(raw.samples, spec.source_rate);
  }
  return out;
}

}  // namespace bayesbeat
