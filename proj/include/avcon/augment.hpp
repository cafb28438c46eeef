#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "avcon/audio_io.hpp"
#include "avcon/error.hpp"
#include "avcon/rng.hpp"

namespace avcon {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  double draw(Rng& rng) const { return lo == hi ? lo : uniform(rng, lo, hi); }
};

struct AugmentChainConfig {
  double pitch_prob = 0.6;
  Range pitch_semitones{-7.0, 7.0};
  double filter_prob = 0.6;
  // Both cutoff ranges lie inside 200-4000 Hz; splitting them keeps a
  // low-passed view and a high-passed view of one input overlapping.
  Range lowpass_cutoff_hz{2200.0, 4000.0};
  Range highpass_cutoff_hz{200.0, 1200.0};
  double delay_prob = 0.4;
  Range delay_ms{200.0, 500.0};
  Range delay_decay{0.3, 0.6};
  double noise_prob = 0.5;
  Range noise_snr_db{10.0, 30.0};
  std::uint64_t rng_seed = 0;

  static AugmentChainConfig disabled() {
    AugmentChainConfig c;
    c.pitch_prob = c.filter_prob = c.delay_prob = c.noise_prob = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {pitch_prob, filter_prob, delay_prob, noise_prob})
      if (!(p >= 0.0 && p <= 1.0)) fail(ErrorKind::config, "augment probability outside [0, 1]");
    for (const Range& r : {pitch_semitones, lowpass_cutoff_hz, highpass_cutoff_hz, delay_ms, delay_decay, noise_snr_db})
      if (!(r.lo <= r.hi)) fail(ErrorKind::config, "augment range is empty or unordered");
    if (lowpass_cutoff_hz.lo <= 0.0 || highpass_cutoff_hz.lo <= 0.0) fail(ErrorKind::config, "filter cutoff must be positive");
    if (delay_ms.lo < 0.0) fail(ErrorKind::config, "delay must be non-negative");
    if (delay_decay.lo < 0.0 || delay_decay.hi >= 1.0) fail(ErrorKind::config, "delay decay must be in [0, 1)");
  }
};

// Reference power used for noise when the input is (near) silent, so that the
// noise transform still produces a signal. Equals -40 dB re. unit power.
inline constexpr double kNoiseFloorPower = 1e-4;

namespace transforms {

// Granular pitch shift at constant duration: the input is band-limited
// resampled by the pitch ratio, then re-timed with 50%-overlap Hann grains.
inline std::vector<float> pitch_shift(std::span<const float> x, double semitones, int sample_rate = kSampleRate) {
  if (std::abs(semitones) < 1e-9 || x.empty()) return {x.begin(), x.end()};
  const double ratio = std::pow(2.0, semitones / 12.0);
  const std::vector<float> src = resample(x, sample_rate * ratio, sample_rate);  // src[k] ~ x(k * ratio)
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.size());
  constexpr std::ptrdiff_t kGrain = 1024;
  constexpr std::ptrdiff_t kHop = kGrain / 2;

  std::vector<double> window(kGrain);
  for (std::ptrdiff_t t = 0; t < kGrain; ++t)
    window[static_cast<std::size_t>(t)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * t / kGrain);

  auto src_at = [&](double pos) -> double {
    const auto i = static_cast<std::ptrdiff_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    auto at = [&](std::ptrdiff_t k) { return k >= 0 && k < static_cast<std::ptrdiff_t>(src.size()) ? src[k] : 0.0f; };
    return at(i) * (1.0 - frac) + at(i + 1) * frac;
  };

  std::vector<double> y(x.size(), 0.0);
  for (std::ptrdiff_t centre = 0; centre - kGrain / 2 < n; centre += kHop) {
    const double src_centre = static_cast<double>(centre) / ratio;
    for (std::ptrdiff_t t = 0; t < kGrain; ++t) {
      const std::ptrdiff_t out = centre - kGrain / 2 + t;
      if (out < 0 || out >= n) continue;
      y[static_cast<std::size_t>(out)] += window[static_cast<std::size_t>(t)] * src_at(src_centre + (t - kGrain / 2));
    }
  }
  return {y.begin(), y.end()};
}

// RBJ biquad, Q = 1/sqrt(2).
inline std::vector<float> biquad_filter(std::span<const float> x, double cutoff_hz, bool highpass,
                                        int sample_rate = kSampleRate) {
  const double fc = std::clamp(cutoff_hz, 1.0, 0.49 * sample_rate);
  const double w0 = 2.0 * std::numbers::pi * fc / sample_rate;
  const double alpha = std::sin(w0) / std::numbers::sqrt2;  // sin(w0) / (2Q)
  const double c = std::cos(w0);
  double b0, b1, b2;
  if (highpass) {
    b0 = (1 + c) / 2;
    b1 = -(1 + c);
    b2 = (1 + c) / 2;
  } else {
    b0 = (1 - c) / 2;
    b1 = 1 - c;
    b2 = (1 - c) / 2;
  }
  const double a0 = 1 + alpha, a1 = -2 * c, a2 = 1 - alpha;
  std::vector<float> y(x.size());
  double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double yi = (b0 * xi + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2) / a0;
    x2 = x1;
    x1 = xi;
    y2 = y1;
    y1 = yi;
    y[i] = static_cast<float>(yi);
  }
  return y;
}

// Feedback comb as a delay-based reverb approximation; output peak is matched
// to the input peak when the feedback raises it.
inline std::vector<float> delay_reverb(std::span<const float> x, double delay_ms, double decay,
                                       int sample_rate = kSampleRate) {
  const auto d = static_cast<std::size_t>(std::llround(delay_ms * sample_rate / 1000.0));
  if (d == 0 || decay == 0.0) return {x.begin(), x.end()};
  std::vector<double> y(x.size());
  double in_peak = 0.0, out_peak = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] + (i >= d ? decay * y[i - d] : 0.0);
    in_peak = std::max(in_peak, static_cast<double>(std::abs(x[i])));
    out_peak = std::max(out_peak, std::abs(y[i]));
  }
  const double g = out_peak > in_peak && out_peak > 0.0 ? in_peak / out_peak : 1.0;
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(g * y[i]);
  return out;
}

inline std::vector<float> add_noise(std::span<const float> x, double snr_db, Rng& rng) {
  double power = 0.0;
  for (float s : x) power += static_cast<double>(s) * s;
  power = x.empty() ? 0.0 : power / static_cast<double>(x.size());
  const double sigma = std::sqrt(std::max(power, kNoiseFloorPower) / std::pow(10.0, snr_db / 10.0));
  std::normal_distribution<double> n(0.0, sigma);
  std::vector<float> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(x[i] + n(rng));
  return y;
}

}  // namespace transforms

inline AudioWaveform crop(const AudioWaveform& w, std::size_t offset, std::size_t length) {
  AudioWaveform out;
  out.track_id = w.track_id;
  out.sample_rate_hz = w.sample_rate_hz;
  out.samples.assign(length, 0.0f);
  for (std::size_t i = 0; i < length && offset + i < w.samples.size(); ++i) out.samples[i] = w.samples[offset + i];
  return out;
}

inline std::size_t random_crop_offset(std::size_t n_samples, std::size_t segment, Rng& rng) {
  if (n_samples <= segment) return 0;
  return static_cast<std::size_t>(rng() % (n_samples - segment + 1));
}

// Two independently positioned crops; short inputs are zero-padded first.
inline std::pair<AudioWaveform, AudioWaveform> random_crop_pair(const AudioWaveform& w, std::size_t segment_samples,
                                                                Rng& rng) {
  if (segment_samples == 0) fail(ErrorKind::invalid_input, "segment length must be positive");
  const std::size_t a = random_crop_offset(w.size(), segment_samples, rng);
  const std::size_t b = random_crop_offset(w.size(), segment_samples, rng);
  return {crop(w, a, segment_samples), crop(w, b, segment_samples)};
}

// Fixed order: pitch shift, frequency filter, delay reverb, gaussian noise; then clip.
inline AudioWaveform apply_chain(const AudioWaveform& w, const AugmentChainConfig& cfg, Rng& rng) {
  AudioWaveform out = w;
  if (bernoulli(rng, cfg.pitch_prob))
    out.samples = transforms::pitch_shift(out.samples, cfg.pitch_semitones.draw(rng), w.sample_rate_hz);
  if (bernoulli(rng, cfg.filter_prob)) {
    const bool highpass = bernoulli(rng, 0.5);
    out.samples = transforms::biquad_filter(out.samples, (highpass ? cfg.highpass_cutoff_hz : cfg.lowpass_cutoff_hz).draw(rng), highpass, w.sample_rate_hz);
  }
  if (bernoulli(rng, cfg.delay_prob)) {
    const double delay = cfg.delay_ms.draw(rng);
    const double decay = cfg.delay_decay.draw(rng);
    out.samples = transforms::delay_reverb(out.samples, delay, decay, w.sample_rate_hz);
  }
  if (bernoulli(rng, cfg.noise_prob)) out.samples = transforms::add_noise(out.samples, cfg.noise_snr_db.draw(rng), rng);
  for (float& s : out.samples) s = std::clamp(s, -1.0f, 1.0f);
  return out;
}

inline std::pair<AudioWaveform, AudioWaveform> make_training_pair(const AudioWaveform& w, std::size_t segment_samples,
                                                                  const AugmentChainConfig& cfg, Rng& rng) {
  auto [a, b] = random_crop_pair(w, segment_samples, rng);
  a = apply_chain(a, cfg, rng);
  b = apply_chain(b, cfg, rng);
  return {std::move(a), std::move(b)};
}

}  // namespace avcon
