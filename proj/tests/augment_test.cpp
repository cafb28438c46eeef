#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "avcon/augment.hpp"

namespace avcon {
namespace {

AudioWaveform tone(double freq, std::size_t n, double amp = 1.0) {
  AudioWaveform w;
  w.track_id = "tone";
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * freq * i / 16000.0));
  return w;
}

double power(const std::vector<float>& x) {
  double p = 0;
  for (float v : x) p += static_cast<double>(v) * v;
  return p / static_cast<double>(x.size());
}

int zero_crossings(const std::vector<float>& x, std::size_t from, std::size_t to) {
  int n = 0;
  for (std::size_t i = from + 1; i < to; ++i) n += (x[i - 1] < 0) != (x[i] < 0);
  return n;
}

TEST(RandomCrop, ExactLengthReturnsInput) {
  const auto w = tone(100, 4000);
  Rng rng(1);
  const auto [a, b] = random_crop_pair(w, 4000, rng);
  EXPECT_EQ(a.samples, w.samples);
  EXPECT_EQ(b.samples, w.samples);
}

TEST(RandomCrop, DeterministicPerSeed) {
  const auto w = tone(100, 50000);
  Rng r1(42), r2(42);
  const auto p1 = random_crop_pair(w, 1000, r1);
  const auto p2 = random_crop_pair(w, 1000, r2);
  EXPECT_EQ(p1.first.samples, p2.first.samples);
  EXPECT_EQ(p1.second.samples, p2.second.samples);
}

TEST(RandomCrop, SegmentDuration) {
  const auto w = tone(100, 120000);
  Rng rng(3);
  const auto [a, b] = random_crop_pair(w, 98415, rng);
  EXPECT_EQ(a.size(), 98415u);
  EXPECT_NEAR(a.duration_s(), 6.1509, 1e-4);
}

TEST(RandomCrop, ShortInputIsPadded) {
  const auto w = tone(100, 10);
  Rng rng(3);
  const auto [a, b] = random_crop_pair(w, 25, rng);
  ASSERT_EQ(a.size(), 25u);
  for (std::size_t i = 10; i < 25; ++i) EXPECT_EQ(a.samples[i], 0.0f);
}

TEST(ApplyChain, ZeroProbabilitiesAreIdentity) {
  const auto w = tone(330, 20000, 0.7);
  Rng rng(5);
  EXPECT_EQ(apply_chain(w, AugmentChainConfig::disabled(), rng).samples, w.samples);
}

TEST(ApplyChain, NoiseHitsRequestedSnr) {
  const auto w = tone(440, 98415, 1.0);
  auto cfg = AugmentChainConfig::disabled();
  cfg.noise_prob = 1.0;
  cfg.noise_snr_db = {20.0, 20.0};
  Rng rng(8);
  const auto out = apply_chain(w, cfg, rng);
  std::vector<float> noise(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) noise[i] = out.samples[i] - w.samples[i];
  const double snr = 10 * std::log10(power(w.samples) / power(noise));
  EXPECT_NEAR(snr, 20.0, 0.5);
}

TEST(ApplyChain, ZeroSemitoneShiftIsIdentity) {
  const auto w = tone(440, 16000, 0.5);
  auto cfg = AugmentChainConfig::disabled();
  cfg.pitch_prob = 1.0;
  cfg.pitch_semitones = {0.0, 0.0};
  Rng rng(2);
  const auto out = apply_chain(w, cfg, rng);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(out.samples[i], w.samples[i], 1e-6);
}

TEST(Transforms, OctaveShiftDoublesFrequency) {
  const auto w = tone(300, 32000, 0.5);
  const auto up = transforms::pitch_shift(w.samples, 12.0);
  ASSERT_EQ(up.size(), w.size());
  const int base = zero_crossings(w.samples, 4000, 28000);
  const int shifted = zero_crossings(up, 4000, 28000);
  EXPECT_NEAR(static_cast<double>(shifted) / base, 2.0, 0.1);
}

TEST(Transforms, LowpassAttenuatesHighTone) {
  const auto w = tone(6000, 16000, 0.5);
  const auto y = transforms::biquad_filter(w.samples, 300.0, false);
  EXPECT_LT(power(y), 0.01 * power(w.samples));
  const auto hp = transforms::biquad_filter(w.samples, 300.0, true);
  EXPECT_GT(power(hp), 0.9 * power(w.samples));
}

TEST(Transforms, DelayKeepsPeakLevel) {
  const auto w = tone(200, 16000, 0.8);
  const auto y = transforms::delay_reverb(w.samples, 250.0, 0.5);
  float peak = 0;
  for (float v : y) peak = std::max(peak, std::abs(v));
  EXPECT_LE(peak, 0.8f + 1e-6f);
}

TEST(TrainingPair, ZeroProbabilitiesGiveRawCrops) {
  const auto w = tone(150, 30000, 0.6);
  Rng r1(9), r2(9);
  const auto pair = make_training_pair(w, 5000, AugmentChainConfig::disabled(), r1);
  const auto crops = random_crop_pair(w, 5000, r2);
  EXPECT_EQ(pair.first.samples, crops.first.samples);
  EXPECT_EQ(pair.second.samples, crops.second.samples);
}

TEST(TrainingPair, DeterministicPerSeed) {
  const auto w = tone(150, 30000, 0.6);
  AugmentChainConfig cfg;
  Rng r1(77), r2(77);
  const auto a = make_training_pair(w, 8000, cfg, r1);
  const auto b = make_training_pair(w, 8000, cfg, r2);
  EXPECT_EQ(a.first.samples, b.first.samples);
  EXPECT_EQ(a.second.samples, b.second.samples);
}

TEST(TrainingPair, SilentInputGivesIndependentNoise) {
  AudioWaveform silent;
  silent.samples.assign(120000, 0.0f);
  auto cfg = AugmentChainConfig::disabled();
  cfg.noise_prob = 1.0;
  Rng rng(31);
  const auto [a, b] = make_training_pair(silent, 98415, cfg, rng);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a.samples[i]) * b.samples[i];
    aa += static_cast<double>(a.samples[i]) * a.samples[i];
    bb += static_cast<double>(b.samples[i]) * b.samples[i];
  }
  ASSERT_GT(aa, 0.0);
  ASSERT_GT(bb, 0.0);
  EXPECT_LT(std::abs(ab / std::sqrt(aa * bb)), 0.1);
}

TEST(TrainingPair, LengthAndRangeProperty) {
  Rng gen(1234);
  for (int trial = 0; trial < 40; ++trial) {
    AugmentChainConfig cfg;
    cfg.pitch_prob = uniform(gen, 0, 1);
    cfg.filter_prob = uniform(gen, 0, 1);
    cfg.delay_prob = uniform(gen, 0, 1);
    cfg.noise_prob = uniform(gen, 0, 1);
    const auto w = tone(uniform(gen, 50, 3000), 6000 + gen() % 6000, uniform(gen, 0.1, 1.0));
    const std::size_t seg = 2000 + gen() % 5000;
    Rng rng(gen());
    const auto [a, b] = make_training_pair(w, seg, cfg, rng);
    ASSERT_EQ(a.size(), seg);
    ASSERT_EQ(b.size(), seg);
    for (float v : a.samples) ASSERT_LE(std::abs(v), 1.0f);
    for (float v : b.samples) ASSERT_LE(std::abs(v), 1.0f);
  }
}

TEST(AugmentConfig, Validation) {
  AugmentChainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.noise_prob = 1.5;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.pitch_semitones = {3.0, -3.0};
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
}  // namespace avcon
