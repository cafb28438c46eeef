#pragma once

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "avcon/audio_io.hpp"
#include "avcon/corpus.hpp"
#include "avcon/features.hpp"
#include "avcon/rng.hpp"
#include "avcon/train.hpp"

namespace avcon {

// Generated corpora for smoke runs and directional checks.
//
// separable: four tags, each an audio component (low sine, high sine, white
//   noise, gated pulse) present independently; video vectors carry the same
//   tags along fixed random directions.
// conditioning: one "target" tag that is only a faint tone in the audio,
//   buried under loud random nuisance tones, but strongly present in video.
// Every track also carries a click train at its own rate.
enum class SynthKind { separable, conditioning };

struct SynthConfig {
  SynthKind kind = SynthKind::separable;
  int n_tracks = 64;
  double duration_s = 3.0;
  int n_valid = 8;
  int n_test = 8;
  std::uint64_t seed = 0;
  double tag_prob = 0.5;
  double component_gain = 0.3;
  double background_noise = 0.01;
  double weak_gain = 0.1;       // conditioning: amplitude of the target tone
  double nuisance_gain = 0.4;   // conditioning: amplitude of nuisance tones
  double video_signal = 1.0;    // length of each tag direction in video space
  double video_noise = 0.3;     // norm of per-second video noise
  double video_rhythm = 1.0;    // video also mirrors the audio click rate
  double video_scale = 10.0;    // overall gain of the video vectors
  bool track_rhythm = true;     // distinct click rate per track
  double click_gain = 0.5;

  // Video carries only the target tag, so aligning audio with it has to
  // pick up the faint tone.
  static SynthConfig conditioning(std::uint64_t seed = 11) {
    SynthConfig c;
    c.kind = SynthKind::conditioning;
    c.n_tracks = 64;
    c.n_valid = 16;
    c.n_test = 32;
    c.seed = seed;
    c.video_rhythm = 0.0;
    return c;
  }
};

inline std::vector<std::string> synth_vocabulary(SynthKind k) {
  if (k == SynthKind::conditioning) return {"target"};
  return {"low_tone", "high_tone", "noise", "pulse"};
}

struct SyntheticCorpus {
  Manifest manifest;
  InMemoryMediaSource media;
  std::vector<std::string> vocabulary;
};

namespace detail {

inline Eigen::MatrixXf tag_directions(std::uint64_t seed, int n_tags) {
  Rng rng = stream_for(seed, "#directions", 0);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Eigen::MatrixXf d(kContextDim, n_tags);
  for (Eigen::Index j = 0; j < d.cols(); ++j) {
    for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, j) = n(rng);
    d.col(j).normalize();
  }
  return d;
}

}  // namespace detail

inline SyntheticCorpus make_synthetic_corpus(const SynthConfig& cfg) {
  if (cfg.n_tracks < 1 || cfg.n_valid < 0 || cfg.n_test < 0)
    fail(ErrorKind::config, "synthetic corpus needs at least one train track");
  if (!(cfg.duration_s > 0.0)) fail(ErrorKind::config, "synthetic duration must be positive");
  SyntheticCorpus out;
  out.vocabulary = synth_vocabulary(cfg.kind);
  const int n_tags = static_cast<int>(out.vocabulary.size());
  // One direction per tag plus one for the click rate.
  const Eigen::MatrixXf dirs = detail::tag_directions(cfg.seed, n_tags + 1);
  const int sr = kSampleRate;
  const auto n = static_cast<std::size_t>(std::llround(cfg.duration_s * sr));
  const auto seconds = static_cast<Eigen::Index>(std::ceil(cfg.duration_s - 1e-9));
  const double two_pi = 2.0 * std::numbers::pi;
  const int total = cfg.n_tracks + cfg.n_valid + cfg.n_test;

  for (int t = 0; t < total; ++t) {
    char id[32];
    std::snprintf(id, sizeof id, "syn%04d", t);
    Rng rng = stream_for(cfg.seed, id, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::set<std::string> tags;
    std::vector<int> on(static_cast<std::size_t>(n_tags), 0);
    for (int k = 0; k < n_tags; ++k)
      if (uniform(rng, 0.0, 1.0) < cfg.tag_prob) on[static_cast<std::size_t>(k)] = 1;
    // The first tracks of each split pin one tag on, then one tag off, so
    // every tag has both classes in every split of reasonable size.
    const int local = t < cfg.n_tracks ? t : t < cfg.n_tracks + cfg.n_valid ? t - cfg.n_tracks : t - cfg.n_tracks - cfg.n_valid;
    if (local < 2 * n_tags) on[static_cast<std::size_t>(local % n_tags)] = local < n_tags ? 1 : 0;
    for (int k = 0; k < n_tags; ++k)
      if (on[static_cast<std::size_t>(k)]) tags.insert(out.vocabulary[static_cast<std::size_t>(k)]);

    std::vector<float> x(n, 0.0f);
    auto add_sine = [&](double f, double amp) {
      const double ph = uniform(rng, 0.0, two_pi);
      for (std::size_t i = 0; i < n; ++i) x[i] += static_cast<float>(amp * std::sin(two_pi * f * i / sr + ph));
    };
    if (cfg.kind == SynthKind::separable) {
      if (on[0]) add_sine(uniform(rng, 110.0, 220.0), cfg.component_gain);
      if (on[1]) add_sine(uniform(rng, 1500.0, 3000.0), cfg.component_gain);
      if (on[2])
        for (auto& s : x) s += static_cast<float>(0.5 * cfg.component_gain * gauss(rng));
      if (on[3]) {
        const double f = uniform(rng, 500.0, 700.0), rate = uniform(rng, 3.0, 5.0);
        for (std::size_t i = 0; i < n; ++i) {
          const double gate = std::fmod(static_cast<double>(i) * rate / sr, 1.0) < 0.25 ? 1.0 : 0.0;
          x[i] += static_cast<float>(gate * cfg.component_gain * std::sin(two_pi * f * i / sr));
        }
      }
    } else {
      const int n_nuisance = 1 + static_cast<int>(rng() % 3);
      for (int k = 0; k < n_nuisance; ++k) add_sine(uniform(rng, 100.0, 1200.0), cfg.nuisance_gain / n_nuisance);
      if (on[0]) add_sine(uniform(rng, 2400.0, 2600.0), cfg.weak_gain);
    }
    double rhythm = 0.0;  // click rate mapped to [-1, 1]
    if (cfg.track_rhythm) {
      // Per-track click train: broadband, so it survives filtering, and its
      // timing survives pitch shift, delay and noise. Two views of one track
      // therefore stay identifiable.
      const double rate = uniform(rng, 2.0, 12.0);
      rhythm = (rate - 7.0) / 5.0;
      const double period = sr / rate;
      const double phase = uniform(rng, 0.0, period);
      for (double c = phase; c < static_cast<double>(n); c += period) {
        const auto at = static_cast<std::size_t>(c);
        for (std::size_t k = 0; k < 64 && at + k < n; ++k)
          x[at + k] += static_cast<float>(cfg.click_gain * gauss(rng) * std::exp(-static_cast<double>(k) / 12.0));
      }
    }
    for (auto& s : x) s = std::clamp(s + static_cast<float>(cfg.background_noise * gauss(rng)), -1.0f, 1.0f);

    SecondEmbeddingSeq v;
    v.track_id = id;
    v.vectors.resize(kContextDim, seconds);
    for (Eigen::Index s = 0; s < seconds; ++s) {
      Eigen::VectorXf col(kContextDim);
      for (Eigen::Index i = 0; i < kContextDim; ++i)
        col(i) = static_cast<float>(cfg.video_noise * gauss(rng) / std::sqrt(static_cast<double>(kContextDim)));
      for (int k = 0; k < n_tags; ++k)
        if (on[static_cast<std::size_t>(k)]) col += static_cast<float>(cfg.video_signal) * dirs.col(k);
      col += static_cast<float>(cfg.video_rhythm * rhythm) * dirs.col(n_tags);
      v.vectors.col(s) = static_cast<float>(cfg.video_scale) * col;
    }

    TrackRecord r;
    r.track_id = id;
    r.audio_path = std::string("audio/") + id + ".wav";
    r.video_path = std::string("frames/") + id;
    r.duration_s = static_cast<double>(n) / sr;
    r.split = t < cfg.n_tracks ? Split::train : t < cfg.n_tracks + cfg.n_valid ? Split::valid : Split::test;
    r.tags = tags;
    out.manifest.records.push_back(r);
    out.media.add_audio(AudioWaveform{std::move(x), sr, id});
    out.media.add_video(std::move(v));
  }
  out.manifest.validate();
  return out;
}

// Writes the corpus as files: manifest.jsonl, audio/<id>.wav (16-bit) and
// frames/<id>/NNNNN.ppm at `fps`. Each frame has one quadrant per tag, lit
// when the tag is on; overall brightness jumps every 2 s to create scene cuts.
inline void write_synthetic_corpus(const std::filesystem::path& dir, const SyntheticCorpus& c, double fps = kDefaultFps) {
  std::filesystem::create_directories(dir / "audio");
  for (const auto& r : c.manifest.records) {
    const AudioWaveform& w = c.media.audio(r);
    write_wav16(dir / r.audio_path, w.samples, 1, w.sample_rate_hz);
    const auto fdir = dir / *r.video_path;
    std::filesystem::create_directories(fdir);
    const auto n_frames = static_cast<int>(std::floor(r.duration_s * fps + 1e-9));
    Rng rng = stream_for(0, r.track_id, 7);
    for (int f = 0; f < n_frames; ++f) {
      Frame fr;
      fr.width = fr.height = 16;
      fr.channels = 3;
      fr.pixels.assign(16 * 16 * 3, 0);
      const int base = (f / static_cast<int>(2 * fps)) % 2 ? 120 : 40;
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const std::size_t q = static_cast<std::size_t>((y >= 8) * 2 + (x >= 8));
          const bool lit = q < c.vocabulary.size() && r.tags && r.tags->count(c.vocabulary[q]);
          for (int ch = 0; ch < 3; ++ch) {
            int v = base + (lit ? 100 : 0) + static_cast<int>(rng() % 9) - 4;
            if (lit && static_cast<std::size_t>(ch) == q % 3) v += 30;
            fr.pixels[(static_cast<std::size_t>(y) * 16 + x) * 3 + ch] = static_cast<std::uint8_t>(std::clamp(v, 0, 255));
          }
        }
      char name[32];
      std::snprintf(name, sizeof name, "%05d.ppm", f);
      write_pnm(fdir / name, fr);
    }
  }
  save_manifest(dir / "manifest.jsonl", c.manifest);
}

}  // namespace avcon
