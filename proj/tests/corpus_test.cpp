#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <sstream>

#include "avcon/corpus.hpp"

namespace avcon {
namespace {

TrackRecord video_record(const std::string& id, Split split = Split::train) {
  TrackRecord r;
  r.track_id = id;
  r.audio_path = id + ".wav";
  r.video_path = id + "_frames";
  r.duration_s = 60.0;
  r.split = split;
  return r;
}

SceneList scenes_with_lengths(const std::vector<double>& lengths) {
  SceneList s;
  s.boundaries_s.push_back(0.0);
  for (double l : lengths) s.boundaries_s.push_back(s.boundaries_s.back() + l);
  return s;
}

TEST(DetectScenes, ConstantSeriesIsOneScene) {
  const std::vector<double> series(40, 17.0);
  const auto s = detect_scenes(series, 5.0, 1.0);
  ASSERT_EQ(s.boundaries_s.size(), 2u);
  EXPECT_DOUBLE_EQ(s.boundaries_s.back(), 8.0);
}

TEST(DetectScenes, SingleCut) {
  const std::vector<double> series{0, 0, 0, 100, 100, 100};
  const auto s = detect_scenes(series, 1.0, 50.0);
  EXPECT_EQ(s.boundaries_s, (std::vector<double>{0, 3, 6}));
}

TEST(DetectScenes, AlternatingSeries) {
  const std::vector<double> series{0, 100, 0, 100};
  const auto s = detect_scenes(series, 1.0, 50.0);
  EXPECT_EQ(s.boundaries_s, (std::vector<double>{0, 1, 2, 3, 4}));
  EXPECT_EQ(s.scene_count(), 4u);
}

TEST(DetectScenes, RejectsBadInput) {
  EXPECT_THROW(detect_scenes({}, 5.0, 1.0), Error);
  const std::vector<double> one{1.0};
  EXPECT_THROW(detect_scenes(one, 0.0, 1.0), Error);
  EXPECT_THROW(detect_scenes(one, 5.0, 0.0), Error);
}

TEST(DetectScenes, LengthsSumToDuration) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0, 255);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> series(1 + rng() % 300);
    for (auto& v : series) v = u(rng);
    const double fps = 1.0 + rng() % 30;
    const auto s = detect_scenes(series, fps, 40.0);
    s.validate();
    double sum = 0;
    for (double l : s.lengths()) sum += l;
    EXPECT_NEAR(sum, series.size() / fps, 1.0 / fps);
  }
}

TEST(SceneFilter, ThresholdRule) {
  Manifest m;
  m.records = {video_record("keep"), video_record("drop"), video_record("edge")};
  std::map<std::string, SceneList> scenes{{"keep", scenes_with_lengths({10, 25})},
                                          {"drop", scenes_with_lengths({10, 35})},
                                          {"edge", scenes_with_lengths({30})}};
  const auto res = filter_by_scene_length(m, scenes, 30.0);
  ASSERT_EQ(res.manifest.records.size(), 2u);
  EXPECT_EQ(res.manifest.records[0].track_id, "keep");
  EXPECT_EQ(res.manifest.records[1].track_id, "edge");
  EXPECT_TRUE(res.warnings.empty());
}

TEST(SceneFilter, MissingScenesAndAudioOnlyRecordsAreDropped) {
  Manifest m;
  m.records = {video_record("a"), video_record("b")};
  TrackRecord audio_only = video_record("c");
  audio_only.video_path.reset();
  m.records.push_back(audio_only);
  std::map<std::string, SceneList> scenes{{"a", scenes_with_lengths({5})}, {"c", scenes_with_lengths({5})}};
  const auto res = filter_by_scene_length(m, scenes);
  ASSERT_EQ(res.manifest.records.size(), 1u);
  EXPECT_EQ(res.manifest.records[0].track_id, "a");
  ASSERT_EQ(res.warnings.size(), 1u);
  EXPECT_NE(res.warnings[0].find("'b'"), std::string::npos);
}

TEST(SceneFilter, Idempotent) {
  std::mt19937 rng(3);
  Manifest m;
  std::map<std::string, SceneList> scenes;
  for (int i = 0; i < 60; ++i) {
    const auto id = "t" + std::to_string(i);
    m.records.push_back(video_record(id));
    std::vector<double> lengths(1 + rng() % 5);
    for (auto& l : lengths) l = 1 + rng() % 45;
    if (i % 7 != 0) scenes[id] = scenes_with_lengths(lengths);
  }
  const auto once = filter_by_scene_length(m, scenes).manifest;
  const auto twice = filter_by_scene_length(once, scenes).manifest;
  EXPECT_EQ(once, twice);
}

Manifest split_manifest(int n_train, int n_valid, int n_test) {
  Manifest m;
  int id = 0;
  for (auto [split, n] : {std::pair{Split::train, n_train}, {Split::valid, n_valid}, {Split::test, n_test}})
    for (int i = 0; i < n; ++i) m.records.push_back(video_record("r" + std::to_string(id++), split));
  return m;
}

TEST(Subsample, IdentityFraction) {
  const auto m = split_manifest(37, 5, 6);
  EXPECT_EQ(subsample_training(m, 1.0, 11), m);
}

TEST(Subsample, TenPercentOfHundred) {
  const auto m = split_manifest(100, 10, 10);
  const auto s = subsample_training(m, 0.10, 1);
  EXPECT_EQ(s.count(Split::train), 10u);
  EXPECT_EQ(s.count(Split::valid), 10u);
  EXPECT_EQ(s.count(Split::test), 10u);
}

TEST(Subsample, DeterministicPerSeed) {
  const auto m = split_manifest(100, 3, 3);
  EXPECT_EQ(subsample_training(m, 0.2, 5), subsample_training(m, 0.2, 5));
  EXPECT_NE(subsample_training(m, 0.2, 5), subsample_training(m, 0.2, 6));
}

TEST(Subsample, SizeAndMembershipProperty) {
  std::mt19937 rng(9);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 250);
    const auto m = split_manifest(n, 4, 4);
    const double f = (1 + rng() % 1000) / 1000.0;
    const auto s = subsample_training(m, f, rng());
    EXPECT_EQ(s.count(Split::train), static_cast<std::size_t>(std::llround(f * n)));
    for (const auto* r : s.in_split(Split::train)) {
      const auto* orig = m.find(r->track_id);
      ASSERT_NE(orig, nullptr);
      EXPECT_EQ(orig->split, Split::train);
    }
  }
}

TEST(Subsample, RejectsBadFraction) {
  const auto m = split_manifest(10, 1, 1);
  EXPECT_THROW(subsample_training(m, 0.0, 1), Error);
  EXPECT_THROW(subsample_training(m, 1.5, 1), Error);
}

TEST(ChunkForEval, ExactTwoHops) {
  const auto w = chunk_for_eval(12.30, 6.15, 0.5);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_NEAR(w[0].start_s, 0.0, 1e-12);
  EXPECT_NEAR(w[1].start_s, 3.075, 1e-12);
  EXPECT_NEAR(w[1].end_s, 9.225, 1e-12);
  EXPECT_NEAR(w[2].start_s, 6.15, 1e-12);
  EXPECT_NEAR(w[2].end_s, 12.30, 1e-12);
}

TEST(ChunkForEval, ExactFit) {
  const auto w = chunk_for_eval(6.15, 6.15);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_NEAR(w[0].end_s, 6.15, 1e-12);
  EXPECT_FALSE(w[0].padded);
}

TEST(ChunkForEval, TailWindowIsEndAligned) {
  const auto w = chunk_for_eval(10.0, 6.15, 0.5);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_NEAR(w[1].end_s, 9.225, 1e-12);
  EXPECT_NEAR(w[2].start_s, 3.85, 1e-12);
  EXPECT_NEAR(w[2].end_s, 10.0, 1e-12);
}

TEST(ChunkForEval, ShortTrackIsPadded) {
  const auto w = chunk_for_eval(4.0, 6.15);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_TRUE(w[0].padded);
  EXPECT_DOUBLE_EQ(w[0].end_s, 4.0);
}

TEST(ChunkForEval, CoverageProperty) {
  std::mt19937 rng(21);
  std::uniform_real_distribution<double> seg_d(0.5, 8.0), extra(0.0, 60.0);
  for (int trial = 0; trial < 300; ++trial) {
    const double seg = seg_d(rng);
    const double dur = seg + extra(rng);
    const auto w = chunk_for_eval(dur, seg, 0.5);
    EXPECT_NEAR(w.front().start_s, 0.0, 1e-12);
    EXPECT_NEAR(w.back().end_s, dur, 1e-9);
    for (std::size_t i = 0; i < w.size(); ++i) {
      EXPECT_GE(w[i].start_s, -1e-12);
      EXPECT_LE(w[i].end_s, dur + 1e-9);
      EXPECT_NEAR(w[i].end_s - w[i].start_s, seg, 1e-9);
      if (i > 0) EXPECT_LE(w[i].start_s, w[i - 1].end_s + 1e-12) << "gap before window " << i;
      if (i > 0 && i + 1 < w.size()) EXPECT_NEAR(w[i].start_s - w[i - 1].start_s, 0.5 * seg, 1e-9);
    }
  }
}

TEST(ChunkSamples, MatchesSecondsRule) {
  const auto offs = chunk_sample_offsets(160000, 98415, 0.5);
  // hop = round(98415 / 2) = 49208; third window is end-aligned.
  EXPECT_EQ(offs, (std::vector<std::size_t>{0, 49208, 160000 - 98415}));
  EXPECT_EQ(chunk_sample_offsets(1000, 2000), (std::vector<std::size_t>{0}));
}

TEST(ManifestIo, RoundTripAndValidation) {
  Manifest m = split_manifest(3, 1, 1);
  m.records[0].tags = std::set<std::string>{"rock", "guitar"};
  m.records[1].video_path.reset();
  std::stringstream ss;
  write_manifest(ss, m);
  EXPECT_EQ(read_manifest(ss), m);

  std::stringstream dup;
  Manifest bad = m;
  bad.records.push_back(m.records[0]);
  write_manifest(dup, bad);
  EXPECT_THROW(read_manifest(dup), Error);

  std::stringstream wrong_version("{\"kind\":\"avcon-manifest\",\"schema_version\":99}\n");
  try {
    read_manifest(wrong_version);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::version);
  }
}

TEST(SceneSidecar, RoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "avcon_scene_test";
  std::filesystem::remove_all(dir);
  const auto s = scenes_with_lengths({1.2, 3.4, 5.6});
  save_scenes(scene_sidecar_path(dir, "x"), s);
  const auto loaded = load_scenes(scene_sidecar_path(dir, "x"));
  ASSERT_TRUE(loaded);
  EXPECT_EQ(loaded->boundaries_s, s.boundaries_s);
  EXPECT_FALSE(load_scenes(scene_sidecar_path(dir, "missing")));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace avcon
