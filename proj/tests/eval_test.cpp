#include <gtest/gtest.h>

#include <fstream>

#include "avcon/eval.hpp"
#include "avcon/synth.hpp"
#include "test_util.hpp"

namespace avcon {
namespace {

using testing::error_kind;

TEST(TagGroups, DefaultMapCoversTheTop50) {
  const TagGroupMap m = TagGroupMap::load(TagGroupMap::default_path());
  EXPECT_EQ(m.group_of.size(), 50u);
  std::map<std::string, int> counts;
  for (const auto& [tag, g] : m.group_of) ++counts[g];
  EXPECT_EQ(counts["Genre"], 13);
  EXPECT_EQ(counts["Mood"], 6);
  EXPECT_EQ(counts["Instruments"], 14);
  EXPECT_EQ(counts["Vocals"], 17);
  EXPECT_EQ(m.group_of.at("no vocals"), "Vocals");
  EXPECT_EQ(m.group_of.at("harpsichord"), "Instruments");
}

TEST(TagGroups, ParseErrors) {
  EXPECT_EQ(error_kind([] { TagGroupMap::parse("rock Genre\n"); }), ErrorKind::data);
  EXPECT_EQ(error_kind([] { TagGroupMap::parse("rock\tStyle\n"); }), ErrorKind::data);
  EXPECT_EQ(error_kind([] { TagGroupMap::parse("rock\tGenre\nrock\tMood\n"); }), ErrorKind::data);
  EXPECT_EQ(TagGroupMap::parse("# c\n\nrock\tGenre\r\n").group_of.at("rock"), "Genre");
}

TEST(GroupReport, SingletonGroups) {
  const auto m = TagGroupMap::parse("a\tGenre\nb\tMood\n");
  const GroupReport r = tag_group_report({{"a", 1.0}, {"b", 0.0}}, m);
  EXPECT_DOUBLE_EQ(*r.at("Genre").mean, 1.0);
  EXPECT_DOUBLE_EQ(*r.at("Mood").mean, 0.0);
  EXPECT_EQ(r.at("Vocals").count, 0u);
  EXPECT_FALSE(r.at("Vocals").mean);
}

TEST(GroupReport, OneGroupEqualsMacroAverage) {
  const auto m = TagGroupMap::parse("a\tVocals\nb\tVocals\nc\tVocals\n");
  const GroupReport r = tag_group_report({{"a", 0.9}, {"b", 0.6}, {"c", 0.75}}, m);
  EXPECT_NEAR(*r.at("Vocals").mean, 0.75, 1e-15);
  EXPECT_EQ(r.at("Vocals").count, 3u);
}

TEST(GroupReport, UnmappedTagsAreListed) {
  const auto m = TagGroupMap::parse("a\tGenre\n");
  const std::string msg = testing::error_text([&] { tag_group_report({{"a", 1}, {"zz", 0}, {"yy", 1}}, m); });
  EXPECT_NE(msg.find("yy"), std::string::npos);
  EXPECT_NE(msg.find("zz"), std::string::npos);
}

TEST(GroupReport, CsvRoundTrip) {
  testing::TempDir dir("avcon_groups");
  const auto m = TagGroupMap::load(TagGroupMap::default_path());
  std::map<std::string, double> per_tag;
  int i = 0;
  for (const auto& [tag, g] : m.group_of) per_tag[tag] = 0.5 + 0.01 * (i++ % 37) + 1.0 / 3.0 * 1e-3;
  const GroupReport r = tag_group_report(per_tag, m);
  write_group_csv(dir.path / "groups.csv", r);
  const GroupReport back = read_group_csv(dir.path / "groups.csv");
  ASSERT_EQ(back.rows.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(back.rows[k].group, r.rows[k].group);
    EXPECT_EQ(back.rows[k].count, r.rows[k].count);
    EXPECT_EQ(back.rows[k].mean, r.rows[k].mean);
  }
}

TEST(EvalReport, PerTagCsvRoundTripAndSkips) {
  PredictionMatrix p;
  p.vocabulary = {"male vocal", "rock", "solo"};
  p.track_ids = {"a", "b", "c"};
  p.scores.resize(3, 3);
  p.scores << 0.9, 0.2, 0.1, 0.1, 0.8, 0.2, 0.5, 0.3, 0.3;
  LabelMatrix l;
  l.labels.resize(3, 3);
  l.labels << 1, 0, 1, 0, 1, 1, 0, 0, 1;
  const EvalReport r = evaluate_predictions(p, l);
  EXPECT_EQ(r.skipped_tags, std::vector<std::string>{"solo"});
  EXPECT_DOUBLE_EQ(r.roc_auc, 1.0);
  testing::TempDir dir("avcon_eval");
  write_per_tag_csv(dir.path / "per_tag.csv", r);
  EXPECT_EQ(read_per_tag_csv(dir.path / "per_tag.csv", Metric::roc_auc), r.roc_per_tag);
  EXPECT_EQ(read_per_tag_csv(dir.path / "per_tag.csv", Metric::pr_auc), r.pr_per_tag);
  EXPECT_EQ(r.to_json().at("skipped_tags").size(), 1u);
}

TEST(Plot, SvgHasOneLinePerSeries) {
  const std::string svg = svg_line_chart("t", "x", "y", {{"a", {{1, 0.5}, {2, 0.7}}}, {"b", {{1, 0.4}}}});
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  std::size_t n = 0;
  for (auto pos = svg.find("<polyline"); pos != std::string::npos; pos = svg.find("<polyline", pos + 1)) ++n;
  EXPECT_EQ(n, 2u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(AblationTable, CsvRoundTrip) {
  testing::TempDir dir("avcon_abl");
  const std::vector<AblationRow> rows{{"vcmr", 3, 3.6906875, 1.0, 12, 0.8125, 0.25}, {"audio_only", 5, 6.1509375, 0.05, 1, 0.5, 0.125}};
  detail::write_text(dir.path / "t.csv", ablation_csv(rows));
  const auto back = read_ablation_csv(dir.path / "t.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].model, "audio_only");
  EXPECT_EQ(back[0].first_kernel, 3);
  EXPECT_DOUBLE_EQ(back[0].duration_s, 3.6906875);
  EXPECT_DOUBLE_EQ(back[1].fraction, 0.05);
  EXPECT_DOUBLE_EQ(back[0].roc_auc, 0.8125);
}

// Small pipeline settings for exercising the drivers end to end.
PipelineSettings tiny_pipeline() {
  PipelineSettings s;
  SampleCnnConfig e;
  e.first_kernel = 1;
  e.channels = {4, 4, 4, 8, 8, 8, 8, 8, 512};
  s.set_encoder(e);
  for (TrainConfig* c : {&s.audio, &s.multimodal, &s.finetune}) {
    c->projector.proj_dim = 16;
    c->video.hidden_dim = 8;
    c->head_hidden = 8;
    c->run.batch_size = 4;
    c->run.epochs = 1;
  }
  return s;
}

const SyntheticCorpus& small_corpus() {
  static const SyntheticCorpus c = [] {
    SynthConfig s;
    s.n_tracks = 12;
    s.n_valid = 4;
    s.n_test = 8;
    s.seed = 5;
    return make_synthetic_corpus(s);
  }();
  return c;
}

TEST(ResolutionAblation, GridCardinalityDurationsAndFiles) {
  testing::TempDir dir("avcon_res");
  const auto& c = small_corpus();
  const AblationResult r = run_resolution_ablation(c.manifest, c.media, tiny_pipeline(), {1, 2}, c.vocabulary, dir.path);
  ASSERT_EQ(r.rows.size(), 4u);
  for (const auto& row : r.rows) EXPECT_DOUBLE_EQ(row.duration_s, row.first_kernel * 19683.0 / 16000.0);
  EXPECT_EQ(r.rows[0].model, "vcmr");
  EXPECT_EQ(r.rows[1].model, "audio_only");
  EXPECT_TRUE(std::filesystem::exists(dir.path / "resolution.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir.path / "resolution_roc_auc.svg"));
  EXPECT_EQ(read_ablation_csv(dir.path / "resolution.csv").size(), 4u);
}

TEST(ResolutionAblation, BadGridRejectedBeforeTraining) {
  const auto& c = small_corpus();
  EXPECT_EQ(error_kind([&] { run_resolution_ablation(c.manifest, c.media, tiny_pipeline(), {1, 0}, c.vocabulary); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { run_resolution_ablation(c.manifest, c.media, tiny_pipeline(), {2, 2}, c.vocabulary); }), ErrorKind::config);
  EXPECT_EQ(error_kind([&] { run_resolution_ablation(c.manifest, c.media, tiny_pipeline(), {}, c.vocabulary); }), ErrorKind::config);
}

TEST(ScarcityAblation, FiveFractionGridAndReference) {
  testing::TempDir dir("avcon_scar");
  const auto& c = small_corpus();
  const PipelineSettings s = tiny_pipeline();
  const Checkpoint backbone = pretrain_audio(c.manifest, c.media, s.audio).exported;
  const AblationResult r = run_scarcity_ablation(c.manifest, c.media, {{"audio_only", backbone}}, s.finetune, c.vocabulary,
                                                 scarcity_grid(), true, dir.path);
  ASSERT_EQ(r.rows.size(), 6u);
  const std::vector<double> want{0.05, 0.10, 0.20, 0.50, 0.80, 1.0};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(r.rows[i].fraction, want[i]);
  EXPECT_EQ(r.rows[0].n_train, 1u);
  EXPECT_EQ(r.rows[5].n_train, 12u);
  const auto plain = finetune(c.manifest, c.media, &backbone, c.vocabulary, s.finetune);
  const EvalReport ref = evaluate_model(plain.best, c.manifest, Split::test, c.media);
  EXPECT_DOUBLE_EQ(r.rows[5].roc_auc, ref.roc_auc);
  EXPECT_DOUBLE_EQ(r.rows[5].pr_auc, ref.pr_auc);
  EXPECT_TRUE(std::filesystem::exists(dir.path / "scarcity.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir.path / "scarcity_pr_auc.svg"));
}

TEST(ScarcityAblation, FractionWithNoTracksIsAnError) {
  const auto& c = small_corpus();
  const PipelineSettings s = tiny_pipeline();
  const Checkpoint backbone = pretrain_audio(c.manifest, c.media, s.audio).exported;
  EXPECT_EQ(error_kind([&] { run_scarcity_ablation(c.manifest, c.media, {{"a", backbone}}, s.finetune, c.vocabulary, {0.01}); }),
            ErrorKind::data);
  EXPECT_EQ(error_kind([&] { run_scarcity_ablation(c.manifest, c.media, {{"a", backbone}}, s.finetune, c.vocabulary, {1.5}); }),
            ErrorKind::config);
}

TEST(Synth, SplitsLabelsAndMedia) {
  const auto& c = small_corpus();
  EXPECT_EQ(c.manifest.count(Split::train), 12u);
  EXPECT_EQ(c.manifest.count(Split::valid), 4u);
  EXPECT_EQ(c.manifest.count(Split::test), 8u);
  for (Split s : {Split::train, Split::test}) {
    const auto recs = c.manifest.in_split(s);
    const LabelMatrix l = labels_for(recs, c.vocabulary);
    for (Eigen::Index t = 0; t < l.labels.cols(); ++t) {
      const auto pos = l.labels.col(t).cast<int>().sum();
      EXPECT_GT(pos, 0);
      EXPECT_LT(pos, l.labels.rows());
    }
  }
  for (const auto& r : c.manifest.records) {
    EXPECT_EQ(c.media.audio(r).size(), 48000u);
    ASSERT_TRUE(c.media.video(r));
    EXPECT_EQ(c.media.video(r)->vectors.cols(), 3);
  }
  const SyntheticCorpus again = make_synthetic_corpus([] {
    SynthConfig s;
    s.n_tracks = 12;
    s.n_valid = 4;
    s.n_test = 8;
    s.seed = 5;
    return s;
  }());
  EXPECT_EQ(again.media.audio(again.manifest.records[3]).samples, c.media.audio(c.manifest.records[3]).samples);
}

TEST(Synth, WrittenCorpusReloads) {
  testing::TempDir dir("avcon_syn");
  SynthConfig s;
  s.n_tracks = 2;
  s.n_valid = 1;
  s.n_test = 1;
  const SyntheticCorpus c = make_synthetic_corpus(s);
  write_synthetic_corpus(dir.path, c);
  const Manifest m = load_manifest(dir.path / "manifest.jsonl");
  ASSERT_EQ(m.records.size(), 4u);
  EXPECT_EQ(m.records[0].tags, c.manifest.records[0].tags);
  const AudioWaveform w = decode_audio(dir.path / m.records[0].audio_path);
  EXPECT_EQ(w.size(), 48000u);
  EXPECT_TRUE(std::filesystem::exists(dir.path / *m.records[0].video_path / "00000.ppm"));
}

}  // namespace
}  // namespace avcon
