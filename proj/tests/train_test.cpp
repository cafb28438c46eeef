#include <gtest/gtest.h>

#include <fstream>

#include "avcon/synth.hpp"
#include "avcon/train.hpp"
#include "test_util.hpp"

namespace avcon {
namespace {

using testing::error_kind;

SampleCnnConfig tiny_encoder() {
  SampleCnnConfig e;
  e.first_kernel = 1;
  e.channels = {4, 4, 4, 8, 8, 8, 8, 8, 512};
  return e;
}

TrainConfig tiny(Stage s, int epochs) {
  TrainConfig c = TrainConfig::defaults_for(s);
  c.encoder = tiny_encoder();
  c.projector.proj_dim = 16;
  c.video.hidden_dim = 8;
  c.head_hidden = 8;
  c.run.batch_size = 4;
  c.run.epochs = epochs;
  c.run.seed = 3;
  return c;
}

const SyntheticCorpus& corpus() {
  static const SyntheticCorpus c = [] {
    SynthConfig s;
    s.n_tracks = 12;
    s.n_valid = 4;
    s.n_test = 4;
    s.seed = 2;
    return make_synthetic_corpus(s);
  }();
  return c;
}

// Tensors of the stem and blocks 1..n (the groups frozen by freeze_blocks(n)).
std::map<std::string, std::uint64_t> low_block_hashes(const Checkpoint& ck, int n) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, h] : tensor_hashes(ck, "encoder.")) {
    bool low = name.rfind("encoder.stem.", 0) == 0;
    for (int b = 1; b <= n; ++b) low |= name.rfind("encoder.block" + std::to_string(b) + ".", 0) == 0;
    if (low) out[name] = h;
  }
  return out;
}

TEST(RunConfig, StageDefaultsAndFreezingRules) {
  EXPECT_EQ(RunConfig::defaults_for(Stage::audio_pretrain).batch_size, 64);
  EXPECT_EQ(RunConfig::defaults_for(Stage::multimodal_pretrain).batch_size, 128);
  EXPECT_EQ(RunConfig::defaults_for(Stage::multimodal_pretrain).freeze_blocks_n, 4);
  EXPECT_EQ(RunConfig::defaults_for(Stage::finetune).freeze_blocks_n, 9);
  RunConfig r = RunConfig::defaults_for(Stage::audio_pretrain);
  r.freeze_blocks_n = 2;
  EXPECT_EQ(error_kind([&] { r.validate(9); }), ErrorKind::config);
  r = RunConfig::defaults_for(Stage::finetune);
  r.freeze_blocks_n = 4;
  EXPECT_EQ(error_kind([&] { r.validate(9); }), ErrorKind::config);
  r = RunConfig::defaults_for(Stage::multimodal_pretrain);
  r.freeze_blocks_n = 10;
  EXPECT_EQ(error_kind([&] { r.validate(9); }), ErrorKind::config);
  r.temperature = 0;
  r.freeze_blocks_n = 4;
  EXPECT_EQ(error_kind([&] { r.validate(9); }), ErrorKind::config);
}

TEST(TrainConfig, FromAppConfig) {
  AppConfig a = AppConfig::defaults();
  a.set("train.temperature", "0.3", Provenance::flag);
  a.set("model.first_kernel", "3", Provenance::flag);
  a.set("augment.enabled", "false", Provenance::flag);
  const TrainConfig s1 = train_config_for(Stage::audio_pretrain, a);
  EXPECT_DOUBLE_EQ(s1.run.temperature, 0.3);
  EXPECT_EQ(s1.encoder.first_kernel, 3);
  EXPECT_EQ(s1.run.batch_size, 64);
  EXPECT_DOUBLE_EQ(s1.augment.pitch_prob, 0.0);
  const TrainConfig s2 = train_config_for(Stage::multimodal_pretrain, a);
  EXPECT_EQ(s2.run.batch_size, 128);
  EXPECT_EQ(s2.run.freeze_blocks_n, 4);
  EXPECT_EQ(train_config_for(Stage::finetune, a).run.freeze_blocks_n, 9);
}

TEST(EpochOrder, IsAPermutationFixedBySeedAndEpoch) {
  const auto a = detail::epoch_order(20, 1, 1);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(a, detail::epoch_order(20, 1, 1));
  EXPECT_NE(a, detail::epoch_order(20, 1, 2));
  EXPECT_NE(a, detail::epoch_order(20, 2, 1));
  const auto b = detail::batches_of(a, 8);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b.back().size(), 4u);
}

TEST(PretrainAudio, DeterministicAndRecordsBothSplits) {
  const auto cfg = tiny(Stage::audio_pretrain, 2);
  const StageResult a = pretrain_audio(corpus().manifest, corpus().media, cfg);
  const StageResult b = pretrain_audio(corpus().manifest, corpus().media, cfg);
  EXPECT_EQ(a.losses("train"), b.losses("train"));
  EXPECT_EQ(a.losses("valid"), b.losses("valid"));
  EXPECT_EQ(serialize(a.last), serialize(b.last));
  EXPECT_EQ(serialize(a.best), serialize(b.best));
  EXPECT_EQ(a.losses("train").size(), 2u);
  EXPECT_EQ(a.last.stage, "audio_pretrain");
  EXPECT_EQ(a.last.epoch, 2u);
  EXPECT_TRUE(a.exported.has_prefix("encoder."));
  for (const auto& t : a.last.tensors) EXPECT_EQ(t.discardable, t.name.rfind("projector.", 0) == 0) << t.name;
  for (double l : a.losses("train")) EXPECT_TRUE(std::isfinite(l));
}

TEST(PretrainAudio, SeedChangesTheRun) {
  auto cfg = tiny(Stage::audio_pretrain, 1);
  const StageResult a = pretrain_audio(corpus().manifest, corpus().media, cfg);
  cfg.run.seed = 4;
  const StageResult b = pretrain_audio(corpus().manifest, corpus().media, cfg);
  EXPECT_NE(serialize(a.last), serialize(b.last));
}

TEST(PretrainAudio, ResumeMatchesAnUninterruptedRun) {
  testing::TempDir dir("avcon_resume");
  const auto full = pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 3));
  TrainOptions first;
  first.out_dir = dir.path;
  pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 1), first);
  const Checkpoint last = load_checkpoint(dir.path / "last.ckpt");
  const Checkpoint best = load_checkpoint(dir.path / "best.ckpt");
  TrainOptions resume;
  resume.resume_last = &last;
  resume.resume_best = &best;
  const auto resumed = pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 3), resume);
  EXPECT_EQ(resumed.losses("train"), full.losses("train"));
  EXPECT_EQ(serialize(resumed.last), serialize(full.last));
  EXPECT_EQ(resumed.best_epoch, full.best_epoch);
  EXPECT_TRUE(std::filesystem::exists(dir.path / "metrics.jsonl"));
}

TEST(PretrainMultimodal, FreezesLowBlocksAndExportsOnlyTheEncoder) {
  const auto s1 = pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 1));
  const auto s2 = pretrain_multimodal(corpus().manifest, corpus().media, s1.exported, tiny(Stage::multimodal_pretrain, 2));
  EXPECT_EQ(low_block_hashes(s2.last, 4), low_block_hashes(s1.exported, 4));
  EXPECT_NE(tensor_hashes(s2.last, "encoder."), tensor_hashes(s1.exported, "encoder."));
  for (const auto& t : s2.exported.tensors) EXPECT_EQ(t.name.rfind("encoder.", 0), 0u) << t.name;
  EXPECT_EQ(s2.exported.stage, "multimodal_pretrain");
  const auto again = pretrain_multimodal(corpus().manifest, corpus().media, s1.exported, tiny(Stage::multimodal_pretrain, 2));
  EXPECT_EQ(serialize(again.last), serialize(s2.last));
}

TEST(PretrainMultimodal, Prerequisites) {
  const Checkpoint empty;
  EXPECT_EQ(error_kind([&] { pretrain_multimodal(corpus().manifest, corpus().media, empty, tiny(Stage::multimodal_pretrain, 1)); }),
            ErrorKind::missing_prerequisite);
  EXPECT_NE(testing::error_text([&] {
              pretrain_multimodal(corpus().manifest, corpus().media, empty, tiny(Stage::multimodal_pretrain, 1));
            }).find("pretrain-audio"),
            std::string::npos);
  const auto s1 = pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 0));
  auto wider = tiny(Stage::multimodal_pretrain, 1);
  wider.encoder.channels[0] = 6;
  EXPECT_EQ(error_kind([&] { pretrain_multimodal(corpus().manifest, corpus().media, s1.exported, wider); }), ErrorKind::config);
}

TEST(PretrainMultimodal, TooManyTracksWithoutVideoAborts) {
  SyntheticCorpus c = corpus();
  const auto train = c.manifest.in_split(Split::train);
  for (std::size_t i = 0; i < train.size() * 3 / 4; ++i) c.media.remove_video(train[i]->track_id);
  const auto s1 = pretrain_audio(c.manifest, c.media, tiny(Stage::audio_pretrain, 0));
  EXPECT_EQ(error_kind([&] { pretrain_multimodal(c.manifest, c.media, s1.exported, tiny(Stage::multimodal_pretrain, 1)); }),
            ErrorKind::data);
  auto lenient = tiny(Stage::multimodal_pretrain, 1);
  lenient.max_skip_fraction = 0.9;
  const auto r = pretrain_multimodal(c.manifest, c.media, s1.exported, lenient);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(Finetune, BackboneStaysFrozenAndModelReloads) {
  const auto s1 = pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 1));
  const auto ft = finetune(corpus().manifest, corpus().media, &s1.exported, corpus().vocabulary, tiny(Stage::finetune, 2));
  EXPECT_EQ(tensor_hashes(ft.best, "encoder."), tensor_hashes(s1.exported, "encoder."));
  EXPECT_EQ(tensor_hashes(ft.last, "encoder."), tensor_hashes(s1.exported, "encoder."));
  EXPECT_EQ(ft.vocabulary, corpus().vocabulary);
  auto model = TaggingModel::from_checkpoint(ft.best);
  const auto p = predict_tracks(*model, corpus().manifest.in_split(Split::test), corpus().media, 0.5);
  EXPECT_EQ(p.scores.rows(), 4);
  EXPECT_EQ(p.scores.cols(), 4);
  EXPECT_TRUE((p.scores.array() >= 0).all() && (p.scores.array() <= 1).all());
  const auto again = finetune(corpus().manifest, corpus().media, &s1.exported, corpus().vocabulary, tiny(Stage::finetune, 2));
  EXPECT_EQ(serialize(again.best), serialize(ft.best));
}

TEST(Finetune, Guards) {
  const auto s1 = pretrain_audio(corpus().manifest, corpus().media, tiny(Stage::audio_pretrain, 0));
  auto cfg = tiny(Stage::finetune, 1);
  cfg.require_conditioned = true;
  EXPECT_EQ(error_kind([&] { finetune(corpus().manifest, corpus().media, &s1.exported, corpus().vocabulary, cfg); }),
            ErrorKind::missing_prerequisite);
  EXPECT_NE(testing::error_text([&] { finetune(corpus().manifest, corpus().media, &s1.exported, corpus().vocabulary, cfg); })
                .find("pretrain-multimodal"),
            std::string::npos);
  EXPECT_EQ(error_kind([&] {
              finetune(corpus().manifest, corpus().media, &s1.exported, {"low_tone"}, tiny(Stage::finetune, 1));
            }),
            ErrorKind::data);
  EXPECT_EQ(error_kind([&] { TaggingModel::from_checkpoint(s1.exported); }), ErrorKind::missing_prerequisite);
}

TEST(Vocabulary, SortedUnionOfTags) {
  EXPECT_EQ(vocabulary_of(corpus().manifest), (std::vector<std::string>{"high_tone", "low_tone", "noise", "pulse"}));
}

}  // namespace
}  // namespace avcon
