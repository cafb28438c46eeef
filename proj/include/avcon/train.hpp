#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "avcon/audio_io.hpp"
#include "avcon/augment.hpp"
#include "avcon/checkpoint.hpp"
#include "avcon/config.hpp"
#include "avcon/contrastive.hpp"
#include "avcon/corpus.hpp"
#include "avcon/features.hpp"
#include "avcon/metrics.hpp"
#include "avcon/models.hpp"
#include "avcon/nn/adam.hpp"

namespace avcon {

enum class Stage { audio_pretrain, multimodal_pretrain, finetune };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::audio_pretrain: return "audio_pretrain";
    case Stage::multimodal_pretrain: return "multimodal_pretrain";
    case Stage::finetune: return "finetune";
  }
  return "audio_pretrain";
}

struct RunConfig {
  Stage stage = Stage::audio_pretrain;
  int batch_size = 64;
  int epochs = 50;
  nn::AdamConfig adam;
  double temperature = 0.1;
  int freeze_blocks_n = 0;
  std::uint64_t seed = 0;

  static RunConfig defaults_for(Stage s, int n_blocks = 9) {
    RunConfig r;
    r.stage = s;
    r.batch_size = s == Stage::audio_pretrain ? 64 : 128;
    r.freeze_blocks_n = s == Stage::audio_pretrain ? 0 : s == Stage::multimodal_pretrain ? 4 : n_blocks;
    return r;
  }

  void validate(int n_blocks) const {
    if (batch_size < 1) fail(ErrorKind::config, "batch_size must be positive");
    if (epochs < 0) fail(ErrorKind::config, "epochs must be non-negative");
    if (!(adam.learning_rate > 0.0)) fail(ErrorKind::config, "learning_rate must be positive");
    if (!(adam.weight_decay >= 0.0)) fail(ErrorKind::config, "weight_decay must be non-negative");
    if (!(temperature > 0.0)) fail(ErrorKind::config, "temperature must be positive");
    const bool ok = stage == Stage::audio_pretrain        ? freeze_blocks_n == 0
                    : stage == Stage::multimodal_pretrain ? freeze_blocks_n >= 0 && freeze_blocks_n <= n_blocks
                                                          : freeze_blocks_n == n_blocks;
    if (!ok)
      fail(ErrorKind::config, std::string("freeze_blocks_n=") + std::to_string(freeze_blocks_n) + " is inconsistent with stage " +
                                  to_string(stage));
  }
};

struct TrainConfig {
  RunConfig run;
  SampleCnnConfig encoder;
  ProjectorConfig projector;
  VideoEncoderConfig video;
  int head_hidden = 256;
  AugmentChainConfig augment;
  double eval_overlap = 0.5;
  double max_skip_fraction = 0.5;
  bool require_conditioned = false;

  static TrainConfig defaults_for(Stage s) {
    TrainConfig c;
    c.run = RunConfig::defaults_for(s, c.encoder.n_blocks);
    return c;
  }

  void validate() const {
    encoder.validate();
    projector.validate();
    video.validate();
    augment.validate();
    run.validate(encoder.n_blocks);
    if (head_hidden < 1) fail(ErrorKind::config, "head hidden width must be positive");
    if (!(eval_overlap >= 0.0 && eval_overlap < 1.0)) fail(ErrorKind::config, "eval overlap must be in [0, 1)");
    if (!(max_skip_fraction >= 0.0 && max_skip_fraction <= 1.0)) fail(ErrorKind::config, "max_skip_fraction must be in [0, 1]");
  }
};

inline nlohmann::json to_json(const SampleCnnConfig& c) {
  return {{"first_kernel", c.first_kernel}, {"n_blocks", c.n_blocks}, {"pool_size", c.pool_size},
          {"channels", c.channels},         {"out_dim", c.out_dim},   {"sample_rate_hz", c.sample_rate_hz}};
}

inline SampleCnnConfig encoder_config_from_json(const nlohmann::json& j) {
  SampleCnnConfig c;
  try {
    c.first_kernel = j.at("first_kernel").get<int>();
    c.n_blocks = j.at("n_blocks").get<int>();
    c.pool_size = j.at("pool_size").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.out_dim = j.at("out_dim").get<int>();
    c.sample_rate_hz = j.at("sample_rate_hz").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, std::string("malformed encoder config echo: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const AugmentChainConfig& a) {
  auto r = [](const Range& x) { return nlohmann::json::array({x.lo, x.hi}); };
  return {{"pitch_prob", a.pitch_prob},   {"pitch_semitones", r(a.pitch_semitones)}, {"filter_prob", a.filter_prob},
          {"lowpass_cutoff_hz", r(a.lowpass_cutoff_hz)}, {"highpass_cutoff_hz", r(a.highpass_cutoff_hz)}, {"delay_prob", a.delay_prob}, {"delay_ms", r(a.delay_ms)},
          {"delay_decay", r(a.delay_decay)},           {"noise_prob", a.noise_prob}, {"noise_snr_db", r(a.noise_snr_db)}};
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.run.stage)},
          {"batch_size", c.run.batch_size},
          {"epochs", c.run.epochs},
          {"optimizer",
           {{"name", "adam"},
            {"learning_rate", c.run.adam.learning_rate},
            {"beta1", c.run.adam.beta1},
            {"beta2", c.run.adam.beta2},
            {"eps", c.run.adam.eps},
            {"weight_decay", c.run.adam.weight_decay}}},
          {"temperature", c.run.temperature},
          {"freeze_blocks_n", c.run.freeze_blocks_n},
          {"seed", c.run.seed},
          {"encoder", to_json(c.encoder)},
          {"projector", {{"hidden_dim", c.projector.hidden_dim}, {"proj_dim", c.projector.proj_dim}}},
          {"video", {{"hidden_dim", c.video.hidden_dim}, {"mean_readout", c.video.mean_readout}}},
          {"head_hidden", c.head_hidden},
          {"augment", to_json(c.augment)},
          {"eval_overlap", c.eval_overlap},
          {"max_skip_fraction", c.max_skip_fraction},
          {"require_conditioned", c.require_conditioned}};
}

inline Range range_from(const std::vector<double>& v, const std::string& key) {
  if (v.size() != 2) fail(ErrorKind::config, "config key '" + key + "' needs exactly two values (lo,hi)");
  return Range{v[0], v[1]};
}

inline TrainConfig train_config_for(Stage s, const AppConfig& a) {
  TrainConfig c = TrainConfig::defaults_for(s);
  c.encoder.first_kernel = static_cast<int>(a.get_int("model.first_kernel"));
  c.encoder.channels.clear();
  for (auto v : a.get_int_list("model.channels")) c.encoder.channels.push_back(static_cast<int>(v));
  c.encoder.n_blocks = static_cast<int>(c.encoder.channels.size());
  c.projector.hidden_dim = static_cast<int>(a.get_int("model.proj_hidden"));
  c.projector.proj_dim = static_cast<int>(a.get_int("model.proj_dim"));
  c.video.hidden_dim = static_cast<int>(a.get_int("model.video_hidden"));
  const std::string readout = a.get_text("model.video_readout");
  if (readout != "last" && readout != "mean") fail(ErrorKind::config, "config key 'model.video_readout' must be last or mean");
  c.video.mean_readout = readout == "mean";
  c.head_hidden = static_cast<int>(a.get_int("model.head_hidden"));

  if (a.get_bool("augment.enabled")) {
    c.augment.pitch_prob = a.get_real("augment.pitch_prob");
    c.augment.pitch_semitones = range_from(a.get_real_list("augment.pitch_semitones"), "augment.pitch_semitones");
    c.augment.filter_prob = a.get_real("augment.filter_prob");
    c.augment.lowpass_cutoff_hz = range_from(a.get_real_list("augment.lowpass_cutoff_hz"), "augment.lowpass_cutoff_hz");
    c.augment.highpass_cutoff_hz = range_from(a.get_real_list("augment.highpass_cutoff_hz"), "augment.highpass_cutoff_hz");
    c.augment.delay_prob = a.get_real("augment.delay_prob");
    c.augment.delay_ms = range_from(a.get_real_list("augment.delay_ms"), "augment.delay_ms");
    c.augment.delay_decay = range_from(a.get_real_list("augment.delay_decay"), "augment.delay_decay");
    c.augment.noise_prob = a.get_real("augment.noise_prob");
    c.augment.noise_snr_db = range_from(a.get_real_list("augment.noise_snr_db"), "augment.noise_snr_db");
  } else {
    c.augment = AugmentChainConfig::disabled();
  }

  c.run.seed = static_cast<std::uint64_t>(a.get_int("seed"));
  c.run.batch_size = static_cast<int>(s == Stage::audio_pretrain ? a.get_int("train.batch_size_audio") : a.get_int("train.batch_size"));
  c.run.epochs = static_cast<int>(s == Stage::finetune ? a.get_int("train.finetune_epochs") : a.get_int("train.epochs"));
  c.run.adam.learning_rate = a.get_real("train.learning_rate");
  c.run.adam.weight_decay = a.get_real("train.weight_decay");
  c.run.adam.beta1 = a.get_real("train.adam_beta1");
  c.run.adam.beta2 = a.get_real("train.adam_beta2");
  c.run.adam.eps = a.get_real("train.adam_eps");
  c.run.temperature = a.get_real("train.temperature");
  c.run.freeze_blocks_n = s == Stage::audio_pretrain        ? 0
                          : s == Stage::multimodal_pretrain ? static_cast<int>(a.get_int("train.freeze_blocks_multimodal"))
                                                            : c.encoder.n_blocks;
  c.eval_overlap = a.get_real("eval.overlap");
  c.max_skip_fraction = a.get_real("train.max_skip_fraction");
  c.require_conditioned = a.get_bool("train.require_conditioned");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Media access
// ---------------------------------------------------------------------------

class MediaSource {
 public:
  virtual ~MediaSource() = default;
  virtual const AudioWaveform& audio(const TrackRecord& r) const = 0;
  virtual std::optional<SecondEmbeddingSeq> video(const TrackRecord& r) const = 0;
};

class InMemoryMediaSource : public MediaSource {
 public:
  void add_audio(AudioWaveform w) {
    const std::string id = w.track_id;
    audio_[id] = std::move(w);
  }
  void add_video(SecondEmbeddingSeq s) {
    const std::string id = s.track_id;
    video_[id] = std::move(s);
  }
  void remove_video(const std::string& id) { video_.erase(id); }

  const AudioWaveform& audio(const TrackRecord& r) const override {
    auto it = audio_.find(r.track_id);
    if (it == audio_.end()) fail(ErrorKind::decode, "no audio for track '" + r.track_id + "'");
    return it->second;
  }
  std::optional<SecondEmbeddingSeq> video(const TrackRecord& r) const override {
    auto it = video_.find(r.track_id);
    if (it == video_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::map<std::string, AudioWaveform> audio_;
  std::map<std::string, SecondEmbeddingSeq> video_;
};

// Audio paths are resolved against `base_dir`; video features come from the
// per-track cache files in `feature_dir`. Decoded audio is kept in memory.
class FileMediaSource : public MediaSource {
 public:
  FileMediaSource(std::filesystem::path base_dir, std::filesystem::path feature_dir)
      : base_(std::move(base_dir)), features_(std::move(feature_dir)) {}

  const AudioWaveform& audio(const TrackRecord& r) const override {
    auto it = cache_.find(r.track_id);
    if (it != cache_.end()) return it->second;
    std::filesystem::path p(r.audio_path);
    if (p.is_relative()) p = base_ / p;
    return cache_.emplace(r.track_id, decode_audio(p, r.track_id)).first->second;
  }

  std::optional<SecondEmbeddingSeq> video(const TrackRecord& r) const override {
    if (features_.empty()) return std::nullopt;
    const auto p = feature_cache_path(features_, r.track_id);
    if (!std::filesystem::exists(p)) return std::nullopt;
    return load_second_embeddings(p, r.track_id);
  }

 private:
  std::filesystem::path base_, features_;
  mutable std::map<std::string, AudioWaveform> cache_;
};

// ---------------------------------------------------------------------------
// Run bookkeeping
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  std::map<std::string, double> metrics;

  nlohmann::json to_json() const {
    nlohmann::json j = {{"stage", stage}, {"epoch", epoch}, {"split", split}, {"loss", loss}};
    j["metrics"] = nlohmann::json::object();
    for (const auto& [k, v] : metrics) j["metrics"][k] = v;
    return j;
  }
  static EpochRecord from_json(const nlohmann::json& j) {
    EpochRecord r;
    r.stage = j.at("stage").get<std::string>();
    r.epoch = j.at("epoch").get<int>();
    r.split = j.at("split").get<std::string>();
    r.loss = j.at("loss").get<double>();
    for (const auto& [k, v] : j.at("metrics").items()) r.metrics[k] = v.get<double>();
    return r;
  }
  bool operator==(const EpochRecord&) const = default;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // last.ckpt, best.ckpt, metrics.jsonl
  const Checkpoint* resume_last = nullptr;
  const Checkpoint* resume_best = nullptr;
  std::function<void(const EpochRecord&)> on_record;
  std::ostream* warnings = nullptr;
};

struct StageResult {
  Checkpoint last;
  Checkpoint best;
  Checkpoint exported;  // what later stages consume
  int best_epoch = 0;
  std::vector<EpochRecord> log;
  std::vector<std::string> warnings;

  std::vector<double> losses(const std::string& split) const {
    std::vector<double> out;
    for (const auto& r : log)
      if (r.split == split) out.push_back(r.loss);
    return out;
  }
};

struct FinetuneResult : StageResult {
  std::vector<std::string> vocabulary;
  std::map<std::string, double> best_metrics;
};

namespace detail {

inline constexpr std::uint64_t kValidStream = 0xFFFFFFFFULL;

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = stream_for(seed, "#order", static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

inline std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size))
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + static_cast<std::size_t>(batch_size))));
  return out;
}

inline nn::Mat<float> row_of(const AudioWaveform& w) {
  return Eigen::Map<const Eigen::RowVectorXf>(w.samples.data(), static_cast<Eigen::Index>(w.samples.size()));
}

inline std::string rng_state(std::uint64_t seed, int next_epoch) {
  return "streams=mix(seed,track,epoch);seed=" + std::to_string(seed) + ";next_epoch=" + std::to_string(next_epoch);
}

struct Recorder {
  const TrainOptions& opt;
  std::vector<EpochRecord>& log;
  void operator()(EpochRecord r) {
    if (opt.out_dir) {
      std::filesystem::create_directories(*opt.out_dir);
      std::ofstream os(*opt.out_dir / "metrics.jsonl", std::ios::app);
      os << r.to_json().dump() << "\n";
    }
    if (opt.on_record) opt.on_record(r);
    log.push_back(std::move(r));
  }
};

inline void warn(StageResult& res, const TrainOptions& opt, const std::string& msg) {
  res.warnings.push_back(msg);
  if (opt.warnings) *opt.warnings << "warning: " << msg << "\n";
}

inline nlohmann::json history_json(const std::vector<EpochRecord>& log, int best_epoch, double best_score) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : log) recs.push_back(r.to_json());
  return {{"records", recs}, {"best_epoch", best_epoch}, {"best_score", best_score}};
}

struct ResumeState {
  int start_epoch = 1;
  int best_epoch = 0;
  double best_score = -std::numeric_limits<double>::infinity();
};

inline ResumeState resume_from(const TrainOptions& opt, Stage stage, std::vector<EpochRecord>& log) {
  ResumeState s;
  if (!opt.resume_last) return s;
  const Checkpoint& ck = *opt.resume_last;
  if (ck.stage != to_string(stage))
    fail(ErrorKind::config, "cannot resume " + std::string(to_string(stage)) + " from a '" + ck.stage + "' checkpoint");
  s.start_epoch = static_cast<int>(ck.epoch) + 1;
  if (ck.history.is_object()) {
    for (const auto& j : ck.history.at("records")) log.push_back(EpochRecord::from_json(j));
    s.best_epoch = ck.history.at("best_epoch").get<int>();
    s.best_score = ck.history.at("best_score").is_null() ? -std::numeric_limits<double>::infinity()
                                                         : ck.history.at("best_score").get<double>();
  }
  return s;
}

inline void check_encoder_echo(const Checkpoint& ck, const SampleCnnConfig& want, const std::string& what) {
  if (!ck.has_prefix("encoder."))
    fail(ErrorKind::missing_prerequisite, what + " checkpoint holds no audio encoder; produce one with `pretrain-audio`");
  if (!ck.config.contains("encoder")) fail(ErrorKind::config, what + " checkpoint has no encoder config echo");
  const SampleCnnConfig got = encoder_config_from_json(ck.config.at("encoder"));
  if (to_json(got) != to_json(want))
    fail(ErrorKind::config, what + " checkpoint encoder config " + to_json(got).dump() + " differs from requested " +
                                to_json(want).dump());
}

inline void persist(const TrainOptions& opt, const StageResult& res) {
  if (!opt.out_dir) return;
  save_checkpoint(*opt.out_dir / "last.ckpt", res.last);
  save_checkpoint(*opt.out_dir / "best.ckpt", res.best);
}

template <class F>
auto guard_numeric(const TrainOptions& opt, const std::function<Checkpoint()>& snapshot, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::numeric) throw;
    if (opt.out_dir) save_checkpoint(*opt.out_dir / "diagnostic.ckpt", snapshot());
    throw Error(ErrorKind::numeric, std::string(e.what()) + (opt.out_dir ? " (diagnostic checkpoint written)" : ""));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: contrastive pre-training on two augmented views of each track.
// ---------------------------------------------------------------------------

inline StageResult pretrain_audio(const Manifest& manifest, const MediaSource& media, const TrainConfig& cfg,
                                  const TrainOptions& opt = {}) {
  if (cfg.run.stage != Stage::audio_pretrain) fail(ErrorKind::config, "pretrain_audio needs an audio_pretrain run config");
  cfg.validate();
  const auto train = manifest.in_split(Split::train);
  if (train.empty()) fail(ErrorKind::data, "audio pre-training: the train split is empty");
  const auto valid = manifest.in_split(Split::valid);
  for (const auto* r : train)
    if (!(r->duration_s > 0.0)) fail(ErrorKind::data, "track '" + r->track_id + "' has non-positive duration");

  const std::uint64_t seed = cfg.run.seed;
  SampleCnn<float> enc(cfg.encoder, seed);
  Projector<float> proj("projector", cfg.projector, seed);
  nn::ParamList<float> enc_params = enc.parameters(), proj_params;
  proj.collect(proj_params);
  nn::ParamList<float> params = enc_params;
  params.insert(params.end(), proj_params.begin(), proj_params.end());
  nn::Adam<float> adam(cfg.run.adam);
  const std::size_t seg = cfg.encoder.required_input_samples();
  const LossConfig loss_cfg{cfg.run.temperature};
  const nlohmann::json echo = to_json(cfg);

  StageResult res;
  detail::Recorder record{opt, res.log};
  std::vector<EpochRecord> prior;
  auto st = detail::resume_from(opt, Stage::audio_pretrain, prior);
  res.log = prior;
  if (opt.resume_last) {
    restore(*opt.resume_last, params);
    restore_optimizer(*opt.resume_last, adam);
  }

  auto snapshot = [&](int epoch) {
    Checkpoint ck;
    ck.stage = to_string(Stage::audio_pretrain);
    ck.epoch = static_cast<std::uint64_t>(epoch);
    ck.config = echo;
    capture(ck, enc_params);
    capture(ck, proj_params, /*discardable=*/true);
    capture_optimizer(ck, adam);
    ck.rng_state = detail::rng_state(seed, epoch + 1);
    return ck;
  };

  // Returns the mean loss over batches; updates parameters when `learn`.
  auto run_pass = [&](const std::vector<const TrackRecord*>& recs, const std::vector<std::size_t>& order, int epoch,
                      bool learn) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& batch : detail::batches_of(order, cfg.run.batch_size)) {
      const std::size_t b = batch.size();
      std::vector<nn::Mat<float>> views(2 * b);
      for (std::size_t i = 0; i < b; ++i) {
        const TrackRecord& r = *recs[batch[i]];
        Rng rng = stream_for(seed, r.track_id, learn ? static_cast<std::uint64_t>(epoch) : detail::kValidStream);
        auto [x, y] = make_training_pair(media.audio(r), seg, cfg.augment, rng);
        views[i] = detail::row_of(x);
        views[b + i] = detail::row_of(y);
      }
      if (learn)
        for (auto* p : params) p->zero_grad();
      const nn::Mat<float> h = enc.forward(views, learn, learn);
      const nn::Mat<float> z = proj.forward(h, learn);
      const auto pair = build_unimodal_batch<float>(z.leftCols(static_cast<Eigen::Index>(b)),
                                                    z.rightCols(static_cast<Eigen::Index>(b)));
      const auto lg = nt_xent<float>(pair, loss_cfg, learn);
      if (learn) {
        nn::Mat<float> dz(z.rows(), z.cols());
        dz << lg.d_left, lg.d_right;
        enc.backward(proj.backward(dz));
        adam.step(params);
      }
      total += lg.loss;
      ++n;
    }
    return total / static_cast<double>(n);
  };

  res.best = snapshot(st.start_epoch - 1);
  if (opt.resume_best) res.best = *opt.resume_best;
  res.best_epoch = st.best_epoch;
  for (int e = st.start_epoch; e <= cfg.run.epochs; ++e) {
    const double train_loss = detail::guard_numeric(opt, [&] { return snapshot(e - 1); },
                                                    [&] { return run_pass(train, detail::epoch_order(train.size(), seed, e), e, true); });
    record({to_string(Stage::audio_pretrain), e, "train", train_loss, {}});
    double score = -train_loss;
    if (!valid.empty()) {
      std::vector<std::size_t> order(valid.size());
      std::iota(order.begin(), order.end(), 0);
      const double vl = detail::guard_numeric(opt, [&] { return snapshot(e); }, [&] { return run_pass(valid, order, e, false); });
      record({to_string(Stage::audio_pretrain), e, "valid", vl, {}});
      score = -vl;
    }
    const bool improved = score > st.best_score;
    if (improved) {
      st.best_score = score;
      st.best_epoch = e;
    }
    res.last = snapshot(e);
    res.last.history = detail::history_json(res.log, st.best_epoch, st.best_score);
    if (improved) {
      res.best = res.last;
      res.best_epoch = e;
    }
    detail::persist(opt, res);
  }
  if (cfg.run.epochs < st.start_epoch && !opt.resume_last) {
    res.last = snapshot(0);
    res.last.history = detail::history_json(res.log, 0, st.best_score);
    res.best = res.last;
    detail::persist(opt, res);
  } else if (cfg.run.epochs < st.start_epoch) {
    res.last = *opt.resume_last;
  }
  res.exported = res.best;
  return res;
}

// ---------------------------------------------------------------------------
// Stage 2: audio crops against the aligned seconds of video context.
// ---------------------------------------------------------------------------

inline StageResult pretrain_multimodal(const Manifest& manifest, const MediaSource& media, const Checkpoint& audio_ckpt,
                                       const TrainConfig& cfg, const TrainOptions& opt = {}) {
  if (cfg.run.stage != Stage::multimodal_pretrain)
    fail(ErrorKind::config, "pretrain_multimodal needs a multimodal_pretrain run config");
  cfg.validate();
  detail::check_encoder_echo(audio_ckpt, cfg.encoder, "audio pre-training");

  const std::uint64_t seed = cfg.run.seed;
  const std::size_t seg = cfg.encoder.required_input_samples();
  const double seg_s = cfg.encoder.duration_s();
  const auto need_seconds = static_cast<Eigen::Index>(std::ceil(seg_s - 1e-9));
  const int sr = cfg.encoder.sample_rate_hz;

  StageResult res;
  struct Item {
    const TrackRecord* rec;
    SecondEmbeddingSeq video;
  };
  auto usable = [&](Split split, bool strict) {
    std::vector<Item> items;
    const auto recs = manifest.in_split(split);
    std::size_t skipped = 0;
    for (const auto* r : recs) {
      auto v = media.video(*r);
      std::string why;
      if (!r->video_path && !v) why = "has no video";
      else if (!v) why = "has no cached video features";
      else if (v->dim() != kContextDim) why = "has video features of dimension " + std::to_string(v->dim());
      else if (v->size() < need_seconds) why = "has " + std::to_string(v->size()) + " s of video features, needs " + std::to_string(need_seconds);
      if (!why.empty()) {
        ++skipped;
        detail::warn(res, opt, "skipping " + std::string(to_string(split)) + " track '" + r->track_id + "': " + why);
        continue;
      }
      v->track_id = r->track_id;
      items.push_back({r, std::move(*v)});
    }
    if (strict) {
      if (recs.empty()) fail(ErrorKind::data, "multimodal pre-training: the train split is empty");
      if (static_cast<double>(skipped) > cfg.max_skip_fraction * static_cast<double>(recs.size()))
        fail(ErrorKind::data, "multimodal pre-training: " + std::to_string(skipped) + " of " + std::to_string(recs.size()) +
                                  " train tracks lack usable video features (limit " +
                                  detail::format_real(cfg.max_skip_fraction * 100.0) + "%); run `embed-frames` first");
      if (items.empty()) fail(ErrorKind::data, "multimodal pre-training: no usable train tracks");
    }
    return items;
  };
  const auto train = usable(Split::train, true);
  const auto valid = usable(Split::valid, false);

  SampleCnn<float> enc(cfg.encoder, seed);
  nn::ParamList<float> enc_params = enc.parameters();
  restore(audio_ckpt, enc_params);
  enc.freeze_blocks(cfg.run.freeze_blocks_n);
  VideoEncoder<float> venc(cfg.video, seed);
  Projector<float> aproj("audio_projector", cfg.projector, seed);
  Projector<float> vproj("video_projector", cfg.projector, seed);
  nn::ParamList<float> aux_params;
  venc.collect(aux_params);
  aproj.collect(aux_params);
  vproj.collect(aux_params);
  nn::ParamList<float> params = enc_params;
  params.insert(params.end(), aux_params.begin(), aux_params.end());
  nn::Adam<float> adam(cfg.run.adam);
  const LossConfig loss_cfg{cfg.run.temperature};
  nlohmann::json echo = to_json(cfg);
  echo["source_stage"] = audio_ckpt.stage;

  detail::Recorder record{opt, res.log};
  std::vector<EpochRecord> prior;
  auto st = detail::resume_from(opt, Stage::multimodal_pretrain, prior);
  res.log.insert(res.log.begin(), prior.begin(), prior.end());
  if (opt.resume_last) {
    restore(*opt.resume_last, params);
    restore_optimizer(*opt.resume_last, adam);
  }

  auto snapshot = [&](int epoch) {
    Checkpoint ck;
    ck.stage = to_string(Stage::multimodal_pretrain);
    ck.epoch = static_cast<std::uint64_t>(epoch);
    ck.config = echo;
    capture(ck, enc_params);
    capture(ck, aux_params, /*discardable=*/true);
    capture_optimizer(ck, adam);
    ck.rng_state = detail::rng_state(seed, epoch + 1);
    return ck;
  };

  auto run_pass = [&](const std::vector<Item>& items, const std::vector<std::size_t>& order, int epoch, bool learn) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& batch : detail::batches_of(order, cfg.run.batch_size)) {
      std::vector<nn::Mat<float>> audio, video;
      std::vector<std::string> ids;
      for (std::size_t i : batch) {
        const Item& it = items[i];
        const AudioWaveform& w = media.audio(*it.rec);
        Rng rng = stream_for(seed, it.rec->track_id, learn ? static_cast<std::uint64_t>(epoch) : detail::kValidStream);
        // Latest start whose aligned seconds still fit the feature sequence.
        const auto last_sec = static_cast<std::size_t>(it.video.size() - need_seconds);
        const std::size_t by_video = (last_sec + 1) * static_cast<std::size_t>(sr) - 1;
        const std::size_t by_audio = w.size() > seg ? w.size() - seg : 0;
        const std::size_t hi = std::min(by_video, by_audio);
        const std::size_t off = static_cast<std::size_t>(rng() % (hi + 1));
        audio.push_back(detail::row_of(crop(w, off, seg)));
        video.push_back(align_video_segment(it.video, static_cast<double>(off) / sr, seg_s).vectors);
        ids.push_back(it.rec->track_id);
      }
      if (learn)
        for (auto* p : params) p->zero_grad();
      const nn::Mat<float> za = aproj.forward(enc.forward(audio, learn, learn), learn);
      const nn::Mat<float> zv = vproj.forward(venc.forward(video, learn), learn);
      const auto pair = build_multimodal_batch<float>(za, zv, ids, ids);
      const auto lg = nt_xent<float>(pair, loss_cfg, learn);
      if (learn) {
        enc.backward(aproj.backward(lg.d_left));
        venc.backward(vproj.backward(lg.d_right));
        adam.step(params);
      }
      total += lg.loss;
      ++n;
    }
    return total / static_cast<double>(n);
  };

  res.best = snapshot(st.start_epoch - 1);
  if (opt.resume_best) res.best = *opt.resume_best;
  res.best_epoch = st.best_epoch;
  for (int e = st.start_epoch; e <= cfg.run.epochs; ++e) {
    const double train_loss = detail::guard_numeric(opt, [&] { return snapshot(e - 1); },
                                                    [&] { return run_pass(train, detail::epoch_order(train.size(), seed, e), e, true); });
    record({to_string(Stage::multimodal_pretrain), e, "train", train_loss, {}});
    double score = -train_loss;
    if (!valid.empty()) {
      std::vector<std::size_t> order(valid.size());
      std::iota(order.begin(), order.end(), 0);
      const double vl = detail::guard_numeric(opt, [&] { return snapshot(e); }, [&] { return run_pass(valid, order, e, false); });
      record({to_string(Stage::multimodal_pretrain), e, "valid", vl, {}});
      score = -vl;
    }
    const bool improved = score > st.best_score;
    if (improved) {
      st.best_score = score;
      st.best_epoch = e;
    }
    res.last = snapshot(e);
    res.last.history = detail::history_json(res.log, st.best_epoch, st.best_score);
    if (improved) {
      res.best = res.last;
      res.best_epoch = e;
    }
    detail::persist(opt, res);
  }
  if (cfg.run.epochs < st.start_epoch) {
    res.last = opt.resume_last ? *opt.resume_last : snapshot(0);
    if (!opt.resume_last) res.best = res.last;
  }
  res.exported = res.best.export_only("encoder.");
  res.exported.history = nlohmann::json::array();
  if (opt.out_dir) save_checkpoint(*opt.out_dir / "encoder.ckpt", res.exported);
  return res;
}

// ---------------------------------------------------------------------------
// Stage 3: frozen backbone, 2-layer tagging head with per-tag BCE.
// ---------------------------------------------------------------------------

struct TaggingModel {
  SampleCnn<float> encoder;
  TagHead<float> head;
  std::vector<std::string> vocabulary;
  SampleCnnConfig encoder_config;

  std::size_t segment_samples() const { return encoder_config.required_input_samples(); }

  Eigen::MatrixXf predict(const std::vector<Eigen::MatrixXf>& windows) {
    return head.forward(encoder.forward(windows, false, false));
  }

  WindowPredictor predictor() {
    return [this](const std::vector<Eigen::MatrixXf>& w) { return predict(w); };
  }

  static std::unique_ptr<TaggingModel> from_checkpoint(const Checkpoint& ck) {
    if (ck.stage != to_string(Stage::finetune))
      fail(ErrorKind::missing_prerequisite, "checkpoint stage is '" + ck.stage + "', expected a fine-tuned model from `finetune`");
    auto m = std::make_unique<TaggingModel>();
    m->encoder_config = encoder_config_from_json(ck.config.at("encoder"));
    m->vocabulary = ck.config.at("vocabulary").get<std::vector<std::string>>();
    m->encoder = SampleCnn<float>(m->encoder_config, 0);
    m->head = TagHead<float>(TagHeadConfig{kEmbeddingDim, ck.config.at("head_hidden").get<int>(),
                                           static_cast<int>(m->vocabulary.size())},
                             0);
    restore(ck, m->encoder.parameters());
    nn::ParamList<float> hp;
    m->head.collect(hp);
    restore(ck, hp);
    m->encoder.freeze_blocks(m->encoder_config.n_blocks);
    return m;
  }
};

// Overlap inference over records; undecodable tracks are skipped with a warning.
inline PredictionMatrix predict_tracks(TaggingModel& model, const std::vector<const TrackRecord*>& records,
                                       const MediaSource& media, double overlap, std::vector<std::string>* warnings = nullptr,
                                       std::vector<const TrackRecord*>* kept = nullptr) {
  PredictionMatrix p;
  p.vocabulary = model.vocabulary;
  std::vector<Eigen::VectorXd> rows;
  auto pred = model.predictor();
  for (const auto* r : records) {
    try {
      rows.push_back(overlap_inference(media.audio(*r), pred, model.segment_samples(), overlap));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::decode && e.kind() != ErrorKind::data) throw;
      if (warnings) warnings->push_back("skipping track '" + r->track_id + "': " + e.what());
      continue;
    }
    p.track_ids.push_back(r->track_id);
    if (kept) kept->push_back(r);
  }
  p.scores.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(p.vocabulary.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) p.scores.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return p;
}

inline void check_vocabulary(const Manifest& manifest, const std::vector<std::string>& vocabulary) {
  if (vocabulary.empty()) fail(ErrorKind::config, "tag vocabulary is empty");
  std::set<std::string> vocab(vocabulary.begin(), vocabulary.end());
  if (vocab.size() != vocabulary.size()) fail(ErrorKind::config, "tag vocabulary has duplicates");
  std::set<std::string> unknown;
  for (const auto& r : manifest.records)
    if (r.tags)
      for (const auto& t : *r.tags)
        if (!vocab.count(t)) unknown.insert(t);
  if (!unknown.empty()) {
    std::string list;
    for (const auto& t : unknown) list += (list.empty() ? "" : ", ") + t;
    fail(ErrorKind::data, "labels outside the tag vocabulary: " + list);
  }
}

// Sorted union of all tags in the manifest.
inline std::vector<std::string> vocabulary_of(const Manifest& manifest) {
  std::set<std::string> s;
  for (const auto& r : manifest.records)
    if (r.tags) s.insert(r.tags->begin(), r.tags->end());
  return {s.begin(), s.end()};
}

// `backbone` may be null: the head then sits on a randomly initialised frozen encoder.
inline FinetuneResult finetune(const Manifest& manifest, const MediaSource& media, const Checkpoint* backbone,
                               const std::vector<std::string>& vocabulary, const TrainConfig& cfg,
                               const TrainOptions& opt = {}) {
  if (cfg.run.stage != Stage::finetune) fail(ErrorKind::config, "finetune needs a finetune run config");
  cfg.validate();
  check_vocabulary(manifest, vocabulary);
  if (backbone) {
    detail::check_encoder_echo(*backbone, cfg.encoder, "backbone");
    if (cfg.require_conditioned && backbone->stage != to_string(Stage::multimodal_pretrain))
      fail(ErrorKind::missing_prerequisite, "backbone is a '" + backbone->stage +
                                                "' checkpoint but conditioning is required; produce one with `pretrain-multimodal`");
  } else if (cfg.require_conditioned) {
    fail(ErrorKind::missing_prerequisite, "no backbone given but conditioning is required; run `pretrain-multimodal`");
  }
  const auto train = manifest.in_split(Split::train);
  if (train.empty()) fail(ErrorKind::data, "fine-tuning: the train split is empty");
  const auto valid = manifest.in_split(Split::valid);
  for (const auto& set : {train, valid})
    for (const auto* r : set)
      if (!r->tags) fail(ErrorKind::data, "track '" + r->track_id + "' has no tag labels");

  const std::uint64_t seed = cfg.run.seed;
  const std::size_t seg = cfg.encoder.required_input_samples();
  const auto n_tags = static_cast<int>(vocabulary.size());

  TaggingModel model;
  model.encoder_config = cfg.encoder;
  model.vocabulary = vocabulary;
  model.encoder = SampleCnn<float>(cfg.encoder, seed);
  nn::ParamList<float> enc_params = model.encoder.parameters();
  if (backbone) restore(*backbone, enc_params);
  model.encoder.freeze_blocks(cfg.encoder.n_blocks);
  model.head = TagHead<float>(TagHeadConfig{kEmbeddingDim, cfg.head_hidden, n_tags}, seed);
  nn::ParamList<float> head_params;
  model.head.collect(head_params);
  nn::Adam<float> adam(cfg.run.adam);

  nlohmann::json echo = to_json(cfg);
  echo["vocabulary"] = vocabulary;
  echo["source_stage"] = backbone ? backbone->stage : std::string("random_init");

  auto targets_for = [&](const TrackRecord& r) {
    Eigen::VectorXf y = Eigen::VectorXf::Zero(n_tags);
    for (int t = 0; t < n_tags; ++t) y(t) = r.tags->count(vocabulary[static_cast<std::size_t>(t)]) ? 1.0f : 0.0f;
    return y;
  };

  // Backbone is frozen, so validation window embeddings are computed once.
  std::vector<Eigen::MatrixXf> valid_emb;
  FinetuneResult res;
  std::vector<const TrackRecord*> valid_kept;
  for (const auto* r : valid) {
    try {
      const AudioWaveform& w = media.audio(*r);
      std::vector<Eigen::MatrixXf> windows;
      for (std::size_t off : chunk_sample_offsets(w.size(), seg, cfg.eval_overlap)) windows.push_back(detail::row_of(crop(w, off, seg)));
      Eigen::MatrixXf emb(kEmbeddingDim, static_cast<Eigen::Index>(windows.size()));
      for (std::size_t b = 0; b < windows.size(); b += 16) {
        std::vector<Eigen::MatrixXf> chunk(windows.begin() + static_cast<std::ptrdiff_t>(b),
                                           windows.begin() + static_cast<std::ptrdiff_t>(std::min(windows.size(), b + 16)));
        emb.middleCols(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(chunk.size())) =
            model.encoder.forward(chunk, false, false);
      }
      valid_emb.push_back(std::move(emb));
      valid_kept.push_back(r);
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::decode) throw;
      detail::warn(res, opt, "skipping valid track '" + r->track_id + "': " + e.what());
    }
  }
  const LabelMatrix valid_labels = labels_for(valid_kept, vocabulary);

  auto validate_head = [&](int epoch) {
    EpochRecord rec{to_string(Stage::finetune), epoch, "valid", 0.0, {}};
    PredictionMatrix p;
    p.vocabulary = vocabulary;
    p.scores.resize(static_cast<Eigen::Index>(valid_emb.size()), n_tags);
    double loss = 0.0;
    std::size_t windows = 0;
    for (std::size_t i = 0; i < valid_emb.size(); ++i) {
      const Eigen::MatrixXf s = model.head.forward(valid_emb[i]);
      p.scores.row(static_cast<Eigen::Index>(i)) = s.rowwise().mean().cast<double>().transpose();
      p.track_ids.push_back(valid_kept[i]->track_id);
      const Eigen::MatrixXf y = targets_for(*valid_kept[i]).replicate(1, s.cols());
      loss += static_cast<double>(model.head.loss(valid_emb[i], y)) * static_cast<double>(s.cols());
      windows += static_cast<std::size_t>(s.cols());
    }
    rec.loss = windows ? loss / static_cast<double>(windows) : 0.0;
    for (Metric m : {Metric::roc_auc, Metric::pr_auc}) {
      try {
        const auto mr = macro_average(m, p, valid_labels);
        rec.metrics[to_string(m)] = mr.value;
        rec.metrics[std::string(to_string(m)) + "_tags"] = static_cast<double>(mr.per_tag.size() - mr.skipped.size());
      } catch (const Error&) {
      }
    }
    return rec;
  };

  auto snapshot = [&](int epoch) {
    Checkpoint ck;
    ck.stage = to_string(Stage::finetune);
    ck.epoch = static_cast<std::uint64_t>(epoch);
    ck.config = echo;
    capture(ck, enc_params);
    capture(ck, head_params);
    capture_optimizer(ck, adam);
    ck.rng_state = detail::rng_state(seed, epoch + 1);
    return ck;
  };

  detail::Recorder record{opt, res.log};
  std::vector<EpochRecord> prior;
  auto st = detail::resume_from(opt, Stage::finetune, prior);
  res.log.insert(res.log.begin(), prior.begin(), prior.end());
  if (opt.resume_last) {
    restore(*opt.resume_last, head_params);
    restore_optimizer(*opt.resume_last, adam);
  }

  auto score_of = [&](const EpochRecord& r) {
    if (auto it = r.metrics.find("pr_auc"); it != r.metrics.end()) return it->second;
    return -r.loss;
  };

  if (!opt.resume_last) {
    res.last = snapshot(0);
    res.best = res.last;
    if (!valid_emb.empty()) {
      const EpochRecord r0 = validate_head(0);
      record(r0);
      res.best_metrics = r0.metrics;
      if (cfg.run.epochs == 0) st.best_score = score_of(r0);
    }
    res.last.history = detail::history_json(res.log, 0, st.best_score);
    res.best = res.last;
  } else {
    res.last = *opt.resume_last;
    res.best = opt.resume_best ? *opt.resume_best : *opt.resume_last;
    res.best_epoch = st.best_epoch;
    for (const auto& r : res.log)
      if (r.split == "valid" && r.epoch == st.best_epoch) res.best_metrics = r.metrics;
  }

  for (int e = st.start_epoch; e <= cfg.run.epochs; ++e) {
    double total = 0.0;
    std::size_t nb = 0;
    for (const auto& batch : detail::batches_of(detail::epoch_order(train.size(), seed, e), cfg.run.batch_size)) {
      std::vector<Eigen::MatrixXf> x;
      Eigen::MatrixXf y(n_tags, static_cast<Eigen::Index>(batch.size()));
      for (std::size_t i = 0; i < batch.size(); ++i) {
        const TrackRecord& r = *train[batch[i]];
        const AudioWaveform& w = media.audio(r);
        Rng rng = stream_for(seed, r.track_id, static_cast<std::uint64_t>(e));
        x.push_back(detail::row_of(crop(w, random_crop_offset(w.size(), seg, rng), seg)));
        y.col(static_cast<Eigen::Index>(i)) = targets_for(r);
      }
      const Eigen::MatrixXf emb = model.encoder.forward(x, false, false);
      for (auto* p : head_params) p->zero_grad();
      const double l = model.head.train_step_loss(emb, y);
      if (!std::isfinite(l)) {
        if (opt.out_dir) save_checkpoint(*opt.out_dir / "diagnostic.ckpt", snapshot(e - 1));
        fail(ErrorKind::numeric, "fine-tuning loss became non-finite at epoch " + std::to_string(e));
      }
      adam.step(head_params);
      total += l;
      ++nb;
    }
    record({to_string(Stage::finetune), e, "train", total / static_cast<double>(nb), {}});
    double score = -total / static_cast<double>(nb);
    EpochRecord vr;
    if (!valid_emb.empty()) {
      vr = validate_head(e);
      record(vr);
      score = score_of(vr);
    } else {
      score = static_cast<double>(e);  // no validation data: keep the latest epoch
    }
    const bool improved = score > st.best_score;
    if (improved) {
      st.best_score = score;
      st.best_epoch = e;
    }
    res.last = snapshot(e);
    res.last.history = detail::history_json(res.log, st.best_epoch, st.best_score);
    if (improved) {
      res.best = res.last;
      res.best_epoch = e;
      res.best_metrics = vr.metrics;
    }
    detail::persist(opt, res);
  }
  if (opt.out_dir && cfg.run.epochs == 0) detail::persist(opt, res);
  res.exported = res.best;
  res.vocabulary = vocabulary;
  return res;
}

}  // namespace avcon
