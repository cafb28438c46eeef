#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "avcon/checkpoint.hpp"
#include "avcon/config.hpp"
#include "avcon/corpus.hpp"
#include "avcon/eval.hpp"
#include "avcon/features.hpp"
#include "avcon/synth.hpp"
#include "avcon/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace avcon::cli {

struct Globals {
  std::optional<std::string> config_file;
  std::optional<std::int64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> name;
  std::optional<double> temperature;
  std::vector<std::string> sets;
  bool aug_off = false;
  bool force = false;
  bool quiet = false;
};

fs::path cache_root() {
  if (const char* env = std::getenv("AVCON_CACHE_DIR"); env && *env) return env;
  return ".avcon";
}

fs::path runs_root() { return cache_root() / "runs"; }

fs::path data_dir() {
  if (const char* env = std::getenv("AVCON_DATA_DIR"); env && *env) return env;
  return AVCON_DATA_DIR;
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

AppConfig resolve(const Globals& g) {
  std::vector<std::pair<std::string, std::string>> flags;
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(ErrorKind::config, "--set expects key=value, got '" + s + "'");
    flags.emplace_back(detail::trim(s.substr(0, eq)), s.substr(eq + 1));
  }
  if (g.seed) flags.emplace_back("seed", std::to_string(*g.seed));
  if (g.temperature) flags.emplace_back("train.temperature", detail::format_real(*g.temperature));
  if (g.aug_off) flags.emplace_back("augment.enabled", "false");
  return resolve_config(g.config_file ? std::optional<fs::path>(*g.config_file) : std::nullopt, flags);
}

// A run directory plus its metadata file. Directories are addressed by
// (command, resolved config, seed, inputs) unless --out-dir names one.
class Run {
 public:
  Run(const std::string& command, const Globals& g, const AppConfig& cfg, json inputs, bool resume = false)
      : command_(command), cfg_(cfg), quiet_(g.quiet) {
    inputs_ = std::move(inputs);
    const std::string key = command + "\n" + hex16(cfg.value_hash()) + "\n" + std::to_string(cfg.get_int("seed")) + "\n" + inputs_.dump();
    id_ = command + "-" + hex16(hash_string(key));
    dir_ = g.out_dir ? fs::path(*g.out_dir) : runs_root() / id_;
    if (fs::exists(dir_) && !fs::is_empty(dir_) && !resume) {
      if (!g.force)
        fail(ErrorKind::config, "run directory " + dir_.string() + " already exists; pass --force to overwrite or --resume to continue");
      if (!fs::exists(dir_ / "run.json"))
        fail(ErrorKind::config, dir_.string() + " is not a run directory; refusing to overwrite it");
      fs::remove_all(dir_);
    }
    fs::create_directories(dir_);
    if (g.name) {
      const fs::path link = runs_root() / *g.name;
      fs::create_directories(runs_root());
      std::error_code ec;
      if (fs::is_symlink(link)) fs::remove(link, ec);
      if (fs::exists(link)) fail(ErrorKind::config, "alias " + link.string() + " exists and is not a symlink");
      fs::create_directory_symlink(fs::absolute(dir_), link);
    }
    meta_ = {{"command", command},          {"run_id", id_},
             {"seed", cfg.get_int("seed")}, {"config_hash", hex16(cfg.value_hash())},
             {"inputs", inputs_},           {"artifacts", json::object()},
             {"started_at", now_utc()},     {"status", "running"}};
    if (resume && fs::exists(dir_ / "run.json")) {
      std::ifstream is(dir_ / "run.json");
      meta_["previous"] = json::parse(is, nullptr, false);
    }
    {
      std::ofstream os(dir_ / "config.cfg");
      os << cfg.echo();
    }
    flush();
    log("run directory: " + dir_.string());
  }

  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;
  ~Run() {
    if (!finished()) finish("failed");
  }

  const fs::path& dir() const { return dir_; }
  void artifact(const std::string& key, const fs::path& p) {
    meta_["artifacts"][key] = fs::relative(p, dir_).string();
    flush();
  }
  void note(const std::string& key, json v) { meta_[key] = std::move(v); }
  void warn(const std::string& w) {
    meta_["warnings"].push_back(w);
    std::cerr << "warning: " << w << "\n";
  }
  void log(const std::string& s) const {
    if (!quiet_) std::cerr << s << "\n";
  }
  void finish(const std::string& status, const std::string& error = {}) {
    meta_["status"] = status;
    meta_["finished_at"] = now_utc();
    if (!error.empty()) meta_["error"] = error;
    flush();
  }
  bool finished() const { return meta_["status"] != "running"; }

 private:
  void flush() const {
    std::ofstream os(dir_ / "run.json");
    os << meta_.dump(2) << "\n";
  }

  std::string command_, id_;
  AppConfig cfg_;
  json inputs_, meta_;
  fs::path dir_;
  bool quiet_;
};

// Accepts a file, a run directory, or an alias under the runs root.
fs::path resolve_artifact(const std::string& arg, const std::string& file, const std::string& producer) {
  fs::path p(arg);
  if (!fs::exists(p) && fs::exists(runs_root() / arg)) p = runs_root() / arg;
  if (fs::is_directory(p)) p /= file;
  if (!fs::exists(p))
    fail(ErrorKind::missing_prerequisite, "cannot find " + p.string() + "; produce it with `avcon " + producer + "`");
  return p;
}

std::string absolute(const std::string& p) { return fs::weakly_canonical(fs::absolute(fs::path(p))).string(); }

std::string canonical_input(const std::string& arg, const std::string& file, const std::string& producer) {
  return fs::canonical(resolve_artifact(arg, file, producer)).string();
}

Manifest load_inputs(const std::string& manifest_arg) {
  return load_manifest(resolve_artifact(manifest_arg, "manifest.jsonl", "curate"));
}

// Audio paths resolve against the directory of the original corpus manifest.
fs::path base_for(const std::string& manifest_arg, const std::optional<std::string>& base) {
  if (base) return *base;
  const fs::path m = resolve_artifact(manifest_arg, "manifest.jsonl", "curate");
  fs::path dir = m.parent_path();
  if (fs::exists(dir / "run.json")) {
    std::ifstream is(dir / "run.json");
    const json meta = json::parse(is, nullptr, false);
    if (meta.is_object() && meta.contains("base_dir")) return meta["base_dir"].get<std::string>();
  }
  return dir;
}

TrainOptions options_for(Run& run, const std::string& stage, bool resume, Checkpoint* last, Checkpoint* best) {
  TrainOptions opt;
  opt.out_dir = run.dir();
  if (resume) {
    if (!fs::exists(run.dir() / "last.ckpt"))
      fail(ErrorKind::missing_prerequisite, "nothing to resume in " + run.dir().string() + "; start the run without --resume");
    *last = load_checkpoint(run.dir() / "last.ckpt");
    *best = load_checkpoint(run.dir() / "best.ckpt");
    opt.resume_last = last;
    opt.resume_best = best;
  }
  opt.on_record = [&run, stage](const EpochRecord& r) {
    std::ostringstream os;
    os << stage << " epoch " << r.epoch << " " << r.split << " loss " << std::setprecision(6) << r.loss;
    for (const auto& [k, v] : r.metrics) os << " " << k << " " << v;
    run.log(os.str());
  };
  return opt;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream os(p);
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "separable";
  int tracks = 64, valid = 8, test = 8;
  double duration = 3.0;
};

void cmd_synth(const Globals& g, const SynthArgs& a) {
  const AppConfig cfg = resolve(g);
  Run run("synth", g, cfg, {{"kind", a.kind}, {"tracks", a.tracks}, {"valid", a.valid}, {"test", a.test}, {"duration", a.duration}});
  SynthConfig s = a.kind == "conditioning" ? SynthConfig::conditioning(static_cast<std::uint64_t>(cfg.get_int("seed"))) : SynthConfig{};
  if (a.kind != "separable" && a.kind != "conditioning") fail(ErrorKind::config, "--kind must be separable or conditioning");
  s.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  s.n_tracks = a.tracks;
  s.n_valid = a.valid;
  s.n_test = a.test;
  s.duration_s = a.duration;
  const SyntheticCorpus c = make_synthetic_corpus(s);
  write_synthetic_corpus(run.dir(), c, cfg.get_real("features.fps"));
  run.artifact("manifest", run.dir() / "manifest.jsonl");
  run.finish("ok");
  std::cout << (run.dir() / "manifest.jsonl").string() << "\n";
}

struct CurateArgs {
  std::string manifest;
  std::optional<std::string> base, scenes;
};

void cmd_curate(const Globals& g, const CurateArgs& a) {
  const AppConfig cfg = resolve(g);
  Run run("curate", g, cfg, {{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}, {"scenes", a.scenes ? absolute(*a.scenes) : ""}});
  const Manifest m = load_manifest(a.manifest);
  const fs::path base = a.base ? fs::path(*a.base) : fs::path(a.manifest).parent_path();
  std::map<std::string, SceneList> scenes;
  if (a.scenes) {
    scenes = load_scene_dir(*a.scenes, m);
  } else {
    const double fps = cfg.get_real("features.fps"), thr = cfg.get_real("corpus.cut_threshold");
    for (const auto& r : m.records) {
      if (!r.video_path) continue;
      try {
        fs::path dir(*r.video_path);
        if (dir.is_relative()) dir = base / dir;
        std::vector<double> intensity;
        for (const auto& f : load_frames(dir)) intensity.push_back(f.mean_intensity());
        if (intensity.empty()) fail(ErrorKind::decode, dir.string() + ": no frames");
        scenes[r.track_id] = detect_scenes(intensity, fps, thr);
        save_scenes(scene_sidecar_path(run.dir() / "scenes", r.track_id), scenes[r.track_id]);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::decode && e.kind() != ErrorKind::data) throw;
        run.warn(std::string("no scenes for '") + r.track_id + "': " + e.what());
      }
    }
  }
  const FilterResult f = filter_by_scene_length(m, scenes, cfg.get_real("corpus.max_scene_s"));
  for (const auto& w : f.warnings) run.warn(w);
  Manifest out = f.manifest;
  // Audio-only records (labels for fine-tuning) pass through untouched.
  for (const auto& r : m.records)
    if (!r.video_path) out.records.push_back(r);
  save_manifest(run.dir() / "manifest.jsonl", out);
  run.note("base_dir", fs::absolute(base).string());
  run.note("kept", out.records.size());
  run.note("dropped", m.records.size() - out.records.size());
  run.artifact("manifest", run.dir() / "manifest.jsonl");
  run.finish("ok");
  std::cout << "kept " << out.records.size() << " of " << m.records.size() << " records\n";
}

struct EmbedArgs {
  std::string manifest;
  std::optional<std::string> base;
};

void cmd_embed(const Globals& g, const EmbedArgs& a) {
  const AppConfig cfg = resolve(g);
  Run run("embed-frames", g, cfg, {{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}});
  const Manifest m = load_inputs(a.manifest);
  const fs::path base = base_for(a.manifest, a.base);
  const std::string kind = cfg.get_text("features.embedder");
  if (kind != "stub" && kind != "external") fail(ErrorKind::config, "config key 'features.embedder' must be stub or external");
  const RandomProjectionEmbedder stub(static_cast<std::uint64_t>(cfg.get_int("features.embedder_seed")));
  const fs::path features = run.dir() / "features";
  std::size_t done = 0;
  for (const auto& r : m.records) {
    if (!r.video_path) continue;
    try {
      fs::path dir(*r.video_path);
      if (dir.is_relative()) dir = base / dir;
      const auto frames = load_frames(dir);
      FrameEmbeddingSeq seq;
      if (kind == "stub") {
        seq = embed_frames(frames, stub, cfg.get_real("features.fps"));
      } else {
        if (cfg.get_text("features.table").empty()) fail(ErrorKind::config, "config key 'features.table' is required by the external embedder");
        const auto table = ExternalTableEmbedder::load(fs::path(cfg.get_text("features.table")) / (r.track_id + ".avft"));
        seq = embed_frames(frames, table, cfg.get_real("features.fps"));
      }
      save_second_embeddings(feature_cache_path(features, r.track_id), average_per_second(seq, r.track_id));
      ++done;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::decode && e.kind() != ErrorKind::data && e.kind() != ErrorKind::out_of_range) throw;
      run.warn(std::string("skipping '") + r.track_id + "': " + e.what());
    }
  }
  run.note("base_dir", fs::absolute(base).string());
  run.note("embedded", done);
  run.artifact("features", features);
  run.finish("ok");
  std::cout << "embedded " << done << " tracks into " << features.string() << "\n";
}

struct StageArgs {
  std::string manifest;
  std::optional<std::string> base, features, backbone;
  bool resume = false;
  bool no_backbone = false;
};

fs::path feature_dir_of(const std::optional<std::string>& arg) {
  if (!arg) return {};
  fs::path p(*arg);
  if (!fs::exists(p) && fs::exists(runs_root() / *arg)) p = runs_root() / *arg;
  if (fs::exists(p / "features")) p /= "features";
  if (!fs::is_directory(p)) fail(ErrorKind::missing_prerequisite, "no feature directory at " + p.string() + "; run `avcon embed-frames`");
  return p;
}

void save_stage(Run& run, const StageResult& r, const std::string& export_name) {
  save_checkpoint(run.dir() / export_name, r.exported);
  run.artifact("last", run.dir() / "last.ckpt");
  run.artifact("best", run.dir() / "best.ckpt");
  run.artifact("metrics", run.dir() / "metrics.jsonl");
  run.artifact("exported", run.dir() / export_name);
  run.note("best_epoch", r.best_epoch);
  for (const auto& w : r.warnings) run.warn(w);
}

void cmd_pretrain_audio(const Globals& g, const StageArgs& a) {
  const AppConfig cfg = resolve(g);
  const TrainConfig tc = train_config_for(Stage::audio_pretrain, cfg);
  Run run("pretrain-audio", g, cfg, {{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}}, a.resume);
  const Manifest m = load_inputs(a.manifest);
  FileMediaSource media(base_for(a.manifest, a.base), {});
  Checkpoint last, best;
  const StageResult r = pretrain_audio(m, media, tc, options_for(run, "audio", a.resume, &last, &best));
  save_stage(run, r, "encoder.ckpt");
  run.finish("ok");
  std::cout << (run.dir() / "encoder.ckpt").string() << "\n";
}

void cmd_pretrain_multimodal(const Globals& g, const StageArgs& a) {
  const AppConfig cfg = resolve(g);
  const TrainConfig tc = train_config_for(Stage::multimodal_pretrain, cfg);
  if (!a.backbone) fail(ErrorKind::missing_prerequisite, "multimodal pre-training needs --audio-ckpt from `avcon pretrain-audio`");
  const fs::path audio_ckpt = resolve_artifact(*a.backbone, "encoder.ckpt", "pretrain-audio");
  const Checkpoint audio = load_checkpoint(audio_ckpt);
  if (audio.stage != to_string(Stage::audio_pretrain))
    fail(ErrorKind::missing_prerequisite, audio_ckpt.string() + " is a '" + audio.stage + "' checkpoint; produce one with `avcon pretrain-audio`");
  const fs::path features = feature_dir_of(a.features);
  if (features.empty()) fail(ErrorKind::missing_prerequisite, "multimodal pre-training needs --features from `avcon embed-frames`");
  Run run("pretrain-multimodal", g, cfg,
          {{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}, {"audio_ckpt", fs::canonical(audio_ckpt).string()}, {"features", fs::canonical(features).string()}},
          a.resume);
  const Manifest m = load_inputs(a.manifest);
  FileMediaSource media(base_for(a.manifest, a.base), features);
  Checkpoint last, best;
  const StageResult r = pretrain_multimodal(m, media, audio, tc, options_for(run, "multimodal", a.resume, &last, &best));
  save_stage(run, r, "encoder.ckpt");
  run.finish("ok");
  std::cout << (run.dir() / "encoder.ckpt").string() << "\n";
}

void cmd_finetune(const Globals& g, const StageArgs& a) {
  const AppConfig cfg = resolve(g);
  const TrainConfig tc = train_config_for(Stage::finetune, cfg);
  std::optional<Checkpoint> backbone;
  json inputs{{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}};
  if (a.backbone) {
    const fs::path p = resolve_artifact(*a.backbone, "encoder.ckpt", "pretrain-audio");
    backbone = load_checkpoint(p);
    inputs["backbone"] = fs::canonical(p).string();
  } else if (!a.no_backbone) {
    fail(ErrorKind::missing_prerequisite,
         "finetune needs --backbone from `avcon pretrain-audio` or `avcon pretrain-multimodal` (or --no-backbone)");
  }
  Run run("finetune", g, cfg, inputs, a.resume);
  const Manifest m = load_inputs(a.manifest);
  FileMediaSource media(base_for(a.manifest, a.base), {});
  Checkpoint last, best;
  const FinetuneResult r = finetune(m, media, backbone ? &*backbone : nullptr, vocabulary_of(m), tc,
                                    options_for(run, "finetune", a.resume, &last, &best));
  save_stage(run, r, "model.ckpt");
  run.note("vocabulary", r.vocabulary);
  run.finish("ok");
  std::cout << (run.dir() / "model.ckpt").string() << "\n";
}

TagGroupMap group_map(const AppConfig& cfg, const std::optional<std::string>& arg) {
  if (arg) return TagGroupMap::load(*arg);
  if (!cfg.get_text("eval.group_map").empty()) return TagGroupMap::load(cfg.get_text("eval.group_map"));
  return TagGroupMap::load(data_dir() / "mtat_tag_groups.tsv");
}

void print_groups(const GroupReport& rep, const std::string& metric) {
  std::cout << "group        n_tags  " << metric << "\n";
  for (const auto& r : rep.rows)
    std::cout << std::left << std::setw(13) << r.group << std::setw(8) << r.count
              << (r.mean ? detail::format_real(std::round(*r.mean * 10000) / 10000) : "-") << "\n";
}

struct EvalArgs {
  std::string model, manifest;
  std::optional<std::string> base, groups;
  std::string split = "test";
};

void cmd_evaluate(const Globals& g, const EvalArgs& a) {
  const AppConfig cfg = resolve(g);
  const fs::path model_path = resolve_artifact(a.model, "model.ckpt", "finetune");
  Run run("evaluate", g, cfg, {{"model", fs::canonical(model_path).string()}, {"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}, {"split", a.split}});
  const Manifest m = load_inputs(a.manifest);
  FileMediaSource media(base_for(a.manifest, a.base), {});
  const EvalReport rep = evaluate_model(load_checkpoint(model_path), m, parse_split(a.split), media, cfg.get_real("eval.overlap"));
  for (const auto& w : rep.warnings) run.warn(w);
  write_json(run.dir() / "metrics.json", rep.to_json());
  write_per_tag_csv(run.dir() / "per_tag.csv", rep);
  run.artifact("metrics", run.dir() / "metrics.json");
  run.artifact("per_tag", run.dir() / "per_tag.csv");
  try {
    const GroupReport groups = tag_group_report(rep.roc_per_tag, group_map(cfg, a.groups));
    write_group_csv(run.dir() / "groups_roc_auc.csv", groups);
    write_group_csv(run.dir() / "groups_pr_auc.csv", tag_group_report(rep.pr_per_tag, group_map(cfg, a.groups)));
    run.artifact("groups_roc_auc", run.dir() / "groups_roc_auc.csv");
    run.artifact("groups_pr_auc", run.dir() / "groups_pr_auc.csv");
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::data) throw;
    run.warn(std::string("no group report: ") + e.what());
  }
  run.finish("ok");
  std::cout << "tracks " << rep.n_tracks << "  tags " << rep.roc_per_tag.size() << "  ROC-AUC " << rep.roc_auc << "  PR-AUC "
            << rep.pr_auc << "\n";
  if (!rep.skipped_tags.empty()) std::cout << "skipped single-class tags: " << rep.skipped_tags.size() << "\n";
}

struct ReportArgs {
  std::string per_tag;
  std::optional<std::string> groups;
  std::string metric = "roc_auc";
};

void cmd_report_groups(const Globals& g, const ReportArgs& a) {
  const AppConfig cfg = resolve(g);
  if (a.metric != "roc_auc" && a.metric != "pr_auc") fail(ErrorKind::config, "--metric must be roc_auc or pr_auc");
  const fs::path per_tag = resolve_artifact(a.per_tag, "per_tag.csv", "evaluate");
  const TagGroupMap map = group_map(cfg, a.groups);
  Run run("report-groups", g, cfg, {{"per_tag", fs::canonical(per_tag).string()}, {"metric", a.metric}, {"groups", a.groups ? absolute(*a.groups) : ""}});
  const GroupReport rep = tag_group_report(read_per_tag_csv(per_tag, a.metric == "roc_auc" ? Metric::roc_auc : Metric::pr_auc), map);
  write_group_csv(run.dir() / "groups.csv", rep);
  run.artifact("groups", run.dir() / "groups.csv");
  run.finish("ok");
  print_groups(rep, a.metric);
}

struct AblateArgs {
  std::string manifest;
  std::optional<std::string> base, features;
  std::vector<std::string> backbones;
  bool reference = false;
};

void print_rows(const std::vector<AblationRow>& rows) {
  std::cout << ablation_csv(rows);
}

void cmd_ablate_resolution(const Globals& g, const AblateArgs& a) {
  const AppConfig cfg = resolve(g);
  const fs::path features = feature_dir_of(a.features);
  if (features.empty()) fail(ErrorKind::missing_prerequisite, "the resolution ablation needs --features from `avcon embed-frames`");
  std::vector<int> grid;
  for (auto k : cfg.get_int_list("eval.k_grid")) grid.push_back(static_cast<int>(k));
  Run run("ablate-resolution", g, cfg, {{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}, {"features", fs::canonical(features).string()}});
  const Manifest m = load_inputs(a.manifest);
  FileMediaSource media(base_for(a.manifest, a.base), features);
  const AblationResult r =
      run_resolution_ablation(m, media, PipelineSettings::from(cfg), grid, vocabulary_of(m), run.dir(), g.quiet ? nullptr : &std::cerr);
  for (const auto& w : r.warnings) run.warn(w);
  run.artifact("table", run.dir() / "resolution.csv");
  run.artifact("plot_roc_auc", run.dir() / "resolution_roc_auc.svg");
  run.artifact("plot_pr_auc", run.dir() / "resolution_pr_auc.svg");
  run.finish("ok");
  print_rows(r.rows);
}

void cmd_ablate_scarcity(const Globals& g, const AblateArgs& a) {
  const AppConfig cfg = resolve(g);
  if (a.backbones.empty())
    fail(ErrorKind::missing_prerequisite, "give at least one --backbone name=checkpoint (from `avcon pretrain-audio` or `pretrain-multimodal`)");
  std::vector<std::pair<std::string, Checkpoint>> backbones;
  json inputs{{"manifest", canonical_input(a.manifest, "manifest.jsonl", "curate")}, {"reference", a.reference}};
  for (const auto& b : a.backbones) {
    const auto eq = b.find('=');
    const std::string name = eq == std::string::npos ? fs::path(b).filename().string() : b.substr(0, eq);
    const fs::path p = resolve_artifact(eq == std::string::npos ? b : b.substr(eq + 1), "encoder.ckpt", "pretrain-audio");
    backbones.emplace_back(name, load_checkpoint(p));
    inputs["backbones"][name] = fs::canonical(p).string();
  }
  Run run("ablate-scarcity", g, cfg, inputs);
  const Manifest m = load_inputs(a.manifest);
  FileMediaSource media(base_for(a.manifest, a.base), {});
  const AblationResult r = run_scarcity_ablation(m, media, backbones, train_config_for(Stage::finetune, cfg), vocabulary_of(m),
                                                 cfg.get_real_list("eval.fractions"), a.reference, run.dir(),
                                                 g.quiet ? nullptr : &std::cerr);
  for (const auto& w : r.warnings) run.warn(w);
  run.artifact("table", run.dir() / "scarcity.csv");
  run.artifact("plot_roc_auc", run.dir() / "scarcity_roc_auc.svg");
  run.artifact("plot_pr_auc", run.dir() / "scarcity_pr_auc.svg");
  run.finish("ok");
  print_rows(r.rows);
}

void cmd_inspect(const std::string& arg) {
  const fs::path p = fs::exists(arg) && !fs::is_directory(arg) ? fs::path(arg) : resolve_artifact(arg, "best.ckpt", "pretrain-audio");
  const Checkpoint ck = load_checkpoint(p);
  std::size_t n_params = 0;
  json tensors = json::array();
  for (const auto& t : ck.tensors) {
    n_params += t.data.size();
    tensors.push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}, {"discardable", t.discardable}, {"hash", hex16(tensor_hash(t))}});
  }
  json out{{"path", p.string()},
           {"stage", ck.stage},
           {"epoch", ck.epoch},
           {"n_tensors", ck.tensors.size()},
           {"n_values", n_params},
           {"optimizer_steps", ck.optimizer_steps},
           {"config", ck.config},
           {"tensors", tensors}};
  if (ck.history.is_object()) out["best_epoch"] = ck.history.value("best_epoch", 0);
  std::cout << out.dump(2) << "\n";
}

int main(int argc, char** argv) {
  CLI::App app{"avcon: contrastive audio pre-training with video conditioning for music tagging"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_file, "config file (key = value lines)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "master seed (config key 'seed')");
  app.add_option("--out-dir", g.out_dir, "run directory (default: content-addressed under $AVCON_CACHE_DIR/runs)");
  app.add_option("--name", g.name, "alias for the run directory under $AVCON_CACHE_DIR/runs");
  app.add_option("--set", g.sets, "override a config key: --set key=value (repeatable)");
  app.add_option("--temperature", g.temperature, "NT-Xent temperature (config key 'train.temperature')");
  app.add_flag("--aug-off", g.aug_off, "disable the augmentation chain");
  app.add_flag("--force", g.force, "overwrite an existing run directory");
  app.add_flag("-q,--quiet", g.quiet, "suppress progress output");

  SynthArgs syn;
  auto* s_syn = app.add_subcommand("synth", "write a synthetic audio/video corpus");
  s_syn->add_option("--kind", syn.kind, "separable | conditioning");
  s_syn->add_option("--tracks", syn.tracks, "train tracks");
  s_syn->add_option("--valid", syn.valid, "validation tracks");
  s_syn->add_option("--test", syn.test, "test tracks");
  s_syn->add_option("--duration", syn.duration, "seconds per track");

  CurateArgs cur;
  auto* s_cur = app.add_subcommand("curate", "drop videos containing a scene longer than corpus.max_scene_s");
  s_cur->add_option("--manifest", cur.manifest, "input manifest.jsonl")->required()->check(CLI::ExistingFile);
  s_cur->add_option("--base", cur.base, "directory that media paths are relative to (default: manifest directory)");
  s_cur->add_option("--scenes", cur.scenes, "directory of precomputed <track_id>.scenes files");

  EmbedArgs emb;
  auto* s_emb = app.add_subcommand("embed-frames", "embed video frames and average them per second");
  s_emb->add_option("--manifest", emb.manifest, "manifest file or curate run")->required();
  s_emb->add_option("--base", emb.base, "media base directory");

  StageArgs s1, s2, s3;
  auto* s_pa = app.add_subcommand("pretrain-audio", "stage 1: contrastive audio pre-training");
  s_pa->add_option("--manifest", s1.manifest, "manifest file or curate run")->required();
  s_pa->add_option("--base", s1.base, "media base directory");
  s_pa->add_flag("--resume", s1.resume, "continue from last.ckpt in the run directory");

  auto* s_pm = app.add_subcommand("pretrain-multimodal", "stage 2: audio-video contrastive conditioning");
  s_pm->add_option("--manifest", s2.manifest, "manifest file or curate run")->required();
  s_pm->add_option("--base", s2.base, "media base directory");
  s_pm->add_option("--audio-ckpt", s2.backbone, "stage-1 checkpoint or run");
  s_pm->add_option("--features", s2.features, "embed-frames run or feature directory");
  s_pm->add_flag("--resume", s2.resume, "continue from last.ckpt in the run directory");

  auto* s_ft = app.add_subcommand("finetune", "stage 3: train a tagging head on a frozen backbone");
  s_ft->add_option("--manifest", s3.manifest, "labelled manifest file")->required();
  s_ft->add_option("--base", s3.base, "media base directory");
  s_ft->add_option("--backbone", s3.backbone, "encoder checkpoint or pre-training run");
  s_ft->add_flag("--no-backbone", s3.no_backbone, "use a randomly initialised frozen encoder");
  s_ft->add_flag("--resume", s3.resume, "continue from last.ckpt in the run directory");

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("evaluate", "macro ROC-AUC / PR-AUC with overlapping-window inference");
  s_ev->add_option("--model", ev.model, "fine-tuned checkpoint or finetune run")->required();
  s_ev->add_option("--manifest", ev.manifest, "labelled manifest file")->required();
  s_ev->add_option("--base", ev.base, "media base directory");
  s_ev->add_option("--split", ev.split, "train | valid | test");
  s_ev->add_option("--groups", ev.groups, "tag group table (default: bundled MTAT mapping)");

  AblateArgs ar, as;
  auto* s_ar = app.add_subcommand("ablate-resolution", "train and evaluate both variants per eval.k_grid entry");
  s_ar->add_option("--manifest", ar.manifest, "labelled manifest file")->required();
  s_ar->add_option("--base", ar.base, "media base directory");
  s_ar->add_option("--features", ar.features, "embed-frames run or feature directory");

  auto* s_as = app.add_subcommand("ablate-scarcity", "fine-tune on eval.fractions of the training split");
  s_as->add_option("--manifest", as.manifest, "labelled manifest file")->required();
  s_as->add_option("--base", as.base, "media base directory");
  s_as->add_option("--backbone", as.backbones, "name=checkpoint (repeatable)");
  s_as->add_flag("--reference", as.reference, "also run the full training split");

  ReportArgs rg;
  auto* s_rg = app.add_subcommand("report-groups", "average per-tag metrics by tag group");
  s_rg->add_option("--per-tag", rg.per_tag, "per_tag.csv or evaluate run")->required();
  s_rg->add_option("--groups", rg.groups, "tag group table (default: bundled MTAT mapping)");
  s_rg->add_option("--metric", rg.metric, "roc_auc | pr_auc");

  std::string inspect_arg;
  auto* s_in = app.add_subcommand("inspect-model", "print a checkpoint summary as JSON");
  s_in->add_option("checkpoint", inspect_arg, "checkpoint file or run")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code_for(ErrorKind::config);
  }

  try {
    if (*s_syn) cmd_synth(g, syn);
    if (*s_cur) cmd_curate(g, cur);
    if (*s_emb) cmd_embed(g, emb);
    if (*s_pa) cmd_pretrain_audio(g, s1);
    if (*s_pm) cmd_pretrain_multimodal(g, s2);
    if (*s_ft) cmd_finetune(g, s3);
    if (*s_ev) cmd_evaluate(g, ev);
    if (*s_ar) cmd_ablate_resolution(g, ar);
    if (*s_as) cmd_ablate_scarcity(g, as);
    if (*s_rg) cmd_report_groups(g, rg);
    if (*s_in) cmd_inspect(inspect_arg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace avcon::cli

int main(int argc, char** argv) { return avcon::cli::main(argc, argv); }
