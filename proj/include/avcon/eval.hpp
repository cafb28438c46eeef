#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "avcon/checkpoint.hpp"
#include "avcon/corpus.hpp"
#include "avcon/metrics.hpp"
#include "avcon/train.hpp"

#ifndef AVCON_DATA_DIR
#define AVCON_DATA_DIR "data"
#endif

namespace avcon {

// ---------------------------------------------------------------------------
// Tag groups
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& tag_groups() {
  static const std::vector<std::string> g{"Genre", "Mood", "Instruments", "Vocals"};
  return g;
}

struct TagGroupMap {
  std::map<std::string, std::string> group_of;

  // "tag<TAB>group" per line; '#' lines are comments.
  static TagGroupMap parse(const std::string& text, const std::string& origin = "<groups>") {
    TagGroupMap m;
    std::istringstream is(text);
    std::string line;
    int n = 0;
    while (std::getline(is, line)) {
      ++n;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) fail(ErrorKind::data, origin + ":" + std::to_string(n) + ": expected 'tag<TAB>group'");
      const std::string tag = line.substr(0, tab), group = line.substr(tab + 1);
      if (std::find(tag_groups().begin(), tag_groups().end(), group) == tag_groups().end())
        fail(ErrorKind::data, origin + ":" + std::to_string(n) + ": unknown group '" + group + "'");
      if (!m.group_of.emplace(tag, group).second) fail(ErrorKind::data, origin + ": tag '" + tag + "' mapped twice");
    }
    return m;
  }

  static TagGroupMap load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::data, "cannot read tag group map " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
  }

  static std::filesystem::path default_path() { return std::filesystem::path(AVCON_DATA_DIR) / "mtat_tag_groups.tsv"; }
};

struct GroupReport {
  struct Row {
    std::string group;
    std::size_t count = 0;
    std::optional<double> mean;  // empty when no evaluated tag falls in the group
  };
  std::vector<Row> rows;  // fixed group order

  const Row& at(const std::string& group) const {
    for (const auto& r : rows)
      if (r.group == group) return r;
    fail(ErrorKind::invalid_input, "no group '" + group + "'");
  }
};

inline GroupReport tag_group_report(const std::map<std::string, double>& per_tag, const TagGroupMap& groups) {
  std::vector<std::string> unmapped;
  for (const auto& [tag, v] : per_tag)
    if (!groups.group_of.count(tag)) unmapped.push_back(tag);
  if (!unmapped.empty()) {
    std::string list;
    for (const auto& t : unmapped) list += (list.empty() ? "" : ", ") + t;
    fail(ErrorKind::data, "tags missing from the group map: " + list);
  }
  GroupReport rep;
  for (const auto& g : tag_groups()) {
    GroupReport::Row row{g, 0, std::nullopt};
    double sum = 0.0;
    for (const auto& [tag, v] : per_tag)
      if (groups.group_of.at(tag) == g) {
        sum += v;
        ++row.count;
      }
    if (row.count) row.mean = sum / static_cast<double>(row.count);
    rep.rows.push_back(row);
  }
  return rep;
}

namespace detail {

inline std::string fmt(double v) { return format_real(v); }

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write " + path.string());
  os << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::data, "cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace detail

inline void write_group_csv(const std::filesystem::path& path, const GroupReport& rep) {
  std::string s = "group,n_tags,mean\n";
  for (const auto& r : rep.rows) s += r.group + "," + std::to_string(r.count) + "," + (r.mean ? detail::fmt(*r.mean) : "") + "\n";
  detail::write_text(path, s);
}

inline GroupReport read_group_csv(const std::filesystem::path& path) {
  std::istringstream is(detail::read_text(path));
  std::string line;
  std::getline(is, line);
  if (line != "group,n_tags,mean") fail(ErrorKind::data, path.string() + ": not a group report");
  GroupReport rep;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::csv_split(line);
    if (f.size() != 3) fail(ErrorKind::data, path.string() + ": malformed row");
    GroupReport::Row r{f[0], static_cast<std::size_t>(std::stoull(f[1])), std::nullopt};
    if (!f[2].empty()) r.mean = std::stod(f[2]);
    rep.rows.push_back(r);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalReport {
  double roc_auc = 0.0;
  double pr_auc = 0.0;
  std::map<std::string, double> roc_per_tag, pr_per_tag;
  std::vector<std::string> skipped_tags;  // single-class in the evaluated split
  std::size_t n_tracks = 0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const {
    return {{"roc_auc", roc_auc},           {"pr_auc", pr_auc},         {"n_tracks", n_tracks},
            {"n_tags", roc_per_tag.size()}, {"skipped_tags", skipped_tags}, {"roc_auc_per_tag", roc_per_tag},
            {"pr_auc_per_tag", pr_per_tag}, {"warnings", warnings}};
  }
};

inline EvalReport evaluate_predictions(const PredictionMatrix& p, const LabelMatrix& l) {
  EvalReport rep;
  const MacroResult roc = macro_average(Metric::roc_auc, p, l);
  const MacroResult pr = macro_average(Metric::pr_auc, p, l);
  rep.roc_auc = roc.value;
  rep.pr_auc = pr.value;
  for (std::size_t t = 0; t < p.vocabulary.size(); ++t) {
    // A tag counts only when both metrics are defined, i.e. both classes occur.
    if (roc.per_tag[t] && pr.per_tag[t]) {
      rep.roc_per_tag[p.vocabulary[t]] = *roc.per_tag[t];
      rep.pr_per_tag[p.vocabulary[t]] = *pr.per_tag[t];
    } else {
      rep.skipped_tags.push_back(p.vocabulary[t]);
    }
  }
  rep.n_tracks = p.track_ids.size();
  return rep;
}

inline EvalReport evaluate_model(const Checkpoint& finetuned, const Manifest& manifest, Split split, const MediaSource& media,
                                 double overlap = 0.5) {
  auto model = TaggingModel::from_checkpoint(finetuned);
  const auto records = manifest.in_split(split);
  if (records.empty()) fail(ErrorKind::data, std::string("the ") + to_string(split) + " split is empty");
  check_vocabulary(manifest, model->vocabulary);
  std::vector<std::string> warnings;
  std::vector<const TrackRecord*> kept;
  const PredictionMatrix p = predict_tracks(*model, records, media, overlap, &warnings, &kept);
  if (kept.empty()) fail(ErrorKind::data, "no track of the evaluated split could be decoded");
  EvalReport rep = evaluate_predictions(p, labels_for(kept, model->vocabulary));
  rep.warnings = warnings;
  return rep;
}

inline void write_per_tag_csv(const std::filesystem::path& path, const EvalReport& rep) {
  std::string s = "tag,roc_auc,pr_auc\n";
  for (const auto& [tag, v] : rep.roc_per_tag) s += detail::csv_field(tag) + "," + detail::fmt(v) + "," + detail::fmt(rep.pr_per_tag.at(tag)) + "\n";
  detail::write_text(path, s);
}

inline std::map<std::string, double> read_per_tag_csv(const std::filesystem::path& path, Metric m) {
  std::istringstream is(detail::read_text(path));
  std::string line;
  std::getline(is, line);
  if (line != "tag,roc_auc,pr_auc") fail(ErrorKind::data, path.string() + ": not a per-tag metrics file");
  std::map<std::string, double> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::csv_split(line);
    if (f.size() != 3) fail(ErrorKind::data, path.string() + ": malformed row");
    out[f[0]] = std::stod(m == Metric::roc_auc ? f[1] : f[2]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plots: minimal static SVG line charts
// ---------------------------------------------------------------------------

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};

inline std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                                  const std::vector<Series>& series) {
  const double W = 640, H = 400, L = 70, R = 150, T = 40, B = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  const double pad = std::max(1e-3, (y1 - y0) * 0.1);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << std::setprecision(3) << yv
       << "</text>\n";
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n"
       << std::setprecision(2);
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - B) / 2
     << ")\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* c = colors[i % 6];
    auto pts = series[i].points;
    std::sort(pts.begin(), pts.end());
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : pts) os << px(x) << "," << py(y) << " ";
    os << "\"/>\n";
    for (auto [x, y] : pts) os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"3\" fill=\"" << c << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (i + 1) << "\" fill=\"" << c << "\">" << series[i].label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Ablation drivers
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string model;
  int first_kernel = 0;
  double duration_s = 0.0;
  double fraction = 1.0;
  std::size_t n_train = 0;
  double roc_auc = 0.0;
  double pr_auc = 0.0;
};

// Stage configs for a full pipeline run.
struct PipelineSettings {
  TrainConfig audio = TrainConfig::defaults_for(Stage::audio_pretrain);
  TrainConfig multimodal = TrainConfig::defaults_for(Stage::multimodal_pretrain);
  TrainConfig finetune = TrainConfig::defaults_for(Stage::finetune);

  static PipelineSettings from(const AppConfig& a) {
    return {train_config_for(Stage::audio_pretrain, a), train_config_for(Stage::multimodal_pretrain, a),
            train_config_for(Stage::finetune, a)};
  }
  void set_encoder(const SampleCnnConfig& e) { audio.encoder = multimodal.encoder = finetune.encoder = e; }
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string s = "model,first_kernel,duration_s,fraction,n_train,roc_auc,pr_auc\n";
  for (const auto& r : rows)
    s += detail::csv_field(r.model) + "," + std::to_string(r.first_kernel) + "," + detail::fmt(r.duration_s) + "," +
         detail::fmt(r.fraction) + "," + std::to_string(r.n_train) + "," + detail::fmt(r.roc_auc) + "," + detail::fmt(r.pr_auc) + "\n";
  return s;
}

inline std::vector<AblationRow> read_ablation_csv(const std::filesystem::path& path) {
  std::istringstream is(detail::read_text(path));
  std::string line;
  std::getline(is, line);
  if (line != "model,first_kernel,duration_s,fraction,n_train,roc_auc,pr_auc") fail(ErrorKind::data, path.string() + ": not an ablation table");
  std::vector<AblationRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::csv_split(line);
    if (f.size() != 7) fail(ErrorKind::data, path.string() + ": malformed row");
    rows.push_back({f[0], std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), static_cast<std::size_t>(std::stoull(f[4])),
                    std::stod(f[5]), std::stod(f[6])});
  }
  return rows;
}

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<std::string> warnings;
};

namespace detail {

inline void emit_ablation(const std::optional<std::filesystem::path>& out_dir, const std::string& stem,
                          const std::vector<AblationRow>& rows, bool by_kernel) {
  if (!out_dir) return;
  write_text(*out_dir / (stem + ".csv"), ablation_csv(rows));
  std::vector<Series> roc, pr;
  for (const auto& r : rows) {
    auto slot = [&](std::vector<Series>& v) -> Series& {
      for (auto& s : v)
        if (s.label == r.model) return s;
      v.push_back({r.model, {}});
      return v.back();
    };
    const double x = by_kernel ? r.duration_s : r.fraction * 100.0;
    slot(roc).points.emplace_back(x, r.roc_auc);
    slot(pr).points.emplace_back(x, r.pr_auc);
  }
  const std::string xl = by_kernel ? "input length (s)" : "training data (%)";
  write_text(*out_dir / (stem + "_roc_auc.svg"), svg_line_chart(stem + ": ROC-AUC", xl, "ROC-AUC", roc));
  write_text(*out_dir / (stem + "_pr_auc.svg"), svg_line_chart(stem + ": PR-AUC", xl, "PR-AUC", pr));
}

}  // namespace detail

// For each k: stage 1, then fine-tune the audio-only backbone; stage 2 on top
// of the same stage-1 model, then fine-tune the conditioned backbone. Both
// are evaluated on the test split.
inline AblationResult run_resolution_ablation(const Manifest& manifest, const MediaSource& media, const PipelineSettings& base,
                                              const std::vector<int>& k_grid, const std::vector<std::string>& vocabulary,
                                              const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                              std::ostream* log = nullptr) {
  if (k_grid.empty()) fail(ErrorKind::config, "resolution grid is empty");
  for (std::size_t i = 0; i < k_grid.size(); ++i) {
    SampleCnnConfig e = base.audio.encoder;
    e.first_kernel = k_grid[i];
    try {
      e.validate();
    } catch (const Error& err) {
      fail(ErrorKind::config, "resolution grid entry k=" + std::to_string(k_grid[i]) + " rejected: " + err.what());
    }
    for (std::size_t j = 0; j < i; ++j)
      if (k_grid[j] == k_grid[i]) fail(ErrorKind::config, "resolution grid repeats k=" + std::to_string(k_grid[i]));
  }
  AblationResult out;
  for (int k : k_grid) {
    PipelineSettings s = base;
    SampleCnnConfig e = base.audio.encoder;
    e.first_kernel = k;
    s.set_encoder(e);
    if (log) *log << "k=" << k << " (" << e.duration_s() << " s): audio pre-training\n";
    const StageResult s1 = pretrain_audio(manifest, media, s.audio);
    if (log) *log << "k=" << k << ": multimodal pre-training\n";
    const StageResult s2 = pretrain_multimodal(manifest, media, s1.exported, s.multimodal);
    out.warnings.insert(out.warnings.end(), s2.warnings.begin(), s2.warnings.end());
    for (const auto& [name, backbone] : {std::pair<std::string, const Checkpoint*>{"vcmr", &s2.exported},
                                        std::pair<std::string, const Checkpoint*>{"audio_only", &s1.exported}}) {
      if (log) *log << "k=" << k << ": fine-tuning " << name << "\n";
      const FinetuneResult ft = finetune(manifest, media, backbone, vocabulary, s.finetune);
      const EvalReport rep = evaluate_model(ft.best, manifest, Split::test, media, s.finetune.eval_overlap);
      out.rows.push_back({name, k, e.duration_s(), 1.0, manifest.count(Split::train), rep.roc_auc, rep.pr_auc});
    }
  }
  detail::emit_ablation(out_dir, "resolution", out.rows, true);
  return out;
}

inline const std::vector<double>& scarcity_grid() {
  static const std::vector<double> g{0.05, 0.10, 0.20, 0.50, 0.80};
  return g;
}

// Per backbone and fraction: subsample the train split, fine-tune, evaluate on
// the whole test split. `include_reference` appends fraction 1.0.
inline AblationResult run_scarcity_ablation(const Manifest& manifest, const MediaSource& media,
                                            const std::vector<std::pair<std::string, Checkpoint>>& backbones,
                                            const TrainConfig& finetune_cfg, const std::vector<std::string>& vocabulary,
                                            std::vector<double> fractions = scarcity_grid(), bool include_reference = false,
                                            const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                            std::ostream* log = nullptr) {
  if (backbones.empty()) fail(ErrorKind::config, "scarcity ablation needs at least one backbone");
  if (include_reference && std::find(fractions.begin(), fractions.end(), 1.0) == fractions.end()) fractions.push_back(1.0);
  std::vector<Manifest> subsets;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) fail(ErrorKind::config, "fraction " + detail::format_real(f) + " outside (0, 1]");
    subsets.push_back(subsample_training(manifest, f, finetune_cfg.run.seed));
    if (subsets.back().count(Split::train) == 0)
      fail(ErrorKind::data, "fraction " + detail::format_real(f) + " leaves no training track");
  }
  AblationResult out;
  for (const auto& [name, backbone] : backbones) {
    std::vector<double> rocs;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
      if (log) *log << name << ": fraction " << fractions[i] << " (" << subsets[i].count(Split::train) << " tracks)\n";
      const FinetuneResult ft = finetune(subsets[i], media, &backbone, vocabulary, finetune_cfg);
      const EvalReport rep = evaluate_model(ft.best, subsets[i], Split::test, media, finetune_cfg.eval_overlap);
      out.rows.push_back({name, finetune_cfg.encoder.first_kernel, finetune_cfg.encoder.duration_s(), fractions[i],
                          subsets[i].count(Split::train), rep.roc_auc, rep.pr_auc});
      rocs.push_back(rep.roc_auc);
    }
    for (std::size_t i = 1; i < rocs.size(); ++i)
      if (fractions[i] > fractions[i - 1] && rocs[i] < rocs[i - 1])
        out.warnings.push_back(name + ": ROC-AUC drops from " + detail::fmt(rocs[i - 1]) + " at " + detail::format_real(fractions[i - 1]) +
                               " to " + detail::fmt(rocs[i]) + " at " + detail::format_real(fractions[i]));
  }
  detail::emit_ablation(out_dir, "scarcity", out.rows, false);
  return out;
}

}  // namespace avcon
