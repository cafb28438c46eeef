#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "avcon/error.hpp"
#include "avcon/rng.hpp"

namespace avcon {

enum class Split { train, valid, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "valid" || s == "validation") return Split::valid;
  if (s == "test") return Split::test;
  fail(ErrorKind::data, "unknown split '" + s + "'");
}

struct TrackRecord {
  std::string track_id;
  std::string audio_path;
  std::optional<std::string> video_path;
  double duration_s = 0.0;
  Split split = Split::train;
  std::optional<std::set<std::string>> tags;

  bool operator==(const TrackRecord&) const = default;
};

struct Manifest {
  static constexpr int kSchemaVersion = 1;

  std::vector<TrackRecord> records;
  int schema_version = kSchemaVersion;

  std::vector<const TrackRecord*> in_split(Split s) const {
    std::vector<const TrackRecord*> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(&r);
    return out;
  }
  std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count_if(records.begin(), records.end(),
                                                  [s](const TrackRecord& r) { return r.split == s; }));
  }
  const TrackRecord* find(const std::string& id) const {
    for (const auto& r : records)
      if (r.track_id == id) return &r;
    return nullptr;
  }

  void validate() const {
    std::unordered_set<std::string> seen;
    for (const auto& r : records) {
      if (r.track_id.empty()) fail(ErrorKind::data, "record with empty track_id");
      if (!seen.insert(r.track_id).second) fail(ErrorKind::data, "duplicate track_id '" + r.track_id + "'");
      if (!(r.duration_s >= 0.0)) fail(ErrorKind::data, "negative duration for '" + r.track_id + "'");
      if (r.split == Split::train && !(r.duration_s > 0.0))
        fail(ErrorKind::data, "training record '" + r.track_id + "' has zero duration");
    }
  }

  bool operator==(const Manifest&) const = default;
};

// ---------------------------------------------------------------------------
// Manifest file format (UTF-8, one JSON object per line):
//   line 1: {"schema_version": 1, "kind": "avcon-manifest"}
//   line n: {"track_id": ..., "audio_path": ..., "video_path": ... | absent,
//            "duration_s": ..., "split": "train"|"valid"|"test", "tags": [...] | absent}
// Blank lines and lines starting with '#' are ignored.
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const TrackRecord& r) {
  nlohmann::json j;
  j["track_id"] = r.track_id;
  j["audio_path"] = r.audio_path;
  if (r.video_path) j["video_path"] = *r.video_path;
  j["duration_s"] = r.duration_s;
  j["split"] = to_string(r.split);
  if (r.tags) j["tags"] = std::vector<std::string>(r.tags->begin(), r.tags->end());
  return j;
}

inline TrackRecord record_from_json(const nlohmann::json& j) {
  TrackRecord r;
  try {
    r.track_id = j.at("track_id").get<std::string>();
    r.audio_path = j.value("audio_path", std::string{});
    if (j.contains("video_path") && !j["video_path"].is_null()) r.video_path = j["video_path"].get<std::string>();
    r.duration_s = j.value("duration_s", 0.0);
    r.split = parse_split(j.value("split", std::string("train")));
    if (j.contains("tags") && !j["tags"].is_null()) {
      std::set<std::string> tags;
      for (const auto& t : j["tags"]) tags.insert(t.get<std::string>());
      r.tags = std::move(tags);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, std::string("malformed manifest record: ") + e.what());
  }
  return r;
}

inline void write_manifest(std::ostream& os, const Manifest& m) {
  os << nlohmann::json{{"kind", "avcon-manifest"}, {"schema_version", m.schema_version}}.dump() << '\n';
  for (const auto& r : m.records) os << to_json(r).dump() << '\n';
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorKind::data, "cannot write manifest " + path.string());
  write_manifest(os, m);
}

inline Manifest read_manifest(std::istream& is, const std::string& origin = "<stream>") {
  Manifest m;
  std::string line;
  bool header_seen = false;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      fail(ErrorKind::data, origin + ":" + std::to_string(lineno) + ": not a JSON record");
    }
    if (!header_seen) {
      header_seen = true;
      if (j.contains("schema_version") && !j.contains("track_id")) {
        m.schema_version = j["schema_version"].get<int>();
        if (m.schema_version != Manifest::kSchemaVersion)
          fail(ErrorKind::version, origin + ": manifest schema_version " + std::to_string(m.schema_version) +
                                       " (expected " + std::to_string(Manifest::kSchemaVersion) + ")");
        continue;
      }
      fail(ErrorKind::data, origin + ": missing manifest header line");
    }
    m.records.push_back(record_from_json(j));
  }
  if (!header_seen) fail(ErrorKind::data, origin + ": empty manifest");
  m.validate();
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorKind::data, "cannot open manifest " + path.string());
  return read_manifest(is, path.string());
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

struct SceneList {
  std::vector<double> boundaries_s;  // 0, cuts..., duration

  std::vector<double> lengths() const {
    std::vector<double> out;
    for (std::size_t i = 1; i < boundaries_s.size(); ++i) out.push_back(boundaries_s[i] - boundaries_s[i - 1]);
    return out;
  }
  double longest() const {
    double m = 0.0;
    for (double l : lengths()) m = std::max(m, l);
    return m;
  }
  std::size_t scene_count() const { return boundaries_s.empty() ? 0 : boundaries_s.size() - 1; }

  void validate() const {
    if (boundaries_s.size() < 2) fail(ErrorKind::data, "scene list needs at least two boundaries");
    if (boundaries_s.front() != 0.0) fail(ErrorKind::data, "scene list must start at 0");
    for (std::size_t i = 1; i < boundaries_s.size(); ++i)
      if (!(boundaries_s[i] > boundaries_s[i - 1])) fail(ErrorKind::data, "scene boundaries not strictly increasing");
  }
};

// Cut declared between consecutive frames whose mean intensities differ by
// more than cut_threshold. Boundaries are the frame times of the cuts.
inline SceneList detect_scenes(std::span<const double> frame_intensity, double fps, double cut_threshold) {
  if (frame_intensity.empty()) fail(ErrorKind::invalid_input, "detect_scenes: empty intensity series");
  if (!(fps > 0.0)) fail(ErrorKind::invalid_input, "detect_scenes: fps must be positive");
  if (!(cut_threshold > 0.0)) fail(ErrorKind::invalid_input, "detect_scenes: cut threshold must be positive");
  SceneList out;
  out.boundaries_s.push_back(0.0);
  for (std::size_t i = 1; i < frame_intensity.size(); ++i)
    if (std::abs(frame_intensity[i] - frame_intensity[i - 1]) > cut_threshold)
      out.boundaries_s.push_back(static_cast<double>(i) / fps);
  out.boundaries_s.push_back(static_cast<double>(frame_intensity.size()) / fps);
  return out;
}

struct FilterResult {
  Manifest manifest;
  std::vector<std::string> warnings;
};

// Keeps video records whose longest scene is <= max_scene_s.
inline FilterResult filter_by_scene_length(const Manifest& manifest, const std::map<std::string, SceneList>& scenes,
                                           double max_scene_s = 30.0) {
  FilterResult res;
  res.manifest.schema_version = manifest.schema_version;
  for (const auto& r : manifest.records) {
    if (!r.video_path) continue;
    auto it = scenes.find(r.track_id);
    if (it == scenes.end()) {
      res.warnings.push_back("skipped '" + r.track_id + "': no scene list");
      continue;
    }
    if (it->second.longest() <= max_scene_s) res.manifest.records.push_back(r);
  }
  return res;
}

// Scene sidecar: "<scenes_dir>/<track_id>.scenes", first line "# avcon-scenes v1",
// then one boundary (seconds) per line.
inline std::filesystem::path scene_sidecar_path(const std::filesystem::path& dir, const std::string& track_id) {
  return dir / (track_id + ".scenes");
}

inline void save_scenes(const std::filesystem::path& path, const SceneList& s) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) fail(ErrorKind::data, "cannot write " + path.string());
  os << "# avcon-scenes v1\n";
  os.precision(17);
  for (double b : s.boundaries_s) os << b << '\n';
}

inline std::optional<SceneList> load_scenes(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) return std::nullopt;
  SceneList s;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    s.boundaries_s.push_back(std::stod(line));
  }
  s.validate();
  return s;
}

inline std::map<std::string, SceneList> load_scene_dir(const std::filesystem::path& dir, const Manifest& m) {
  std::map<std::string, SceneList> out;
  for (const auto& r : m.records)
    if (auto s = load_scenes(scene_sidecar_path(dir, r.track_id))) out.emplace(r.track_id, std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Scarcity subsetting
// ---------------------------------------------------------------------------

// Uniform subset of round(fraction * n_train) training records; other splits untouched.
inline Manifest subsample_training(const Manifest& manifest, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) fail(ErrorKind::invalid_input, "subsample fraction must be in (0, 1]");
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    if (manifest.records[i].split == Split::train) train_idx.push_back(i);
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(train_idx.size())));

  // Fisher-Yates with a portable index draw.
  Rng rng(mix_seed(seed, 0x5ca7c17ULL));
  for (std::size_t i = train_idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(train_idx[i - 1], train_idx[j]);
  }
  std::vector<bool> chosen(manifest.records.size(), false);
  for (std::size_t i = 0; i < keep; ++i) chosen[train_idx[i]] = true;

  Manifest out;
  out.schema_version = manifest.schema_version;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    if (r.split != Split::train || chosen[i]) out.records.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation windowing
// ---------------------------------------------------------------------------

struct Window {
  double start_s = 0.0;
  double end_s = 0.0;
  bool padded = false;  // track shorter than one segment; zero-pad to segment length
};

inline std::vector<Window> chunk_for_eval(double duration_s, double segment_s, double overlap = 0.5) {
  if (!(segment_s > 0.0)) fail(ErrorKind::invalid_input, "segment length must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) fail(ErrorKind::invalid_input, "overlap must be in [0, 1)");
  if (!(duration_s > 0.0)) fail(ErrorKind::invalid_input, "duration must be positive");
  const double eps = 1e-9 * std::max(1.0, duration_s);
  if (duration_s + eps < segment_s) return {Window{0.0, duration_s, true}};

  const double hop = segment_s * (1.0 - overlap);
  std::vector<Window> out;
  for (std::size_t m = 0;; ++m) {
    const double start = static_cast<double>(m) * hop;
    if (start + segment_s > duration_s + eps) break;
    out.push_back({start, start + segment_s, false});
  }
  if (out.back().end_s < duration_s - eps) out.push_back({duration_s - segment_s, duration_s, false});
  return out;
}

// Same rule in integer samples; hop = round(segment * (1 - overlap)).
inline std::vector<std::size_t> chunk_sample_offsets(std::size_t n_samples, std::size_t segment, double overlap = 0.5) {
  if (segment == 0) fail(ErrorKind::invalid_input, "segment length must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) fail(ErrorKind::invalid_input, "overlap must be in [0, 1)");
  if (n_samples <= segment) return {0};
  const auto hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(segment * (1.0 - overlap))));
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + segment <= n_samples; s += hop) out.push_back(s);
  if (out.back() + segment < n_samples) out.push_back(n_samples - segment);
  return out;
}

}  // namespace avcon
