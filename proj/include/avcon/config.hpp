#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "avcon/error.hpp"
#include "avcon/rng.hpp"

namespace avcon {

enum class ValueType { integer, real, boolean, text, int_list, real_list };
enum class Provenance { default_value, file, flag };

inline const char* to_string(Provenance p) {
  switch (p) {
    case Provenance::default_value: return "default";
    case Provenance::file: return "file";
    case Provenance::flag: return "flag";
  }
  return "default";
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

inline bool parse_int(const std::string& s, std::int64_t& v) {
  const char* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, v);
  return r.ec == std::errc() && r.ptr == end && !s.empty();
}

inline bool parse_real(const std::string& s, double& v) {
  const char* end = s.data() + s.size();
  auto r = std::from_chars(s.data(), end, v);
  return r.ec == std::errc() && r.ptr == end && !s.empty() && std::isfinite(v);
}

// Shortest text that parses back to the same double.
inline std::string format_real(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

// Flat dotted-key configuration: every key is declared with a type and a
// default; files and flags may only override declared keys.
class AppConfig {
 public:
  struct Entry {
    ValueType type = ValueType::text;
    std::string value;  // canonical text
    Provenance provenance = Provenance::default_value;
    std::string help;
  };

  static AppConfig defaults() {
    AppConfig c;
    auto def = [&](const std::string& key, ValueType t, const std::string& v, const std::string& help) {
      c.entries_[key] = Entry{t, canonical(key, t, v), Provenance::default_value, help};
    };
    using V = ValueType;
    def("seed", V::integer, "0", "master seed for every random stream");
    def("corpus.max_scene_s", V::real, "30", "longest admissible scene, seconds (strict >)");
    def("corpus.cut_threshold", V::real, "30", "mean-intensity jump declaring a scene cut");
    def("features.fps", V::real, "5", "frame sampling rate of frame directories");
    def("features.embedder", V::text, "stub", "frame embedder: stub | external");
    def("features.embedder_seed", V::integer, "0", "seed of the stub projection embedder");
    def("features.table", V::text, "", "embedding table for the external embedder");
    def("model.first_kernel", V::integer, "5", "first-layer kernel k; input = k*3^9 samples");
    def("model.channels", V::int_list, "128,128,128,256,256,256,256,256,512", "channels of the 9 blocks");
    def("model.proj_hidden", V::integer, "512", "projector hidden width");
    def("model.proj_dim", V::integer, "128", "contrastive space dimension");
    def("model.video_hidden", V::integer, "256", "LSTM hidden size of the video encoder");
    def("model.video_readout", V::text, "last", "video encoder readout: last | mean");
    def("model.head_hidden", V::integer, "256", "hidden width of the tagging head");
    def("augment.enabled", V::boolean, "true", "apply the augmentation chain in audio pre-training");
    def("augment.pitch_prob", V::real, "0.6", "");
    def("augment.pitch_semitones", V::real_list, "-7,7", "");
    def("augment.filter_prob", V::real, "0.6", "");
    def("augment.lowpass_cutoff_hz", V::real_list, "2200,4000", "");
    def("augment.highpass_cutoff_hz", V::real_list, "200,1200", "");
    def("augment.delay_prob", V::real, "0.4", "");
    def("augment.delay_ms", V::real_list, "200,500", "");
    def("augment.delay_decay", V::real_list, "0.3,0.6", "");
    def("augment.noise_prob", V::real, "0.5", "");
    def("augment.noise_snr_db", V::real_list, "10,30", "");
    def("train.batch_size_audio", V::integer, "64", "batch size of audio pre-training");
    def("train.batch_size", V::integer, "128", "batch size of multimodal pre-training and fine-tuning");
    def("train.epochs", V::integer, "50", "epochs of each pre-training stage");
    def("train.finetune_epochs", V::integer, "50", "maximum fine-tuning epochs");
    def("train.learning_rate", V::real, "0.001", "");
    def("train.weight_decay", V::real, "1e-06", "");
    def("train.adam_beta1", V::real, "0.9", "");
    def("train.adam_beta2", V::real, "0.999", "");
    def("train.adam_eps", V::real, "1e-08", "");
    def("train.temperature", V::real, "0.1", "NT-Xent temperature, both pre-training stages");
    def("train.freeze_blocks_multimodal", V::integer, "4", "encoder blocks frozen in multimodal pre-training");
    def("train.max_skip_fraction", V::real, "0.5", "abort multimodal stage if more records lack video features");
    def("train.require_conditioned", V::boolean, "false", "finetune refuses audio-only backbones");
    def("eval.overlap", V::real, "0.5", "window overlap of evaluation inference");
    def("eval.fractions", V::real_list, "0.05,0.1,0.2,0.5,0.8", "scarcity grid");
    def("eval.k_grid", V::int_list, "3,4,5,6", "resolution grid");
    def("eval.group_map", V::text, "", "tag group table; empty uses the bundled MTAT mapping");
    return c;
  }

  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void set(const std::string& key, const std::string& value, Provenance p) {
    auto it = entries_.find(key);
    if (it == entries_.end()) fail(ErrorKind::config, "unknown config key '" + key + "'");
    it->second.value = canonical(key, it->second.type, detail::trim(value));
    it->second.provenance = p;
  }

  // "key = value" lines; '#' starts a comment; blank lines ignored.
  void apply_text(const std::string& text, Provenance p, const std::string& origin = "<config>") {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        fail(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
      set(detail::trim(line.substr(0, eq)), line.substr(eq + 1), p);
    }
  }

  void apply_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::config, "cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    apply_text(ss.str(), Provenance::file, path.string());
  }

  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) fail(ErrorKind::config, "unknown config key '" + key + "'");
    return it->second;
  }
  Provenance provenance(const std::string& key) const { return entry(key).provenance; }
  const std::string& text(const std::string& key) const { return entry(key).value; }

  std::int64_t get_int(const std::string& key) const {
    std::int64_t v = 0;
    detail::parse_int(typed(key, ValueType::integer).value, v);
    return v;
  }
  double get_real(const std::string& key) const {
    double v = 0;
    detail::parse_real(typed(key, ValueType::real).value, v);
    return v;
  }
  bool get_bool(const std::string& key) const { return typed(key, ValueType::boolean).value == "true"; }
  const std::string& get_text(const std::string& key) const { return typed(key, ValueType::text).value; }
  std::vector<std::int64_t> get_int_list(const std::string& key) const {
    std::vector<std::int64_t> out;
    for (const auto& s : detail::split_list(typed(key, ValueType::int_list).value)) {
      std::int64_t v = 0;
      detail::parse_int(s, v);
      out.push_back(v);
    }
    return out;
  }
  std::vector<double> get_real_list(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : detail::split_list(typed(key, ValueType::real_list).value)) {
      double v = 0;
      detail::parse_real(s, v);
      out.push_back(v);
    }
    return out;
  }

  // Resolved config as a config file; feeding it back yields the same values.
  std::string echo() const {
    std::ostringstream os;
    os << "# resolved configuration (value  # provenance)\n";
    for (const auto& [k, e] : entries_) os << k << " = " << e.value << "  # " << to_string(e.provenance) << "\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, e] : entries_) j[k] = e.value;
    return j;
  }

  // Hash of the resolved values only (provenance does not change a run).
  std::uint64_t value_hash() const {
    std::string s;
    for (const auto& [k, e] : entries_) s += k + "=" + e.value + "\n";
    return hash_string(s);
  }

  bool same_values(const AppConfig& o) const { return to_json() == o.to_json(); }

 private:
  const Entry& typed(const std::string& key, ValueType t) const {
    const Entry& e = entry(key);
    if (e.type != t) fail(ErrorKind::config, "config key '" + key + "' read with the wrong type");
    return e;
  }

  static std::string canonical(const std::string& key, ValueType t, const std::string& v) {
    auto bad = [&](const char* what) -> std::string {
      fail(ErrorKind::config, "config key '" + key + "': '" + v + "' is not " + what);
    };
    switch (t) {
      case ValueType::integer: {
        std::int64_t x;
        if (!detail::parse_int(v, x)) bad("an integer");
        return std::to_string(x);
      }
      case ValueType::real: {
        double x;
        if (!detail::parse_real(v, x)) bad("a finite number");
        return detail::format_real(x);
      }
      case ValueType::boolean: {
        if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
        if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
        return bad("a boolean");
      }
      case ValueType::text:
        if (v.find('#') != std::string::npos || v.find('\n') != std::string::npos) bad("valid text (no '#')");
        return v;
      case ValueType::int_list: {
        std::string out;
        for (const auto& s : detail::split_list(v)) {
          std::int64_t x;
          if (!detail::parse_int(s, x)) bad("a comma-separated integer list");
          out += (out.empty() ? "" : ",") + std::to_string(x);
        }
        if (out.empty()) bad("a non-empty integer list");
        return out;
      }
      case ValueType::real_list: {
        std::string out;
        for (const auto& s : detail::split_list(v)) {
          double x;
          if (!detail::parse_real(s, x)) bad("a comma-separated number list");
          out += (out.empty() ? "" : ",") + detail::format_real(x);
        }
        if (out.empty()) bad("a non-empty number list");
        return out;
      }
    }
    return v;
  }

  std::map<std::string, Entry> entries_;
};

// Precedence: flags > file > defaults.
inline AppConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::pair<std::string, std::string>>& flags) {
  AppConfig c = AppConfig::defaults();
  if (file) c.apply_file(*file);
  for (const auto& [k, v] : flags) c.set(k, v, Provenance::flag);
  return c;
}

}  // namespace avcon
