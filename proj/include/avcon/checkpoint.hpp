#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "avcon/error.hpp"
#include "avcon/nn/adam.hpp"
#include "avcon/nn/tensor.hpp"
#include "avcon/rng.hpp"

namespace avcon {

struct NamedTensor {
  std::string name;
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  bool discardable = false;  // e.g. projection heads, dropped when exporting a backbone
  std::vector<float> data;

  bool operator==(const NamedTensor&) const = default;
};

// Binary container, little-endian:
//   "AVCK" | u32 schema_version | u64 payload_bytes | payload | u64 FNV-1a(payload)
// Payload fields, in order: stage, epoch, config echo (JSON text), tensors,
// optimizer steps, optimizer first/second moments, rng state, history (JSON text).
struct Checkpoint {
  static constexpr std::uint32_t kSchemaVersion = 1;

  std::string stage = "init";
  std::uint64_t epoch = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
  std::uint64_t optimizer_steps = 0;
  std::vector<NamedTensor> optimizer_m;
  std::vector<NamedTensor> optimizer_v;
  std::string rng_state;
  nlohmann::json history = nlohmann::json::array();

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  bool has_prefix(const std::string& prefix) const {
    for (const auto& t : tensors)
      if (t.name.rfind(prefix, 0) == 0) return true;
    return false;
  }

  // Keeps only tensors whose name starts with `prefix`; optimizer state is dropped.
  Checkpoint export_only(const std::string& prefix) const {
    Checkpoint c = *this;
    c.tensors.clear();
    for (const auto& t : tensors)
      if (t.name.rfind(prefix, 0) == 0) c.tensors.push_back(t);
    c.optimizer_steps = 0;
    c.optimizer_m.clear();
    c.optimizer_v.clear();
    return c;
  }

  bool operator==(const Checkpoint&) const = default;
};

template <class T>
NamedTensor to_named(const std::string& name, const nn::Mat<T>& m, bool discardable = false) {
  NamedTensor t;
  t.name = name;
  t.rows = static_cast<std::uint32_t>(m.rows());
  t.cols = static_cast<std::uint32_t>(m.cols());
  t.discardable = discardable;
  t.data.resize(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) t.data[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
  return t;
}

template <class T>
void capture(Checkpoint& ck, const nn::ParamList<T>& params, bool discardable = false) {
  for (const auto* p : params) ck.tensors.push_back(to_named(p->name, p->value, discardable));
}

// Copies matching tensors into params; every param must be present.
template <class T>
void restore(const Checkpoint& ck, const nn::ParamList<T>& params) {
  for (auto* p : params) {
    const NamedTensor* t = ck.find(p->name);
    if (!t) fail(ErrorKind::data, "checkpoint has no tensor '" + p->name + "'");
    if (t->rows != p->value.rows() || t->cols != p->value.cols())
      fail(ErrorKind::shape, "checkpoint tensor '" + p->name + "' has shape " + std::to_string(t->rows) + "x" +
                                 std::to_string(t->cols) + ", model expects " + std::to_string(p->value.rows()) + "x" +
                                 std::to_string(p->value.cols()));
    for (std::size_t i = 0; i < t->data.size(); ++i) p->value.data()[i] = static_cast<T>(t->data[i]);
  }
}

template <class T>
void capture_optimizer(Checkpoint& ck, const nn::Adam<T>& opt) {
  ck.optimizer_steps = opt.steps();
  ck.optimizer_m.clear();
  ck.optimizer_v.clear();
  for (const auto& [name, st] : opt.state()) {
    ck.optimizer_m.push_back(to_named(name, st.m));
    ck.optimizer_v.push_back(to_named(name, st.v));
  }
}

template <class T>
void restore_optimizer(const Checkpoint& ck, nn::Adam<T>& opt) {
  opt.set_steps(ck.optimizer_steps);
  opt.state().clear();
  for (std::size_t i = 0; i < ck.optimizer_m.size(); ++i) {
    const auto& m = ck.optimizer_m[i];
    const auto& v = ck.optimizer_v.at(i);
    typename nn::Adam<T>::Moments st;
    st.m.resize(m.rows, m.cols);
    st.v.resize(v.rows, v.cols);
    for (std::size_t k = 0; k < m.data.size(); ++k) {
      st.m.data()[k] = static_cast<T>(m.data[k]);
      st.v.data()[k] = static_cast<T>(v.data[k]);
    }
    opt.state()[m.name] = std::move(st);
  }
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void str(const std::string& s) {
    u64(s.size());
    buf_.append(s);
  }
  void floats(const std::vector<float>& v) {
    for (float f : v) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      u32(bits);
    }
  }
  void tensors(const std::vector<NamedTensor>& ts) {
    u64(ts.size());
    for (const auto& t : ts) {
      str(t.name);
      u32(t.rows);
      u32(t.cols);
      u8(t.discardable ? 1 : 0);
      floats(t.data);
    }
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view b) : b_(b) {}
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(u8()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(u8()) << (8 * i);
    return v;
  }
  std::string str() {
    const auto n = u64();
    need(n);
    std::string s(b_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<NamedTensor> tensors() {
    std::vector<NamedTensor> ts(u64());
    for (auto& t : ts) {
      t.name = str();
      t.rows = u32();
      t.cols = u32();
      t.discardable = u8() != 0;
      const std::uint64_t n = std::uint64_t(t.rows) * t.cols;
      need(n * 4);
      t.data.resize(n);
      for (auto& f : t.data) {
        const std::uint32_t bits = u32();
        std::memcpy(&f, &bits, 4);
      }
    }
    return ts;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (pos_ + n > b_.size()) fail(ErrorKind::integrity, "checkpoint payload truncated");
  }
  std::string_view b_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(std::string_view s) { return hash_string(s); }

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::ByteWriter p;
  p.str(ck.stage);
  p.u64(ck.epoch);
  p.str(ck.config.dump());
  p.tensors(ck.tensors);
  p.u64(ck.optimizer_steps);
  p.tensors(ck.optimizer_m);
  p.tensors(ck.optimizer_v);
  p.str(ck.rng_state);
  p.str(ck.history.dump());

  detail::ByteWriter out;
  out.u32(Checkpoint::kSchemaVersion);
  out.u64(p.bytes().size());
  std::string file = "AVCK" + out.bytes() + p.bytes();
  detail::ByteWriter tail;
  tail.u64(detail::fnv1a(p.bytes()));
  return file + tail.bytes();
}

inline Checkpoint deserialize(std::string_view bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "AVCK") fail(ErrorKind::integrity, origin + ": not a checkpoint file");
  detail::ByteReader hdr(bytes.substr(4, 12));
  const std::uint32_t version = hdr.u32();
  if (version != Checkpoint::kSchemaVersion)
    fail(ErrorKind::version, origin + ": checkpoint schema_version " + std::to_string(version) + " cannot be loaded (this build reads version " +
                                 std::to_string(Checkpoint::kSchemaVersion) + "); re-export it with a matching release");
  const std::uint64_t len = hdr.u64();
  if (bytes.size() != 16 + len + 8) fail(ErrorKind::integrity, origin + ": checkpoint size does not match its header");
  const std::string_view payload = bytes.substr(16, len);
  detail::ByteReader tail(bytes.substr(16 + len, 8));
  if (tail.u64() != detail::fnv1a(payload)) fail(ErrorKind::integrity, origin + ": checkpoint checksum mismatch");

  detail::ByteReader r(payload);
  Checkpoint ck;
  ck.stage = r.str();
  ck.epoch = r.u64();
  try {
    ck.config = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::integrity, origin + ": corrupt config echo");
  }
  ck.tensors = r.tensors();
  ck.optimizer_steps = r.u64();
  ck.optimizer_m = r.tensors();
  ck.optimizer_v = r.tensors();
  ck.rng_state = r.str();
  ck.history = nlohmann::json::parse(r.str());
  if (!r.done()) fail(ErrorKind::integrity, origin + ": trailing bytes in checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::string bytes = serialize(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) fail(ErrorKind::data, "cannot write checkpoint " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::missing_prerequisite, "checkpoint not found: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

inline std::uint64_t tensor_hash(const NamedTensor& t) {
  std::string_view v(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  return hash_string(v);
}

// Per-tensor content hashes, for freezing checks.
inline std::map<std::string, std::uint64_t> tensor_hashes(const Checkpoint& ck, const std::string& prefix = "") {
  std::map<std::string, std::uint64_t> out;
  for (const auto& t : ck.tensors)
    if (t.name.rfind(prefix, 0) == 0) out[t.name] = tensor_hash(t);
  return out;
}

}  // namespace avcon
