#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "avcon/error.hpp"
#include "avcon/rng.hpp"

namespace avcon {

inline constexpr int kContextDim = 512;
inline constexpr double kDefaultFps = 5.0;

// One column per frame.
struct FrameEmbeddingSeq {
  Eigen::MatrixXf vectors;
  double fps = kDefaultFps;

  Eigen::Index size() const { return vectors.cols(); }
};

// One column per second of video.
struct SecondEmbeddingSeq {
  Eigen::MatrixXf vectors;
  std::string track_id;

  Eigen::Index size() const { return vectors.cols(); }
  Eigen::Index dim() const { return vectors.rows(); }
};

// 8-bit image, row-major, 1 (gray) or 3 (RGB) channels.
struct Frame {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
  std::size_t index = 0;  // position in its source sequence

  double mean_intensity() const {
    if (pixels.empty()) return 0.0;
    double acc = 0.0;
    for (auto p : pixels) acc += p;
    return acc / static_cast<double>(pixels.size());
  }
};

// ---------------------------------------------------------------------------
// Frame sources. A video is a directory of binary PGM/PPM frames already
// sampled at the manifest fps, read in lexicographic filename order.
// ---------------------------------------------------------------------------

inline Frame read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::decode, path.string() + ": cannot open frame");
  std::string magic;
  is >> magic;
  auto next_int = [&]() {
    int v = 0;
    while (is >> std::ws && is.peek() == '#') {
      std::string skip;
      std::getline(is, skip);
    }
    if (!(is >> v)) fail(ErrorKind::decode, path.string() + ": malformed PNM header");
    return v;
  };
  Frame f;
  if (magic == "P5") f.channels = 1;
  else if (magic == "P6") f.channels = 3;
  else fail(ErrorKind::decode, path.string() + ": only binary PGM/PPM frames are supported");
  f.width = next_int();
  f.height = next_int();
  const int maxval = next_int();
  if (f.width <= 0 || f.height <= 0 || maxval <= 0 || maxval > 255)
    fail(ErrorKind::decode, path.string() + ": unsupported PNM geometry");
  is.get();
  f.pixels.resize(static_cast<std::size_t>(f.width) * f.height * f.channels);
  if (!is.read(reinterpret_cast<char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size())))
    fail(ErrorKind::decode, path.string() + ": truncated frame data");
  return f;
}

inline void write_pnm(const std::filesystem::path& path, const Frame& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write " + path.string());
  os << (f.channels == 3 ? "P6" : "P5") << '\n' << f.width << ' ' << f.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(f.pixels.data()), static_cast<std::streamsize>(f.pixels.size()));
}

inline std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::decode, dir.string() + ": frame directory not found");
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm" || ext == ".pnm")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<Frame> load_frames(const std::filesystem::path& dir) {
  std::vector<Frame> frames;
  for (const auto& p : list_frames(dir)) {
    frames.push_back(read_pnm(p));
    frames.back().index = frames.size() - 1;
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Frame embedders
// ---------------------------------------------------------------------------

class FrameEmbedder {
 public:
  virtual ~FrameEmbedder() = default;
  virtual int output_dim() const = 0;
  virtual Eigen::VectorXf embed(const Frame& frame) const = 0;
  // False means the pipeline must call embed() from one thread only.
  virtual bool concurrent_safe() const { return true; }
  virtual std::string name() const = 0;
};

// Deterministic stand-in for a pre-trained image encoder: box-downsample to a
// grid x grid RGB thumbnail, then a seeded Gaussian projection, L2-normalised.
class RandomProjectionEmbedder final : public FrameEmbedder {
 public:
  explicit RandomProjectionEmbedder(std::uint64_t seed = 0, int dim = kContextDim, int grid = 8)
      : dim_(dim), grid_(grid), proj_(dim, grid * grid * 3) {
    Rng rng(mix_seed(seed, 0xe3bedULL));
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (Eigen::Index j = 0; j < proj_.cols(); ++j)
      for (Eigen::Index i = 0; i < proj_.rows(); ++i) proj_(i, j) = n(rng);
    proj_ /= std::sqrt(static_cast<float>(proj_.cols()));
  }

  int output_dim() const override { return dim_; }
  std::string name() const override { return "stub"; }

  Eigen::VectorXf thumbnail(const Frame& f) const {
    Eigen::VectorXf t = Eigen::VectorXf::Zero(grid_ * grid_ * 3);
    Eigen::VectorXf counts = Eigen::VectorXf::Zero(grid_ * grid_);
    for (int y = 0; y < f.height; ++y) {
      const int gy = y * grid_ / f.height;
      for (int x = 0; x < f.width; ++x) {
        const int gx = x * grid_ / f.width;
        const int cell = gy * grid_ + gx;
        const std::size_t base = (static_cast<std::size_t>(y) * f.width + x) * f.channels;
        for (int c = 0; c < 3; ++c)
          t(cell * 3 + c) += f.pixels[base + (f.channels == 3 ? c : 0)] / 255.0f;
        counts(cell) += 1.0f;
      }
    }
    for (int cell = 0; cell < grid_ * grid_; ++cell)
      for (int c = 0; c < 3; ++c)
        t(cell * 3 + c) = counts(cell) > 0 ? t(cell * 3 + c) / counts(cell) - 0.5f : 0.0f;
    return t;
  }

  Eigen::VectorXf embed(const Frame& f) const override {
    if (f.width <= 0 || f.height <= 0) fail(ErrorKind::invalid_input, "empty frame");
    Eigen::VectorXf v = proj_ * thumbnail(f);
    const float norm = v.norm();
    if (norm > 0.0f) v /= norm;
    return v;
  }

 private:
  int dim_;
  int grid_;
  Eigen::MatrixXf proj_;
};

// Adapter for an external pre-trained image-text encoder run out of process.
// It serves precomputed per-frame vectors from a table file, indexed by
// Frame::index. Table layout (little-endian):
//   "AVFT" | u32 version=1 | u32 dim | u32 n_frames | n_frames * dim float32
class ExternalTableEmbedder final : public FrameEmbedder {
 public:
  explicit ExternalTableEmbedder(Eigen::MatrixXf table) : table_(std::move(table)) {}

  static ExternalTableEmbedder load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::data, path.string() + ": cannot open frame-embedding table");
    char magic[4];
    std::uint32_t hdr[3];
    is.read(magic, 4);
    is.read(reinterpret_cast<char*>(hdr), sizeof hdr);
    if (!is || std::memcmp(magic, "AVFT", 4) != 0) fail(ErrorKind::data, path.string() + ": bad table header");
    if (hdr[0] != 1) fail(ErrorKind::version, path.string() + ": table version " + std::to_string(hdr[0]));
    Eigen::MatrixXf t(hdr[1], hdr[2]);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!is) fail(ErrorKind::data, path.string() + ": truncated table");
    return ExternalTableEmbedder(std::move(t));
  }

  static void save(const std::filesystem::path& path, const Eigen::MatrixXf& table) {
    std::ofstream os(path, std::ios::binary);
    const std::uint32_t hdr[3] = {1u, static_cast<std::uint32_t>(table.rows()), static_cast<std::uint32_t>(table.cols())};
    os.write("AVFT", 4);
    os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    os.write(reinterpret_cast<const char*>(table.data()), static_cast<std::streamsize>(table.size() * sizeof(float)));
  }

  int output_dim() const override { return static_cast<int>(table_.rows()); }
  std::string name() const override { return "external"; }
  Eigen::VectorXf embed(const Frame& f) const override {
    if (static_cast<Eigen::Index>(f.index) >= table_.cols())
      fail(ErrorKind::out_of_range, "external table has no row for frame " + std::to_string(f.index));
    return table_.col(static_cast<Eigen::Index>(f.index));
  }

 private:
  Eigen::MatrixXf table_;
};

inline FrameEmbeddingSeq embed_frames(std::span<const Frame> frames, const FrameEmbedder& embedder,
                                      double fps = kDefaultFps) {
  if (embedder.output_dim() != kContextDim)
    fail(ErrorKind::config, "frame embedder '" + embedder.name() + "' declares dimension " +
                                std::to_string(embedder.output_dim()) + ", expected 512");
  if (!(fps > 0.0)) fail(ErrorKind::invalid_input, "fps must be positive");
  FrameEmbeddingSeq seq;
  seq.fps = fps;
  seq.vectors.resize(kContextDim, static_cast<Eigen::Index>(frames.size()));
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Eigen::VectorXf v = embedder.embed(frames[i]);
    if (v.size() != kContextDim) fail(ErrorKind::config, "frame embedder returned wrong dimension");
    seq.vectors.col(static_cast<Eigen::Index>(i)) = v;
  }
  return seq;
}

// Means consecutive groups of round(fps) frames; a trailing partial group is dropped.
inline SecondEmbeddingSeq average_per_second(const FrameEmbeddingSeq& seq, std::string track_id = {}) {
  if (!(seq.fps > 0.0)) fail(ErrorKind::invalid_input, "fps must be positive");
  const auto group = static_cast<Eigen::Index>(std::llround(seq.fps));
  if (group < 1) fail(ErrorKind::invalid_input, "fps rounds to zero frames per second");
  SecondEmbeddingSeq out;
  out.track_id = std::move(track_id);
  const Eigen::Index n = seq.vectors.cols() / group;
  out.vectors.resize(seq.vectors.rows(), n);
  for (Eigen::Index s = 0; s < n; ++s)
    out.vectors.col(s) = seq.vectors.middleCols(s * group, group).rowwise().mean();
  return out;
}

// Seconds floor(start) .. floor(start) + ceil(length) - 1.
inline SecondEmbeddingSeq align_video_segment(const SecondEmbeddingSeq& seq, double start_s, double length_s) {
  if (!(start_s >= 0.0)) fail(ErrorKind::invalid_input, "segment start must be non-negative");
  if (!(length_s > 0.0)) fail(ErrorKind::invalid_input, "segment length must be positive");
  const auto first = static_cast<Eigen::Index>(std::floor(start_s + 1e-9));
  const auto count = static_cast<Eigen::Index>(std::ceil(length_s - 1e-9));
  if (first + count > seq.size())
    fail(ErrorKind::out_of_range, "track '" + seq.track_id + "': video seconds [" + std::to_string(first) + ", " +
                                      std::to_string(first + count) + ") exceed " + std::to_string(seq.size()) +
                                      " available");
  SecondEmbeddingSeq out;
  out.track_id = seq.track_id;
  out.vectors = seq.vectors.middleCols(first, count);
  return out;
}

// ---------------------------------------------------------------------------
// Feature cache: "<cache_dir>/<track_id>.sec", little-endian
//   "AVSE" | u32 schema_version=1 | u32 dim | u32 n_seconds | dim*n_seconds float32 (column-major)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFeatureCacheVersion = 1;

inline std::filesystem::path feature_cache_path(const std::filesystem::path& dir, const std::string& track_id) {
  return dir / (track_id + ".sec");
}

inline void save_second_embeddings(const std::filesystem::path& path, const SecondEmbeddingSeq& seq) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorKind::data, "cannot write " + path.string());
  const std::uint32_t hdr[3] = {kFeatureCacheVersion, static_cast<std::uint32_t>(seq.vectors.rows()),
                                static_cast<std::uint32_t>(seq.vectors.cols())};
  os.write("AVSE", 4);
  os.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
  os.write(reinterpret_cast<const char*>(seq.vectors.data()),
           static_cast<std::streamsize>(seq.vectors.size() * sizeof(float)));
}

inline SecondEmbeddingSeq load_second_embeddings(const std::filesystem::path& path, std::string track_id = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::data, path.string() + ": feature cache missing");
  char magic[4];
  std::uint32_t hdr[3];
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(hdr), sizeof hdr);
  if (!is || std::memcmp(magic, "AVSE", 4) != 0) fail(ErrorKind::data, path.string() + ": bad feature cache header");
  if (hdr[0] != kFeatureCacheVersion)
    fail(ErrorKind::version, path.string() + ": feature cache schema_version " + std::to_string(hdr[0]));
  SecondEmbeddingSeq seq;
  seq.track_id = track_id.empty() ? path.stem().string() : std::move(track_id);
  seq.vectors.resize(hdr[1], hdr[2]);
  is.read(reinterpret_cast<char*>(seq.vectors.data()), static_cast<std::streamsize>(seq.vectors.size() * sizeof(float)));
  if (!is) fail(ErrorKind::data, path.string() + ": truncated feature cache");
  return seq;
}

}  // namespace avcon
