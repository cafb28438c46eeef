#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "avcon/audio_io.hpp"
#include "avcon/error.hpp"
#include "avcon/features.hpp"
#include "avcon/nn/layers.hpp"
#include "avcon/nn/lstm.hpp"

namespace avcon {

inline constexpr int kEmbeddingDim = 512;

// ---------------------------------------------------------------------------
// SampleCNN configuration and resolution calculus
// ---------------------------------------------------------------------------

struct SampleCnnConfig {
  int first_kernel = 5;  // also the first-layer stride
  int n_blocks = 9;
  int pool_size = 3;
  std::vector<int> channels{128, 128, 128, 256, 256, 256, 256, 256, 512};
  int out_dim = kEmbeddingDim;
  int sample_rate_hz = kSampleRate;

  std::size_t required_input_samples() const {
    std::size_t n = static_cast<std::size_t>(first_kernel);
    for (int i = 0; i < n_blocks; ++i) n *= static_cast<std::size_t>(pool_size);
    return n;
  }
  double duration_s() const { return static_cast<double>(required_input_samples()) / sample_rate_hz; }

  void validate() const {
    if (first_kernel < 1) fail(ErrorKind::config, "first_kernel must be >= 1");
    if (n_blocks < 1) fail(ErrorKind::config, "n_blocks must be >= 1");
    if (pool_size < 2) fail(ErrorKind::config, "pool_size must be >= 2");
    if (static_cast<int>(channels.size()) != n_blocks)
      fail(ErrorKind::config, "channel schedule has " + std::to_string(channels.size()) + " entries, expected " +
                                  std::to_string(n_blocks));
    for (int c : channels)
      if (c < 1) fail(ErrorKind::config, "channel counts must be positive");
    if (channels.back() != out_dim) fail(ErrorKind::config, "last channel count must equal out_dim");
    if (out_dim != kEmbeddingDim) fail(ErrorKind::config, "encoder out_dim must be 512");
  }

  // Same schedule with every channel count scaled by `factor`, last stage kept at 512.
  SampleCnnConfig with_width(double factor) const {
    SampleCnnConfig c = *this;
    for (std::size_t i = 0; i + 1 < c.channels.size(); ++i)
      c.channels[i] = std::max(1, static_cast<int>(std::lround(c.channels[i] * factor)));
    return c;
  }
};

struct Resolution {
  int first_kernel = 0;
  std::size_t samples = 0;
  double duration_s = 0.0;
};

inline Resolution resolution_calculus(const SampleCnnConfig& cfg) {
  return {cfg.first_kernel, cfg.required_input_samples(), cfg.duration_s()};
}

inline Resolution resolution_for_kernel(int first_kernel, SampleCnnConfig base = {}) {
  base.first_kernel = first_kernel;
  return resolution_calculus(base);
}

// Conv weights + conv bias + normalisation scale/shift.
inline std::int64_t conv_block_parameters(std::int64_t in_ch, std::int64_t out_ch, std::int64_t kernel) {
  return kernel * in_ch * out_ch + out_ch + 2 * out_ch;
}

// Closed-form trainable-parameter count: strided stem, n_blocks conv blocks,
// then the 3-tap output layer at out_dim.
inline std::int64_t count_parameters(const SampleCnnConfig& cfg) {
  cfg.validate();
  std::int64_t n = conv_block_parameters(1, cfg.channels.front(), cfg.first_kernel);
  std::int64_t prev = cfg.channels.front();
  for (int c : cfg.channels) {
    n += conv_block_parameters(prev, c, 3);
    prev = c;
  }
  n += conv_block_parameters(cfg.out_dim, cfg.out_dim, 3);
  return n;
}

template <class T>
std::int64_t count_trainable(const nn::ParamList<T>& params) {
  std::int64_t n = 0;
  for (const auto* p : params)
    if (!p->buffer) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------
// SampleCNN encoder
// ---------------------------------------------------------------------------

template <class T>
class SampleCnn {
 public:
  using Mat = nn::Mat<T>;

  SampleCnn() = default;
  SampleCnn(const SampleCnnConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x5a3b1ec0ULL));
    stages_.push_back(make_stage("encoder.stem", 1, cfg_.channels.front(), cfg_.first_kernel, cfg_.first_kernel, 0,
                                 false, 1, rng));
    int prev = cfg_.channels.front();
    for (int b = 0; b < cfg_.n_blocks; ++b) {
      stages_.push_back(make_stage("encoder.block" + std::to_string(b + 1), prev, cfg_.channels[static_cast<std::size_t>(b)],
                                   3, 1, 1, true, b + 1, rng));
      prev = cfg_.channels[static_cast<std::size_t>(b)];
    }
    stages_.push_back(make_stage("encoder.output", cfg_.out_dim, cfg_.out_dim, 3, 1, 1, false, cfg_.n_blocks, rng));
  }

  const SampleCnnConfig& config() const { return cfg_; }
  std::size_t input_samples() const { return cfg_.required_input_samples(); }

  static Mat to_input(const AudioWaveform& w) {
    Mat x(1, static_cast<Eigen::Index>(w.samples.size()));
    for (std::size_t i = 0; i < w.samples.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = static_cast<T>(w.samples[i]);
    return x;
  }

  // Batch of (1 x required_input_samples) waveforms -> (512 x batch) embeddings.
  Mat forward(const std::vector<Mat>& batch, bool training, bool keep_cache) {
    if (batch.empty()) fail(ErrorKind::invalid_input, "empty encoder batch");
    for (const auto& x : batch)
      if (x.rows() != 1 || static_cast<std::size_t>(x.cols()) != input_samples())
        fail(ErrorKind::shape, "encoder expects " + std::to_string(input_samples()) + " samples, got " +
                                   std::to_string(x.cols()));
    const int first_cached = keep_cache ? first_trainable_stage() : static_cast<int>(stages_.size());
    std::vector<Mat> act = batch;
    for (std::size_t s = 0; s < stages_.size(); ++s)
      act = stages_[s].forward(std::move(act), training, static_cast<int>(s) >= first_cached);
    Mat out(cfg_.out_dim, static_cast<Eigen::Index>(act.size()));
    for (std::size_t i = 0; i < act.size(); ++i) {
      if (act[i].cols() != 1) fail(ErrorKind::shape, "encoder did not collapse the temporal axis");
      out.col(static_cast<Eigen::Index>(i)) = act[i].col(0);
    }
    return out;
  }

  Mat forward(const AudioWaveform& w) { return forward(std::vector<Mat>{to_input(w)}, false, false); }

  // Backward from d(embedding) (512 x batch); stops at the first trainable stage.
  void backward(const Mat& d_out) {
    const int first = first_trainable_stage();
    std::vector<Mat> d(static_cast<std::size_t>(d_out.cols()));
    for (Eigen::Index i = 0; i < d_out.cols(); ++i) d[static_cast<std::size_t>(i)] = d_out.col(i);
    for (int s = static_cast<int>(stages_.size()) - 1; s >= first; --s)
      d = stages_[static_cast<std::size_t>(s)].backward(d, s > first);
  }

  // Blocks 1..n (the stem travels with block 1, the output layer with the last
  // block) stop receiving updates and keep their normalisation statistics.
  void freeze_blocks(int n) {
    if (n < 0 || n > cfg_.n_blocks)
      fail(ErrorKind::invalid_input, "freeze_blocks: n must be in [0, " + std::to_string(cfg_.n_blocks) + "]");
    frozen_blocks_ = n;
    for (auto& st : stages_) st.set_frozen(st.group <= n);
  }
  int frozen_blocks() const { return frozen_blocks_; }

  void collect(nn::ParamList<T>& out) {
    for (auto& st : stages_) {
      st.conv.collect(out);
      st.bn.collect(out);
    }
  }
  nn::ParamList<T> parameters() {
    nn::ParamList<T> out;
    collect(out);
    return out;
  }

  // Parameters belonging to blocks 1..n (stem included with block 1).
  nn::ParamList<T> block_parameters(int first_group, int last_group) {
    nn::ParamList<T> out;
    for (auto& st : stages_)
      if (st.group >= first_group && st.group <= last_group) {
        st.conv.collect(out);
        st.bn.collect(out);
      }
    return out;
  }

 private:
  struct Stage {
    nn::Conv1d<T> conv;
    nn::BatchNorm1d<T> bn;
    bool pool = false;
    int pool_size = 3;
    int group = 0;
    bool frozen = false;
    // backward cache
    std::vector<Mat> inputs, x_hat;
    std::vector<std::vector<std::uint8_t>> argmax;
    std::vector<Eigen::Index> pre_pool_len;

    void set_frozen(bool f) {
      frozen = f;
      conv.weight.trainable = conv.bias.trainable = !f;
      bn.set_frozen(f);
    }

    std::vector<Mat> forward(std::vector<Mat> x, bool training, bool cache) {
      std::vector<Mat> conv_out(x.size());
      for (std::size_t i = 0; i < x.size(); ++i) conv_out[i] = conv.forward(x[i]);
      std::vector<Mat> xh;
      std::vector<Mat> y = bn.forward(conv_out, training, cache ? &xh : nullptr);
      conv_out.clear();
      std::vector<Mat> out(y.size());
      if (cache) {
        argmax.assign(y.size(), {});
        pre_pool_len.assign(y.size(), 0);
      }
      for (std::size_t i = 0; i < y.size(); ++i) {
        Mat r = nn::relu<T>(y[i]);
        if (pool) {
          if (cache) pre_pool_len[i] = r.cols();
          out[i] = nn::max_pool<T>(r, pool_size, cache ? &argmax[i] : nullptr);
        } else {
          out[i] = std::move(r);
        }
      }
      if (cache) {
        inputs = std::move(x);
        x_hat = std::move(xh);
      } else {
        inputs.clear();
        x_hat.clear();
      }
      return out;
    }

    std::vector<Mat> backward(const std::vector<Mat>& d_out, bool need_dx) {
      if (inputs.empty()) fail(ErrorKind::invalid_input, "backward without a cached forward pass");
      std::vector<Mat> d_y(d_out.size());
      for (std::size_t i = 0; i < d_out.size(); ++i) {
        Mat d_r = pool ? nn::max_pool_backward<T>(d_out[i], argmax[i], pool_size, pre_pool_len[i]) : d_out[i];
        const Mat y = ((x_hat[i].array().colwise() * bn.gamma.value.col(0).array()).colwise() +
                       bn.beta.value.col(0).array())
                          .matrix();
        d_y[i] = nn::relu_backward<T>(y, d_r);
      }
      std::vector<Mat> d_conv = bn.backward(x_hat, d_y, true);
      std::vector<Mat> dx(need_dx ? d_out.size() : 0);
      for (std::size_t i = 0; i < d_conv.size(); ++i) conv.backward(inputs[i], d_conv[i], need_dx ? &dx[i] : nullptr);
      inputs.clear();
      x_hat.clear();
      argmax.clear();
      return dx;
    }
  };

  static Stage make_stage(const std::string& name, int in, int out, int kernel, int stride, int padding, bool pool,
                          int group, Rng& rng) {
    Stage s;
    s.conv = nn::Conv1d<T>(name + ".conv", in, out, kernel, stride, padding, rng);
    s.bn = nn::BatchNorm1d<T>(name + ".bn", out);
    s.pool = pool;
    s.group = group;
    return s;
  }

  int first_trainable_stage() const {
    for (std::size_t s = 0; s < stages_.size(); ++s)
      if (!stages_[s].frozen) return static_cast<int>(s);
    return static_cast<int>(stages_.size());
  }

  SampleCnnConfig cfg_;
  std::vector<Stage> stages_;
  int frozen_blocks_ = 0;
};

// ---------------------------------------------------------------------------
// Video context encoder: 2-layer LSTM over per-second vectors, readout through
// one fully connected layer to 512-D.
// ---------------------------------------------------------------------------

struct VideoEncoderConfig {
  int input_dim = kContextDim;
  int n_layers = 2;
  int hidden_dim = 256;
  int out_dim = kEmbeddingDim;
  bool mean_readout = false;  // default: final hidden state

  void validate() const {
    if (input_dim != kContextDim) fail(ErrorKind::config, "video encoder input_dim must be 512");
    if (n_layers != 2) fail(ErrorKind::config, "video encoder must have 2 recurrent layers");
    if (out_dim != kEmbeddingDim) fail(ErrorKind::config, "video encoder out_dim must be 512");
    if (hidden_dim < 1) fail(ErrorKind::config, "video encoder hidden_dim must be positive");
  }
};

template <class T>
class VideoEncoder {
 public:
  using Mat = nn::Mat<T>;

  VideoEncoder() = default;
  VideoEncoder(const VideoEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x71de0ULL));
    l1_ = nn::LstmLayer<T>("video.lstm1", cfg_.input_dim, cfg_.hidden_dim, rng);
    l2_ = nn::LstmLayer<T>("video.lstm2", cfg_.hidden_dim, cfg_.hidden_dim, rng);
    fc_ = nn::Linear<T>("video.fc", cfg_.hidden_dim, cfg_.out_dim, rng);
  }

  const VideoEncoderConfig& config() const { return cfg_; }

  // Each element is one (512 x seconds) slice; all slices must share a length.
  Mat forward(const std::vector<Mat>& slices, bool keep_cache) {
    if (slices.empty()) fail(ErrorKind::invalid_input, "empty video batch");
    const Eigen::Index len = slices.front().cols();
    for (const auto& s : slices) {
      if (s.cols() == 0) fail(ErrorKind::invalid_input, "empty video slice");
      if (s.cols() != len) fail(ErrorKind::shape, "video slices in one batch must share a length");
      if (s.rows() != cfg_.input_dim) fail(ErrorKind::shape, "video slice dimension must be 512");
    }
    std::vector<Mat> steps(static_cast<std::size_t>(len), Mat(cfg_.input_dim, static_cast<Eigen::Index>(slices.size())));
    for (std::size_t b = 0; b < slices.size(); ++b)
      for (Eigen::Index t = 0; t < len; ++t) steps[static_cast<std::size_t>(t)].col(static_cast<Eigen::Index>(b)) = slices[b].col(t);
    const auto h1 = l1_.forward(steps, keep_cache ? &c1_ : nullptr);
    const auto h2 = l2_.forward(h1, keep_cache ? &c2_ : nullptr);
    Mat read = readout(h2);
    if (keep_cache) read_ = read;
    return fc_.forward(read);
  }

  Mat forward(const SecondEmbeddingSeq& seq) { return forward(std::vector<Mat>{seq.vectors.cast<T>()}, false); }

  void backward(const Mat& d_out) {
    const Mat d_read = fc_.backward(read_, d_out, true);
    const std::size_t steps = c2_.x.size();
    std::vector<Mat> dh2(steps, Mat::Zero(d_read.rows(), d_read.cols()));
    if (cfg_.mean_readout) {
      for (auto& d : dh2) d = d_read / static_cast<T>(steps);
    } else {
      dh2.back() = d_read;
    }
    const auto dh1 = l2_.backward(c2_, dh2, true);
    l1_.backward(c1_, dh1, false);
  }

  void collect(nn::ParamList<T>& out) {
    l1_.collect(out);
    l2_.collect(out);
    fc_.collect(out);
  }

 private:
  Mat readout(const std::vector<Mat>& hs) const {
    if (!cfg_.mean_readout) return hs.back();
    Mat acc = Mat::Zero(hs.front().rows(), hs.front().cols());
    for (const auto& h : hs) acc += h;
    return acc / static_cast<T>(hs.size());
  }

  VideoEncoderConfig cfg_;
  nn::LstmLayer<T> l1_, l2_;
  nn::Linear<T> fc_;
  typename nn::LstmLayer<T>::Cache c1_, c2_;
  Mat read_;
};

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

struct ProjectorConfig {
  int in_dim = kEmbeddingDim;
  int hidden_dim = kEmbeddingDim;
  int proj_dim = 128;

  void validate() const {
    if (!(proj_dim > 0 && proj_dim < in_dim)) fail(ErrorKind::config, "proj_dim must be in (0, in_dim)");
  }
};

// affine -> ReLU -> affine into the contrastive space.
template <class T>
class Projector {
 public:
  using Mat = nn::Mat<T>;

  Projector() = default;
  Projector(const std::string& name, const ProjectorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, hash_string(name)));
    fc1_ = nn::Linear<T>(name + ".fc1", cfg_.in_dim, cfg_.hidden_dim, rng);
    fc2_ = nn::Linear<T>(name + ".fc2", cfg_.hidden_dim, cfg_.proj_dim, rng);
  }

  Mat forward(const Mat& x, bool keep_cache = false) {
    Mat pre = fc1_.forward(x);
    Mat h = nn::relu<T>(pre);
    Mat out = fc2_.forward(h);
    if (keep_cache) {
      x_ = x;
      pre_ = std::move(pre);
      h_ = std::move(h);
    }
    return out;
  }

  Mat backward(const Mat& d_out) {
    const Mat dh = fc2_.backward(h_, d_out);
    return fc1_.backward(x_, nn::relu_backward<T>(pre_, dh));
  }

  void zero_final_layer() {
    fc2_.weight.value.setZero();
    fc2_.bias.value.setZero();
  }

  const ProjectorConfig& config() const { return cfg_; }
  void collect(nn::ParamList<T>& out) {
    fc1_.collect(out);
    fc2_.collect(out);
  }

 private:
  ProjectorConfig cfg_;
  nn::Linear<T> fc1_, fc2_;
  Mat x_, pre_, h_;
};

struct TagHeadConfig {
  int in_dim = kEmbeddingDim;
  int hidden_dim = 256;
  int n_tags = 50;

  void validate() const {
    if (n_tags < 1) fail(ErrorKind::config, "n_tags must be positive");
    if (hidden_dim < 1) fail(ErrorKind::config, "tag head hidden_dim must be positive");
  }
};

// Two affine layers with one ReLU; per-tag sigmoid scores.
template <class T>
class TagHead {
 public:
  using Mat = nn::Mat<T>;

  TagHead() = default;
  TagHead(const TagHeadConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x7a9ULL));
    fc1_ = nn::Linear<T>("head.fc1", cfg_.in_dim, cfg_.hidden_dim, rng);
    fc2_ = nn::Linear<T>("head.fc2", cfg_.hidden_dim, cfg_.n_tags, rng);
  }

  Mat logits(const Mat& x, bool keep_cache = false) {
    Mat pre = fc1_.forward(x);
    Mat h = nn::relu<T>(pre);
    Mat out = fc2_.forward(h);
    if (keep_cache) {
      x_ = x;
      pre_ = std::move(pre);
      h_ = std::move(h);
    }
    return out;
  }

  // Scores are kept strictly inside (0, 1) even where the sigmoid saturates.
  Mat forward(const Mat& x) {
    return logits(x).unaryExpr([](T v) {
      constexpr T lo = std::numeric_limits<T>::epsilon();
      return std::clamp(nn::sigmoid(v), lo, T(1) - lo);
    });
  }

  // Mean per-tag binary cross-entropy over the batch; gradients accumulated.
  T train_step_loss(const Mat& x, const Mat& targets) {
    const Mat z = logits(x, true);
    const T n = static_cast<T>(z.size());
    T loss = 0;
    Mat dz(z.rows(), z.cols());
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const T v = z(i, j), y = targets(i, j);
        loss += std::max(v, T(0)) - v * y + std::log1p(std::exp(-std::abs(v)));
        dz(i, j) = (nn::sigmoid(v) - y) / n;
      }
    const Mat dh = fc2_.backward(h_, dz);
    fc1_.backward(x_, nn::relu_backward<T>(pre_, dh), false);
    return loss / n;
  }

  T loss(const Mat& x, const Mat& targets) {
    const Mat z = logits(x);
    T acc = 0;
    for (Eigen::Index j = 0; j < z.cols(); ++j)
      for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const T v = z(i, j);
        acc += std::max(v, T(0)) - v * targets(i, j) + std::log1p(std::exp(-std::abs(v)));
      }
    return acc / static_cast<T>(z.size());
  }

  void set_trainable(bool t) {
    fc1_.set_trainable(t);
    fc2_.set_trainable(t);
  }

  const TagHeadConfig& config() const { return cfg_; }
  void collect(nn::ParamList<T>& out) {
    fc1_.collect(out);
    fc2_.collect(out);
  }

 private:
  TagHeadConfig cfg_;
  nn::Linear<T> fc1_, fc2_;
  Mat x_, pre_, h_;
};

}  // namespace avcon
