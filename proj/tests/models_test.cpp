#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "avcon/models.hpp"
#include "avcon/nn/adam.hpp"

namespace avcon {
namespace {

using MatD = nn::Mat<double>;
using MatF = nn::Mat<float>;

// A short encoder for gradient checks: k * 3^3 samples.
SampleCnnConfig tiny_config(int k = 2) {
  SampleCnnConfig c;
  c.first_kernel = k;
  c.n_blocks = 3;
  c.channels = {3, 4, 512};
  return c;
}

// Narrow 9-block encoder used for the shape and freezing tests.
SampleCnnConfig narrow_config(int k = 1) {
  SampleCnnConfig c;
  c.first_kernel = k;
  c.channels = {8, 8, 8, 16, 16, 16, 16, 16, 512};
  return c;
}

template <class T>
nn::Mat<T> random_waveform(std::size_t n, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  nn::Mat<T> x(1, static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < x.cols(); ++i) x(0, i) = static_cast<T>(u(rng));
  return x;
}

TEST(Resolution, KernelGrid) {
  EXPECT_EQ(resolution_for_kernel(3).samples, 59049u);
  EXPECT_NEAR(resolution_for_kernel(3).duration_s, 3.6906, 1e-4);
  EXPECT_EQ(resolution_for_kernel(5).samples, 98415u);
  EXPECT_NEAR(resolution_for_kernel(5).duration_s, 6.1509, 1e-4);
  EXPECT_EQ(resolution_for_kernel(1).samples, 19683u);
  EXPECT_NEAR(resolution_for_kernel(1).duration_s, 1.2302, 1e-4);
}

TEST(SampleCnn, NarrowEncoderAcceptsExactLengthOnly) {
  for (int k : {1, 2}) {
    SampleCnn<float> enc(narrow_config(k), 1);
    std::mt19937 rng(k);
    const auto n = enc.input_samples();
    const MatF out = enc.forward({random_waveform<float>(n, rng)}, false, false);
    EXPECT_EQ(out.rows(), 512);
    EXPECT_EQ(out.cols(), 1);
    EXPECT_THROW(enc.forward({random_waveform<float>(n - 1, rng)}, false, false), Error);
    EXPECT_THROW(enc.forward({random_waveform<float>(n + 1, rng)}, false, false), Error);
  }
}

TEST(SampleCnn, DefaultEncoderAtSixPointOneFiveSeconds) {
  SampleCnn<float> enc(SampleCnnConfig{}, 3);
  std::mt19937 rng(3);
  EXPECT_EQ(enc.input_samples(), 98415u);
  const MatF out = enc.forward({random_waveform<float>(98415, rng)}, false, false);
  EXPECT_EQ(out.rows(), 512);
  try {
    enc.forward({random_waveform<float>(98414, rng)}, false, false);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::shape);
    EXPECT_NE(std::string(e.what()).find("98415"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("98414"), std::string::npos);
  }
}

TEST(SampleCnn, ZeroInputIsFinite) {
  SampleCnn<float> enc(narrow_config(), 4);
  const MatF zero = MatF::Zero(1, static_cast<Eigen::Index>(enc.input_samples()));
  EXPECT_TRUE(enc.forward({zero}, false, false).allFinite());
  EXPECT_TRUE(enc.forward({zero, zero}, true, false).allFinite());
}

TEST(SampleCnn, InferenceIsDeterministic) {
  SampleCnn<float> enc(narrow_config(), 4);
  std::mt19937 rng(8);
  const MatF x = random_waveform<float>(enc.input_samples(), rng);
  EXPECT_EQ(enc.forward({x}, false, false), enc.forward({x}, false, false));
}

TEST(ParameterCount, DefaultBudget) {
  const SampleCnnConfig cfg;
  const auto closed = count_parameters(cfg);
  SampleCnn<float> enc(cfg, 0);
  EXPECT_EQ(closed, count_trainable(enc.parameters()));
  EXPECT_NEAR(static_cast<double>(closed), 2.6e6, 0.15 * 2.6e6);
}

TEST(ParameterCount, DoublingChannelsRoughlyQuadruples) {
  SampleCnnConfig base;
  base.channels = {64, 64, 64, 128, 128, 128, 128, 128, 256};
  base.out_dim = 256;
  // out_dim is pinned to 512 for real encoders, so compare conv-dominated sums directly.
  std::int64_t narrow = 0, wide = 0;
  std::int64_t prev = 64;
  for (int c : base.channels) {
    narrow += conv_block_parameters(prev, c, 3);
    wide += conv_block_parameters(2 * prev, 2 * c, 3);
    prev = c;
  }
  EXPECT_NEAR(static_cast<double>(wide) / narrow, 4.0, 0.05);

  SampleCnnConfig half = SampleCnnConfig{}.with_width(0.5);
  const auto full_blocks = count_parameters(SampleCnnConfig{});
  EXPECT_LT(count_parameters(half), full_blocks);
}

TEST(ParameterCount, SingleBlockByHand) {
  EXPECT_EQ(conv_block_parameters(1, 1, 3), 3 + 1 + 2);
  SampleCnnConfig c = tiny_config();
  SampleCnn<float> enc(c, 0);
  EXPECT_EQ(count_parameters(c), count_trainable(enc.parameters()));
}

TEST(ParameterCount, FirstKernelOnlyAffectsStem) {
  SampleCnnConfig a, b;
  a.first_kernel = 3;
  b.first_kernel = 7;
  EXPECT_EQ(count_parameters(b) - count_parameters(a), 4 * 1 * a.channels.front());
}

// Finite-difference check of SampleCnn backward in double precision.
TEST(SampleCnn, GradientMatchesFiniteDifferences) {
  SampleCnn<double> enc(tiny_config(2), 11);
  std::mt19937 rng(11);
  const auto n = enc.input_samples();
  const std::vector<MatD> batch{random_waveform<double>(n, rng), random_waveform<double>(n, rng),
                                random_waveform<double>(n, rng)};
  const MatD w = MatD::Random(512, 3);
  auto objective = [&]() { return (enc.forward(batch, true, false).array() * w.array()).sum(); };

  auto params = enc.parameters();
  for (auto* p : params) p->zero_grad();
  enc.forward(batch, true, true);
  enc.backward(w);

  int checked = 0;
  for (auto* p : params) {
    if (p->buffer) continue;
    for (int probe = 0; probe < 3; ++probe) {
      const Eigen::Index idx = static_cast<Eigen::Index>(rng() % static_cast<unsigned>(p->value.size()));
      const double orig = p->value.data()[idx];
      const double h = 1e-6;
      p->value.data()[idx] = orig + h;
      const double up = objective();
      p->value.data()[idx] = orig - h;
      const double down = objective();
      p->value.data()[idx] = orig;
      const double fd = (up - down) / (2 * h);
      const double an = p->grad.data()[idx];
      EXPECT_NEAR(an, fd, 1e-5 * std::max(1.0, std::abs(fd))) << p->name << "[" << idx << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 20);
}

TEST(VideoEncoder, ShapesAndDeterminism) {
  VideoEncoder<float> enc(VideoEncoderConfig{}, 2);
  const MatF seven = MatF::Random(512, 7);
  const MatF three = MatF::Random(512, 3);
  EXPECT_EQ(enc.forward(std::vector<MatF>{seven}, false).rows(), 512);
  EXPECT_EQ(enc.forward(std::vector<MatF>{three}, false).rows(), 512);
  EXPECT_EQ(enc.forward(std::vector<MatF>{seven}, false), enc.forward(std::vector<MatF>{seven}, false));
  EXPECT_THROW(enc.forward(std::vector<MatF>{MatF(512, 0)}, false), Error);
}

TEST(VideoEncoder, GradientMatchesFiniteDifferences) {
  for (bool mean_readout : {false, true}) {
    VideoEncoderConfig cfg;
    cfg.hidden_dim = 5;
    cfg.mean_readout = mean_readout;
    VideoEncoder<double> enc(cfg, 9);
    const std::vector<MatD> batch{MatD::Random(512, 4), MatD::Random(512, 4)};
    const MatD w = MatD::Random(512, 2);
    auto objective = [&]() { return (enc.forward(batch, false).array() * w.array()).sum(); };
    nn::ParamList<double> params;
    enc.collect(params);
    for (auto* p : params) p->zero_grad();
    enc.forward(batch, true);
    enc.backward(w);
    std::mt19937 rng(2);
    for (auto* p : params)
      for (int probe = 0; probe < 4; ++probe) {
        const auto idx = static_cast<Eigen::Index>(rng() % static_cast<unsigned>(p->value.size()));
        const double orig = p->value.data()[idx];
        p->value.data()[idx] = orig + 1e-6;
        const double up = objective();
        p->value.data()[idx] = orig - 1e-6;
        const double down = objective();
        p->value.data()[idx] = orig;
        const double fd = (up - down) / 2e-6;
        EXPECT_NEAR(p->grad.data()[idx], fd, 1e-6 * std::max(1.0, std::abs(fd))) << p->name;
      }
  }
}

TEST(Projector, DimensionZeroAndDeterminism) {
  Projector<float> proj("proj", ProjectorConfig{}, 1);
  const MatF x = MatF::Random(512, 3);
  EXPECT_EQ(proj.forward(x).rows(), 128);
  EXPECT_EQ(proj.forward(x), proj.forward(x));
  proj.zero_final_layer();
  EXPECT_TRUE(proj.forward(MatF::Zero(512, 2)).isZero(0));
  ProjectorConfig bad;
  bad.proj_dim = 512;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Projector, GradientMatchesFiniteDifferences) {
  ProjectorConfig cfg;
  cfg.hidden_dim = 16;
  cfg.proj_dim = 6;
  Projector<double> proj("proj", cfg, 3);
  const MatD x = MatD::Random(512, 4);
  const MatD w = MatD::Random(6, 4);
  nn::ParamList<double> params;
  proj.collect(params);
  for (auto* p : params) p->zero_grad();
  proj.forward(x, true);
  const MatD dx = proj.backward(w);
  auto objective = [&](const MatD& in) { return (proj.forward(in).array() * w.array()).sum(); };
  for (int probe = 0; probe < 10; ++probe) {
    MatD xp = x, xm = x;
    xp(probe * 7, probe % 4) += 1e-6;
    xm(probe * 7, probe % 4) -= 1e-6;
    EXPECT_NEAR(dx(probe * 7, probe % 4), (objective(xp) - objective(xm)) / 2e-6, 1e-6);
  }
}

TEST(TagHead, OutputCountsAndRange) {
  for (int n : {50, 57}) {
    TagHeadConfig cfg;
    cfg.n_tags = n;
    TagHead<float> head(cfg, 1);
    const MatF scores = head.forward(MatF::Random(512, 4) * 1000.0f);
    EXPECT_EQ(scores.rows(), n);
    EXPECT_GT(scores.minCoeff(), 0.0f);
    EXPECT_LT(scores.maxCoeff(), 1.0f);
  }
}

TEST(TagHead, BceGradientMatchesFiniteDifferences) {
  TagHeadConfig cfg;
  cfg.hidden_dim = 8;
  cfg.n_tags = 4;
  TagHead<double> head(cfg, 5);
  const MatD x = MatD::Random(512, 3);
  MatD y(4, 3);
  y << 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0;
  nn::ParamList<double> params;
  head.collect(params);
  for (auto* p : params) p->zero_grad();
  const double loss = head.train_step_loss(x, y);
  EXPECT_NEAR(loss, head.loss(x, y), 1e-12);
  std::mt19937 rng(4);
  for (auto* p : params)
    for (int probe = 0; probe < 5; ++probe) {
      const auto idx = static_cast<Eigen::Index>(rng() % static_cast<unsigned>(p->value.size()));
      const double orig = p->value.data()[idx];
      p->value.data()[idx] = orig + 1e-6;
      const double up = head.loss(x, y);
      p->value.data()[idx] = orig - 1e-6;
      const double down = head.loss(x, y);
      p->value.data()[idx] = orig;
      EXPECT_NEAR(p->grad.data()[idx], (up - down) / 2e-6, 1e-7) << p->name;
    }
}

// One optimisation step on a narrow encoder with the given freeze depth.
struct StepResult {
  std::vector<std::uint64_t> before, after;
  std::vector<std::string> names;
};

StepResult step_with_freeze(int n_frozen, bool train_mode = true) {
  SampleCnn<float> enc(narrow_config(), 21);
  enc.freeze_blocks(n_frozen);
  std::mt19937 rng(5);
  const auto n = enc.input_samples();
  const std::vector<MatF> batch{random_waveform<float>(n, rng), random_waveform<float>(n, rng)};
  auto params = enc.parameters();
  StepResult r;
  for (auto* p : params) {
    r.names.push_back(p->name);
    r.before.push_back(nn::hash_values(p->value));
    p->zero_grad();
  }
  const MatF out = enc.forward(batch, train_mode, true);
  enc.backward(MatF::Ones(out.rows(), out.cols()));
  nn::Adam<float> opt;
  opt.step(params);
  for (auto* p : params) r.after.push_back(nn::hash_values(p->value));
  return r;
}

bool in_frozen_group(const std::string& name, int n) {
  if (name.rfind("encoder.stem", 0) == 0) return n >= 1;
  if (name.rfind("encoder.output", 0) == 0) return n >= 9;
  const int block = std::stoi(name.substr(std::string("encoder.block").size()));
  return block <= n;
}

TEST(FreezeBlocks, FourFrozenBlocksAreBitwiseUnchanged) {
  const auto r = step_with_freeze(4);
  int changed = 0;
  for (std::size_t i = 0; i < r.names.size(); ++i) {
    if (in_frozen_group(r.names[i], 4)) {
      EXPECT_EQ(r.before[i], r.after[i]) << r.names[i];
    } else if (r.before[i] != r.after[i]) {
      ++changed;
    }
  }
  EXPECT_GT(changed, 10);
}

TEST(FreezeBlocks, NoneFrozenUpdatesEverything) {
  const auto r = step_with_freeze(0);
  for (std::size_t i = 0; i < r.names.size(); ++i)
    EXPECT_NE(r.before[i], r.after[i]) << r.names[i];
}

TEST(FreezeBlocks, FullyFrozenNeverChanges) {
  const auto r = step_with_freeze(9);
  for (std::size_t i = 0; i < r.names.size(); ++i) EXPECT_EQ(r.before[i], r.after[i]) << r.names[i];
}

TEST(FreezeBlocks, RejectsOutOfRange) {
  SampleCnn<float> enc(narrow_config(), 1);
  EXPECT_THROW(enc.freeze_blocks(-1), Error);
  EXPECT_THROW(enc.freeze_blocks(10), Error);
}

}  // namespace
}  // namespace avcon
