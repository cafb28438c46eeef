#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "avcon/error.hpp"
#include "avcon/nn/tensor.hpp"

namespace avcon::nn {

// 1-D convolution on a (channels x length) signal, weight laid out as
// (out_channels x kernel*in_channels) with tap-major rows.
template <class T>
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(const std::string& name, int in_ch, int out_ch, int kernel, int stride, int padding, Rng& rng)
      : in_ch_(in_ch), out_ch_(out_ch), kernel_(kernel), stride_(stride), padding_(padding),
        weight(name + ".weight", out_ch, static_cast<Eigen::Index>(kernel) * in_ch),
        bias(name + ".bias", out_ch, 1) {
    init_uniform_fan_in(weight.value, weight.value.cols(), rng);
    init_uniform_fan_in(bias.value, weight.value.cols(), rng);
  }

  Eigen::Index output_length(Eigen::Index len) const { return (len + 2 * padding_ - kernel_) / stride_ + 1; }

  Mat<T> forward(const Mat<T>& x) const {
    const Mat<T> cols = im2col(x);
    Mat<T> y = weight.value * cols;
    y.colwise() += bias.value.col(0);
    return y;
  }

  // Accumulates parameter gradients; writes the input gradient when dx != nullptr.
  void backward(const Mat<T>& x, const Mat<T>& dy, Mat<T>* dx) {
    const Mat<T> cols = im2col(x);
    if (weight.updatable()) weight.grad.noalias() += dy * cols.transpose();
    if (bias.updatable()) bias.grad.col(0) += dy.rowwise().sum();
    if (dx) {
      const Mat<T> dcols = weight.value.transpose() * dy;
      *dx = Mat<T>::Zero(x.rows(), x.cols());
      for (Eigen::Index t = 0; t < dcols.cols(); ++t)
        for (int j = 0; j < kernel_; ++j) {
          const Eigen::Index src = t * stride_ - padding_ + j;
          if (src < 0 || src >= x.cols()) continue;
          dx->col(src) += dcols.block(static_cast<Eigen::Index>(j) * in_ch_, t, in_ch_, 1);
        }
    }
  }

  Mat<T> im2col(const Mat<T>& x) const {
    if (x.rows() != in_ch_) fail(ErrorKind::shape, "conv input has " + std::to_string(x.rows()) + " channels, expected " +
                                                       std::to_string(in_ch_));
    const Eigen::Index out_len = output_length(x.cols());
    if (out_len <= 0) fail(ErrorKind::shape, "conv input too short");
    Mat<T> cols(static_cast<Eigen::Index>(kernel_) * in_ch_, out_len);
    for (Eigen::Index t = 0; t < out_len; ++t)
      for (int j = 0; j < kernel_; ++j) {
        const Eigen::Index src = t * stride_ - padding_ + j;
        auto dst = cols.block(static_cast<Eigen::Index>(j) * in_ch_, t, in_ch_, 1);
        if (src < 0 || src >= x.cols()) dst.setZero();
        else dst = x.col(src);
      }
    return cols;
  }

  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

 private:
  int in_ch_ = 0, out_ch_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;

 public:
  Parameter<T> weight;
  Parameter<T> bias;
};

// Batch normalisation over (batch, length) per channel. When frozen, running
// statistics are used and not updated, whatever the training flag says.
template <class T>
class BatchNorm1d {
 public:
  BatchNorm1d() = default;
  BatchNorm1d(const std::string& name, int channels)
      : gamma(name + ".weight", channels, 1), beta(name + ".bias", channels, 1),
        running_mean(name + ".running_mean", channels, 1, true), running_var(name + ".running_var", channels, 1, true) {
    gamma.value.setOnes();
    running_var.value.setOnes();
  }

  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  bool uses_batch_stats(bool training) const { return training && !frozen_; }

  // Normalises the batch in place into x_hat and returns the affine output.
  std::vector<Mat<T>> forward(const std::vector<Mat<T>>& x, bool training, std::vector<Mat<T>>* x_hat_out) {
    const Eigen::Index c = gamma.value.rows();
    Vec<T> mean, inv_std;
    if (uses_batch_stats(training)) {
      Eigen::Matrix<double, Eigen::Dynamic, 1> sum = Eigen::Matrix<double, Eigen::Dynamic, 1>::Zero(c);
      Eigen::Matrix<double, Eigen::Dynamic, 1> sq = Eigen::Matrix<double, Eigen::Dynamic, 1>::Zero(c);
      double count = 0;
      for (const auto& xi : x) {
        sum += xi.template cast<double>().rowwise().sum();
        count += static_cast<double>(xi.cols());
      }
      const Eigen::Matrix<double, Eigen::Dynamic, 1> m = sum / count;
      for (const auto& xi : x) sq += (xi.template cast<double>().colwise() - m).array().square().matrix().rowwise().sum();
      const Eigen::Matrix<double, Eigen::Dynamic, 1> var = sq / count;
      mean = m.cast<T>();
      inv_std = (var.array() + kEps).rsqrt().matrix().cast<T>();
      const double unbiased = count > 1 ? count / (count - 1) : 1.0;
      running_mean.value.col(0) =
          ((1 - kMomentum) * running_mean.value.col(0).template cast<double>() + kMomentum * m).template cast<T>();
      running_var.value.col(0) =
          ((1 - kMomentum) * running_var.value.col(0).template cast<double>() + kMomentum * unbiased * var)
              .template cast<T>();
      batch_stats_ = true;
    } else {
      mean = running_mean.value.col(0);
      inv_std = (running_var.value.col(0).array() + static_cast<T>(kEps)).rsqrt().matrix();
      batch_stats_ = false;
    }
    inv_std_ = inv_std;
    std::vector<Mat<T>> y(x.size());
    if (x_hat_out) x_hat_out->resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      Mat<T> xh = ((x[i].colwise() - mean).array().colwise() * inv_std.array()).matrix();
      y[i] = ((xh.array().colwise() * gamma.value.col(0).array()).colwise() + beta.value.col(0).array()).matrix();
      if (x_hat_out) (*x_hat_out)[i] = std::move(xh);
    }
    return y;
  }

  // dy: gradient w.r.t. the affine output. Returns gradient w.r.t. input.
  std::vector<Mat<T>> backward(const std::vector<Mat<T>>& x_hat, const std::vector<Mat<T>>& dy, bool need_dx) {
    const Eigen::Index c = gamma.value.rows();
    Vec<T> sum_dy = Vec<T>::Zero(c), sum_dy_xhat = Vec<T>::Zero(c);
    T count = 0;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      sum_dy += dy[i].rowwise().sum();
      sum_dy_xhat += (dy[i].array() * x_hat[i].array()).matrix().rowwise().sum();
      count += static_cast<T>(dy[i].cols());
    }
    if (gamma.updatable()) gamma.grad.col(0) += sum_dy_xhat;
    if (beta.updatable()) beta.grad.col(0) += sum_dy;
    std::vector<Mat<T>> dx;
    if (!need_dx) return dx;
    dx.resize(dy.size());
    const Vec<T> scale = (gamma.value.col(0).array() * inv_std_.array()).matrix();
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (batch_stats_) {
        const Vec<T> mdy = sum_dy / count;
        const Vec<T> mdyx = sum_dy_xhat / count;
        Mat<T> t = dy[i].colwise() - mdy;
        t -= (x_hat[i].array().colwise() * mdyx.array()).matrix();
        dx[i] = (t.array().colwise() * scale.array()).matrix();
      } else {
        dx[i] = (dy[i].array().colwise() * scale.array()).matrix();
      }
    }
    return dx;
  }

  void set_frozen(bool f) {
    frozen_ = f;
    gamma.trainable = beta.trainable = !f;
  }
  bool frozen() const { return frozen_; }

  void collect(ParamList<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
    out.push_back(&running_mean);
    out.push_back(&running_var);
  }

  Parameter<T> gamma, beta, running_mean, running_var;

 private:
  bool frozen_ = false;
  bool batch_stats_ = false;
  Vec<T> inv_std_;
};

// Fully connected layer on column batches (features x batch).
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, Rng& rng)
      : weight(name + ".weight", out, in), bias(name + ".bias", out, 1) {
    init_uniform_fan_in(weight.value, in, rng);
    init_uniform_fan_in(bias.value, in, rng);
  }

  Mat<T> forward(const Mat<T>& x) const {
    if (x.rows() != weight.value.cols())
      fail(ErrorKind::shape, weight.name + ": input dim " + std::to_string(x.rows()) + ", expected " +
                                 std::to_string(weight.value.cols()));
    Mat<T> y = weight.value * x;
    y.colwise() += bias.value.col(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& x, const Mat<T>& dy, bool need_dx = true) {
    if (weight.updatable()) weight.grad.noalias() += dy * x.transpose();
    if (bias.updatable()) bias.grad.col(0) += dy.rowwise().sum();
    if (!need_dx) return {};
    return weight.value.transpose() * dy;
  }

  void set_trainable(bool t) { weight.trainable = bias.trainable = t; }
  int in_dim() const { return static_cast<int>(weight.value.cols()); }
  int out_dim() const { return static_cast<int>(weight.value.rows()); }

  void collect(ParamList<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Parameter<T> weight, bias;
};

template <class T>
Mat<T> relu(const Mat<T>& x) {
  return x.cwiseMax(T(0));
}

template <class T>
Mat<T> relu_backward(const Mat<T>& pre, const Mat<T>& dy) {
  return (pre.array() > T(0)).select(dy, T(0));
}

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// Non-overlapping max pooling along length; argmax offsets kept for backward.
template <class T>
Mat<T> max_pool(const Mat<T>& x, int pool, std::vector<std::uint8_t>* argmax) {
  const Eigen::Index out_len = x.cols() / pool;
  Mat<T> y(x.rows(), out_len);
  if (argmax) argmax->resize(static_cast<std::size_t>(x.rows() * out_len));
  for (Eigen::Index t = 0; t < out_len; ++t)
    for (Eigen::Index c = 0; c < x.rows(); ++c) {
      int best = 0;
      T v = x(c, t * pool);
      for (int j = 1; j < pool; ++j)
        if (x(c, t * pool + j) > v) {
          v = x(c, t * pool + j);
          best = j;
        }
      y(c, t) = v;
      if (argmax) (*argmax)[static_cast<std::size_t>(t * x.rows() + c)] = static_cast<std::uint8_t>(best);
    }
  return y;
}

template <class T>
Mat<T> max_pool_backward(const Mat<T>& dy, const std::vector<std::uint8_t>& argmax, int pool, Eigen::Index in_len) {
  Mat<T> dx = Mat<T>::Zero(dy.rows(), in_len);
  for (Eigen::Index t = 0; t < dy.cols(); ++t)
    for (Eigen::Index c = 0; c < dy.rows(); ++c)
      dx(c, t * pool + argmax[static_cast<std::size_t>(t * dy.rows() + c)]) = dy(c, t);
  return dx;
}

}  // namespace avcon::nn
