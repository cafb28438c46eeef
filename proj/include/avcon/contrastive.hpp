#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "avcon/error.hpp"
#include "avcon/nn/tensor.hpp"

namespace avcon {

// Embeddings are stored one per column throughout.
template <class T>
struct PairBatch {
  nn::Mat<T> left;   // d x N
  nn::Mat<T> right;  // d x N, column i is the positive of left column i

  Eigen::Index size() const { return left.cols(); }
  Eigen::Index dim() const { return left.rows(); }

  void validate() const {
    if (left.cols() == 0) fail(ErrorKind::invalid_input, "pair batch is empty");
    if (left.cols() != right.cols()) fail(ErrorKind::invalid_input, "pair batch sides differ in count");
    if (left.rows() != right.rows()) fail(ErrorKind::invalid_input, "pair batch sides differ in dimension");
  }
};

struct LossConfig {
  double temperature = 0.1;
  void validate() const {
    if (!(temperature > 0.0)) fail(ErrorKind::config, "temperature must be positive");
  }
};

inline constexpr double kNormFloor = 1e-12;

template <class T>
struct SimilarityResult {
  nn::Mat<T> similarity;
  std::size_t floored = 0;  // columns whose norm fell below the floor
};

namespace detail {

template <class T>
nn::Mat<T> unit_columns(const nn::Mat<T>& a, nn::Vec<T>* norms, std::size_t* floored) {
  nn::Mat<T> u(a.rows(), a.cols());
  if (norms) norms->resize(a.cols());
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    T n = a.col(j).norm();
    if (n < static_cast<T>(kNormFloor)) {
      n = static_cast<T>(kNormFloor);
      if (floored) ++*floored;
    }
    u.col(j) = a.col(j) / n;
    if (norms) (*norms)(j) = n;
  }
  return u;
}

}  // namespace detail

// (i, j) = <a_i, b_j> / (|a_i| |b_j|), with a norm floor of 1e-12.
template <class T>
SimilarityResult<T> cosine_similarity_matrix(const nn::Mat<T>& a, const nn::Mat<T>& b) {
  if (a.rows() != b.rows()) fail(ErrorKind::invalid_input, "cosine similarity: dimension mismatch");
  SimilarityResult<T> r;
  const nn::Mat<T> ua = detail::unit_columns<T>(a, nullptr, &r.floored);
  const nn::Mat<T> ub = detail::unit_columns<T>(b, nullptr, &r.floored);
  r.similarity = ua.transpose() * ub;
  return r;
}

template <class T>
struct LossAndGrad {
  double loss = 0.0;
  nn::Mat<T> d_left;
  nn::Mat<T> d_right;
};

// NT-Xent over the 2N stacked embeddings [left; right]. Each anchor's
// positive is its partner; every other non-self embedding is a negative.
// The loss is the mean over all 2N anchors (both directions of every pair).
template <class T>
LossAndGrad<T> nt_xent(const PairBatch<T>& batch, const LossConfig& cfg, bool want_grad) {
  batch.validate();
  cfg.validate();
  if (!batch.left.allFinite() || !batch.right.allFinite())
    fail(ErrorKind::numeric, "non-finite embeddings in contrastive batch");
  const Eigen::Index n = batch.size();
  const Eigen::Index m = 2 * n;
  const Eigen::Index d = batch.dim();
  using MatD = Eigen::MatrixXd;

  MatD z(d, m);
  z.leftCols(n) = batch.left.template cast<double>();
  z.rightCols(n) = batch.right.template cast<double>();
  Eigen::VectorXd norms;
  const MatD u = detail::unit_columns<double>(z, &norms, nullptr);
  const MatD s = (u.transpose() * u) / cfg.temperature;

  double total = 0.0;
  MatD g = MatD::Zero(m, m);  // dL/dS
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index pos = (i + n) % m;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < m; ++k)
      if (k != i) mx = std::max(mx, s(i, k));
    double denom = 0.0;
    for (Eigen::Index k = 0; k < m; ++k)
      if (k != i) denom += std::exp(s(i, k) - mx);
    const double lse = mx + std::log(denom);
    total += lse - s(i, pos);
    if (want_grad) {
      for (Eigen::Index k = 0; k < m; ++k)
        if (k != i) g(i, k) = std::exp(s(i, k) - lse) / static_cast<double>(m);
      g(i, pos) -= 1.0 / static_cast<double>(m);
    }
  }
  LossAndGrad<T> out;
  out.loss = total / static_cast<double>(m);
  if (!std::isfinite(out.loss)) fail(ErrorKind::numeric, "contrastive loss is not finite");
  if (!want_grad) return out;

  const MatD du = u * (g + g.transpose()) / cfg.temperature;
  MatD dz(d, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    if (z.col(j).norm() < kNormFloor) {
      dz.col(j) = du.col(j) / norms(j);
    } else {
      dz.col(j) = (du.col(j) - u.col(j) * u.col(j).dot(du.col(j))) / norms(j);
    }
  }
  out.d_left = dz.leftCols(n).template cast<T>();
  out.d_right = dz.rightCols(n).template cast<T>();
  return out;
}

template <class T>
double nt_xent_loss(const PairBatch<T>& batch, const LossConfig& cfg = {}) {
  return nt_xent<T>(batch, cfg, false).loss;
}

// Two augmented views per input, paired by input index.
template <class T>
PairBatch<T> build_unimodal_batch(const nn::Mat<T>& first_views, const nn::Mat<T>& second_views) {
  if (first_views.cols() != second_views.cols())
    fail(ErrorKind::invalid_input, "unimodal batch: view counts differ (" + std::to_string(first_views.cols()) + " vs " +
                                       std::to_string(second_views.cols()) + ")");
  PairBatch<T> b{first_views, second_views};
  b.validate();
  return b;
}

// Audio column i pairs with video column i; the ids guard against misalignment.
template <class T>
PairBatch<T> build_multimodal_batch(const nn::Mat<T>& audio, const nn::Mat<T>& video,
                                    const std::vector<std::string>& audio_ids,
                                    const std::vector<std::string>& video_ids) {
  if (audio.cols() != video.cols()) fail(ErrorKind::invalid_input, "multimodal batch: counts differ");
  if (audio_ids.size() != static_cast<std::size_t>(audio.cols()) || video_ids.size() != audio_ids.size())
    fail(ErrorKind::invalid_input, "multimodal batch: id lists do not match embedding counts");
  for (std::size_t i = 0; i < audio_ids.size(); ++i)
    if (audio_ids[i] != video_ids[i])
      fail(ErrorKind::invalid_input, "multimodal batch misaligned at index " + std::to_string(i) + ": audio '" +
                                         audio_ids[i] + "' vs video '" + video_ids[i] + "'");
  PairBatch<T> b{audio, video};
  b.validate();
  return b;
}

}  // namespace avcon
