#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "avcon/audio_io.hpp"
#include "avcon/augment.hpp"
#include "avcon/corpus.hpp"
#include "avcon/error.hpp"

namespace avcon {

// Mann-Whitney form: share of (positive, negative) pairs ranked correctly,
// ties counting one half. nullopt when either class is absent.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::invalid_input, "roc_auc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::uint64_t pos = 0, neg = 0, neg_below = 0, twice_wins = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t p = 0, q = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? p : q) += 1;
      ++j;
    }
    twice_wins += p * (2 * neg_below + q);
    neg_below += q;
    pos += p;
    neg += q;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return static_cast<double>(twice_wins) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

// Average precision. Tied scores form one block; every positive in a block
// gets the precision at the end of the block, so the value does not depend
// on the order inside ties. nullopt when there is no positive.
inline std::optional<double> pr_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) fail(ErrorKind::invalid_input, "pr_auc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::uint64_t cum_pos = 0, cum_all = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t p = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (labels[idx[j]]) ++p;
      ++j;
    }
    cum_pos += p;
    cum_all += j - i;
    if (p) acc += static_cast<double>(p) * (static_cast<double>(cum_pos) / static_cast<double>(cum_all));
    i = j;
  }
  if (cum_pos == 0) return std::nullopt;
  return acc / static_cast<double>(cum_pos);
}

enum class Metric { roc_auc, pr_auc };

inline const char* to_string(Metric m) { return m == Metric::roc_auc ? "roc_auc" : "pr_auc"; }

// n_tracks x n_tags; rows follow track_ids, columns follow vocabulary.
struct PredictionMatrix {
  Eigen::MatrixXd scores;
  std::vector<std::string> track_ids;
  std::vector<std::string> vocabulary;
};

struct LabelMatrix {
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> labels;
};

inline LabelMatrix labels_for(const std::vector<const TrackRecord*>& records, const std::vector<std::string>& vocabulary) {
  LabelMatrix lm;
  lm.labels.setZero(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(vocabulary.size()));
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (!records[r]->tags) fail(ErrorKind::data, "track '" + records[r]->track_id + "' has no tag labels");
    for (std::size_t t = 0; t < vocabulary.size(); ++t)
      lm.labels(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t)) = records[r]->tags->count(vocabulary[t]) ? 1 : 0;
  }
  return lm;
}

inline std::optional<double> tag_metric(Metric m, const PredictionMatrix& p, const LabelMatrix& l, Eigen::Index tag) {
  std::vector<double> s(static_cast<std::size_t>(p.scores.rows()));
  std::vector<std::uint8_t> y(s.size());
  for (Eigen::Index i = 0; i < p.scores.rows(); ++i) {
    s[static_cast<std::size_t>(i)] = p.scores(i, tag);
    y[static_cast<std::size_t>(i)] = l.labels(i, tag);
  }
  return m == Metric::roc_auc ? roc_auc(s, y) : pr_auc(s, y);
}

struct MacroResult {
  double value = 0.0;
  std::vector<std::optional<double>> per_tag;  // vocabulary order
  std::vector<std::string> skipped;
};

inline MacroResult macro_average(Metric m, const PredictionMatrix& p, const LabelMatrix& l) {
  if (p.scores.rows() != l.labels.rows() || p.scores.cols() != l.labels.cols())
    fail(ErrorKind::shape, "prediction and label matrices differ in shape");
  if (static_cast<std::size_t>(p.scores.cols()) != p.vocabulary.size())
    fail(ErrorKind::shape, "prediction matrix does not match its vocabulary");
  if (!p.scores.allFinite()) fail(ErrorKind::numeric, "prediction matrix contains non-finite scores");
  MacroResult r;
  double sum = 0.0;
  std::size_t n = 0;
  for (Eigen::Index t = 0; t < p.scores.cols(); ++t) {
    auto v = tag_metric(m, p, l, t);
    r.per_tag.push_back(v);
    if (v) {
      sum += *v;
      ++n;
    } else {
      r.skipped.push_back(p.vocabulary[static_cast<std::size_t>(t)]);
    }
  }
  if (n == 0) fail(ErrorKind::data, std::string(to_string(m)) + ": every tag lacks positives or negatives");
  r.value = sum / static_cast<double>(n);
  return r;
}

// Maps a batch of equal-length windows (1 x segment each) to n_tags x batch scores.
using WindowPredictor = std::function<Eigen::MatrixXf(const std::vector<Eigen::MatrixXf>&)>;

// Per-tag mean over 50%-overlap windows (zero-padded when the track is short).
inline Eigen::VectorXd overlap_inference(const AudioWaveform& track, const WindowPredictor& model,
                                         std::size_t segment_samples, double overlap = 0.5,
                                         std::size_t max_batch = 16) {
  const auto offsets = chunk_sample_offsets(track.size(), segment_samples, overlap);
  Eigen::VectorXd sum;
  for (std::size_t b = 0; b < offsets.size(); b += max_batch) {
    std::vector<Eigen::MatrixXf> windows;
    for (std::size_t i = b; i < std::min(offsets.size(), b + max_batch); ++i) {
      const AudioWaveform w = crop(track, offsets[i], segment_samples);
      windows.emplace_back(Eigen::Map<const Eigen::RowVectorXf>(w.samples.data(), static_cast<Eigen::Index>(w.samples.size())));
    }
    const Eigen::MatrixXf s = model(windows);
    if (s.cols() != static_cast<Eigen::Index>(windows.size())) fail(ErrorKind::shape, "model returned a wrong batch size");
    if (sum.size() == 0) sum = Eigen::VectorXd::Zero(s.rows());
    for (Eigen::Index c = 0; c < s.cols(); ++c) sum += s.col(c).cast<double>();
  }
  return sum / static_cast<double>(offsets.size());
}

inline Eigen::VectorXd overlap_inference_seconds(const AudioWaveform& track, const WindowPredictor& model, double segment_s,
                                                 double overlap = 0.5) {
  if (!(segment_s > 0.0)) fail(ErrorKind::invalid_input, "segment length must be positive");
  return overlap_inference(track, model, static_cast<std::size_t>(std::llround(segment_s * track.sample_rate_hz)), overlap);
}

}  // namespace avcon
