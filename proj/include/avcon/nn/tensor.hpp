#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "avcon/rng.hpp"

namespace avcon::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// A named tensor owned by a module. Buffers (e.g. normalisation running
// statistics) are persisted with the weights but never receive gradients.
template <class T>
struct Parameter {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  bool trainable = true;
  bool buffer = false;

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols, bool is_buffer = false)
      : name(std::move(n)), value(Mat<T>::Zero(rows, cols)), grad(Mat<T>::Zero(rows, cols)), buffer(is_buffer) {
    if (is_buffer) trainable = false;
  }

  bool updatable() const { return trainable && !buffer; }
  void zero_grad() { grad.setZero(); }
};

template <class T>
using ParamList = std::vector<Parameter<T>*>;

// PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
void init_uniform_fan_in(Mat<T>& m, Eigen::Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<T>(u(rng));
}

template <class T>
std::uint64_t hash_values(const Mat<T>& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace avcon::nn
