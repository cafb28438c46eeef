#pragma once

#include <string>
#include <vector>

#include "avcon/error.hpp"
#include "avcon/nn/layers.hpp"

namespace avcon::nn {

// Single LSTM layer, gate order (input, forget, cell, output), one bias vector.
// Sequences are given as one (input_dim x batch) matrix per time step.
template <class T>
class LstmLayer {
 public:
  LstmLayer() = default;
  LstmLayer(const std::string& name, int input_dim, int hidden_dim, Rng& rng)
      : hidden_(hidden_dim), w_ih(name + ".weight_ih", 4 * hidden_dim, input_dim),
        w_hh(name + ".weight_hh", 4 * hidden_dim, hidden_dim), bias(name + ".bias", 4 * hidden_dim, 1) {
    init_uniform_fan_in(w_ih.value, hidden_dim, rng);
    init_uniform_fan_in(w_hh.value, hidden_dim, rng);
    init_uniform_fan_in(bias.value, hidden_dim, rng);
  }

  struct Cache {
    std::vector<Mat<T>> x, h, c, gates;  // h[0], c[0] are the zero initial states
  };

  std::vector<Mat<T>> forward(const std::vector<Mat<T>>& xs, Cache* cache) const {
    const Eigen::Index batch = xs.front().cols();
    const Eigen::Index H = hidden_;
    Mat<T> h = Mat<T>::Zero(H, batch), c = Mat<T>::Zero(H, batch);
    std::vector<Mat<T>> hs;
    if (cache) {
      *cache = Cache{};
      cache->h.push_back(h);
      cache->c.push_back(c);
    }
    for (const auto& x : xs) {
      Mat<T> g = w_ih.value * x + w_hh.value * h;
      g.colwise() += bias.value.col(0);
      g.topRows(2 * H) = g.topRows(2 * H).unaryExpr([](T v) { return sigmoid(v); });
      g.middleRows(2 * H, H) = g.middleRows(2 * H, H).array().tanh().matrix();
      g.bottomRows(H) = g.bottomRows(H).unaryExpr([](T v) { return sigmoid(v); });
      c = (g.middleRows(H, H).array() * c.array() + g.topRows(H).array() * g.middleRows(2 * H, H).array()).matrix();
      h = (g.bottomRows(H).array() * c.array().tanh()).matrix();
      hs.push_back(h);
      if (cache) {
        cache->x.push_back(x);
        cache->gates.push_back(std::move(g));
        cache->h.push_back(h);
        cache->c.push_back(c);
      }
    }
    return hs;
  }

  // dhs: gradient w.r.t. each step's output h (may be zero matrices).
  std::vector<Mat<T>> backward(const Cache& cache, const std::vector<Mat<T>>& dhs, bool need_dx) {
    const Eigen::Index H = hidden_;
    const std::size_t steps = cache.x.size();
    const Eigen::Index batch = cache.x.front().cols();
    Mat<T> dh_next = Mat<T>::Zero(H, batch), dc_next = Mat<T>::Zero(H, batch);
    std::vector<Mat<T>> dxs(need_dx ? steps : 0);
    for (std::size_t s = steps; s-- > 0;) {
      const Mat<T>& g = cache.gates[s];
      const Mat<T>& c = cache.c[s + 1];
      const Mat<T>& c_prev = cache.c[s];
      const Mat<T>& h_prev = cache.h[s];
      const auto i = g.topRows(H).array();
      const auto f = g.middleRows(H, H).array();
      const auto gg = g.middleRows(2 * H, H).array();
      const auto o = g.bottomRows(H).array();
      const Mat<T> tc = c.array().tanh().matrix();

      const Mat<T> dh = dhs[s] + dh_next;
      const Mat<T> dc = (dh.array() * o * (T(1) - tc.array().square())).matrix() + dc_next;
      Mat<T> dg(4 * H, batch);
      dg.topRows(H) = (dc.array() * gg * i * (T(1) - i)).matrix();
      dg.middleRows(H, H) = (dc.array() * c_prev.array() * f * (T(1) - f)).matrix();
      dg.middleRows(2 * H, H) = (dc.array() * i * (T(1) - gg.square())).matrix();
      dg.bottomRows(H) = (dh.array() * tc.array() * o * (T(1) - o)).matrix();

      if (w_ih.updatable()) w_ih.grad.noalias() += dg * cache.x[s].transpose();
      if (w_hh.updatable()) w_hh.grad.noalias() += dg * h_prev.transpose();
      if (bias.updatable()) bias.grad.col(0) += dg.rowwise().sum();
      dh_next = w_hh.value.transpose() * dg;
      dc_next = (dc.array() * f).matrix();
      if (need_dx) dxs[s] = w_ih.value.transpose() * dg;
    }
    return dxs;
  }

  void collect(ParamList<T>& out) {
    out.push_back(&w_ih);
    out.push_back(&w_hh);
    out.push_back(&bias);
  }

  int hidden_dim() const { return hidden_; }

 private:
  int hidden_ = 0;

 public:
  Parameter<T> w_ih, w_hh, bias;
};

}  // namespace avcon::nn
