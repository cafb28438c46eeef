#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "avcon/nn/tensor.hpp"

namespace avcon::nn {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;  // L2 term added to the gradient
};

// Adam over a parameter list. Moments are keyed by parameter name so the
// state survives checkpoint round trips.
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const ParamList<T>& params) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (Parameter<T>* p : params) {
      if (!p->updatable()) continue;
      auto& st = state_[p->name];
      if (st.m.size() == 0) {
        st.m = Mat<T>::Zero(p->value.rows(), p->value.cols());
        st.v = Mat<T>::Zero(p->value.rows(), p->value.cols());
      }
      const Mat<T> g = p->grad + static_cast<T>(cfg_.weight_decay) * p->value;
      st.m = static_cast<T>(cfg_.beta1) * st.m + static_cast<T>(1.0 - cfg_.beta1) * g;
      st.v = static_cast<T>(cfg_.beta2) * st.v + static_cast<T>(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      const T step = static_cast<T>(cfg_.learning_rate / bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      p->value.array() -= step * st.m.array() / (st.v.array().sqrt() * denom_scale + static_cast<T>(cfg_.eps));
    }
  }

  struct Moments {
    Mat<T> m, v;
  };

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  AdamConfig cfg_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace avcon::nn
