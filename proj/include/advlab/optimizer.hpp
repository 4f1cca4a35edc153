#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "advlab/error.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

enum class OptimizerKind { sgd, adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::sgd;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Plain gradient descent or adaptive-moment descent with bias correction.
/// Moment buffers are keyed by parameter name and created on first use.
class Optimizer {
 public:
  Optimizer() = default;
  explicit Optimizer(OptimizerSettings s) : s_(s) {
    if (!(s_.learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  }

  /// Applies one update from the gradient accumulators of `params`.
  /// Every tensor in the store must carry a gradient.
  void step(ParamStore& params) {
    for (auto& e : params)
      if (!e.tensor.trainable()) throw UsageError("missing gradient for trainable parameter '" + e.name + "'");
    ++steps_;
    const double lr = s_.learning_rate;
    if (s_.kind == OptimizerKind::sgd) {
      for (auto& e : params) {
        auto v = e.tensor.data();
        auto g = e.tensor.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
      }
      return;
    }
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(s_.beta1, t);
    const double c2 = 1.0 - std::pow(s_.beta2, t);
    for (auto& e : params) {
      auto& [m, v2] = moments_[e.name];
      auto v = e.tensor.data();
      auto g = e.tensor.grad();
      if (m.empty()) {
        m.assign(v.size(), 0.0);
        v2.assign(v.size(), 0.0);
      }
      if (m.size() != v.size()) throw UsageError("moment buffer shape changed for '" + e.name + "'");
      for (std::size_t i = 0; i < v.size(); ++i) {
        m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * g[i];
        v2[i] = s_.beta2 * v2[i] + (1.0 - s_.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v2[i] / c2;
        v[i] -= lr * mhat / (std::sqrt(vhat) + s_.epsilon);
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  const OptimizerSettings& settings() const { return s_; }
  void set_learning_rate(double lr) { s_.learning_rate = lr; }

 private:
  OptimizerSettings s_;
  std::unordered_map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
  std::uint64_t steps_ = 0;
};

}  // namespace advlab
