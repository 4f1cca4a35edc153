#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

namespace advlab {

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor of the relative error, so entries whose true
  /// gradient is ~0 are judged on absolute error instead.
  double floor = 1e-3;
  /// Also check gradients with respect to every bound input.
  bool inputs = true;
};

struct GradCheckReport {
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  std::string worst;

  void merge(const GradCheckReport& o) {
    entries += o.entries;
    if (o.max_rel_error > max_rel_error) {
      max_rel_error = o.max_rel_error;
      worst = o.worst;
    }
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares reverse-mode gradients of a scalar node against central finite
/// differences, for every parameter on the tape and (optionally) every input.
inline GradCheckReport gradcheck(Tape& tape, Var loss, const Bindings& inputs, GradCheckOptions opt = {}) {
  GradCheckReport report;
  auto record = [&](double a, double n, const std::string& where) {
    ++report.entries;
    const double e = relative_error(a, n, opt.floor);
    if (e > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = std::max(report.max_rel_error, e);
      report.worst = where;
    }
  };

  tape.evaluate(inputs);
  tape.backward(loss);

  for (auto [var, tensor] : tape.params()) {
    std::vector<double> analytic(tensor->grad().begin(), tensor->grad().end());
    auto data = tensor->data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + opt.step;
      tape.evaluate(inputs);
      const double fp = tape.value(loss).item();
      data[i] = orig - opt.step;
      tape.evaluate(inputs);
      const double fm = tape.value(loss).item();
      data[i] = orig;
      record(analytic[i], (fp - fm) / (2.0 * opt.step), "param #" + std::to_string(var.id) + "[" + std::to_string(i) + "]");
    }
  }

  if (opt.inputs) {
    for (const auto& [name, t] : inputs) {
      const auto v = tape.find_input(name);
      if (!v) continue;
      tape.evaluate(inputs);
      tape.backward(loss);
      std::vector<double> analytic(tape.gradient(*v).begin(), tape.gradient(*v).end());
      Bindings perturbed = inputs;
      auto data = perturbed.at(name).data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + opt.step;
        tape.evaluate(perturbed);
        const double fp = tape.value(loss).item();
        data[i] = orig - opt.step;
        tape.evaluate(perturbed);
        const double fm = tape.value(loss).item();
        data[i] = orig;
        record(analytic[i], (fp - fm) / (2.0 * opt.step), "input '" + name + "'[" + std::to_string(i) + "]");
      }
    }
  }
  tape.evaluate(inputs);
  return report;
}

}  // namespace advlab
