#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gabmil/autodiff.hpp"

namespace gabmil {

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_param;
  double max_rel_err = 0.0;

  bool within(double tol) const { return max_rel_err < tol; }
};

/// Central finite differences against tape gradients, in 64-bit.
/// `build` replays the forward pass on a fresh tape and returns the scalar
/// loss. Relative error is |a-n| / max(|a|, |n|, 1e-8).
inline GradCheckReport finite_difference_check(
    const std::function<Value<double>(Tape<double>&)>& build,
    const std::vector<std::pair<std::string, Parameter<double>*>>& params, double h = 1e-5) {
  auto eval = [&]() {
    Tape<double> tape;
    Value<double> loss = build(tape);
    if (loss.tensor().numel() != 1) {
      throw std::invalid_argument("finite_difference_check: loss must be scalar");
    }
    double v = loss.tensor()[0];
    if (!std::isfinite(v)) {
      throw std::runtime_error("finite_difference_check: non-finite loss");
    }
    return v;
  };

  // Analytic pass.
  std::vector<Tensor<double>> analytic;
  {
    for (auto& [name, p] : params) p->zero_grad();
    Tape<double> tape;
    Value<double> loss = build(tape);
    if (!std::isfinite(loss.tensor()[0])) {
      throw std::runtime_error("finite_difference_check: non-finite loss");
    }
    tape.backward(loss);
    for (auto& [name, p] : params) {
      if (!p->grad.all_finite()) {
        throw std::runtime_error("finite_difference_check: non-finite gradient for " + name);
      }
      analytic.push_back(p->grad);
    }
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi].second;
    GradCheckEntry entry{params[pi].first, 0.0};
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      double orig = p.value[i];
      p.value[i] = orig + h;
      double up = eval();
      p.value[i] = orig - h;
      double down = eval();
      p.value[i] = orig;
      double numeric = (up - down) / (2.0 * h);
      double a = analytic[pi][i];
      double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

}  // namespace gabmil
