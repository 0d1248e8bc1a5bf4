#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "flatec/nn/autograd.hpp"

namespace flatec::nn {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Denominator floor of the relative error, so exact zeros compare absolutely.
  double floor = 1e-6;
  bool training = false;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "input#index analytic=.. numeric=.."
  std::vector<std::string> nan_locations;
};

/// Central finite differences of a scalar loss against reverse-mode gradients,
/// over every element of `inputs` (leaves with requires_grad). `loss` must
/// build the graph from scratch on the Graph it is handed; stochastic layers
/// replay identically because every evaluation uses the same graph seed.
inline GradCheckReport grad_check(const std::function<Var<double>(Graph<double>&)>& loss,
                                  const std::vector<Var<double>>& inputs, const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  for (const auto& in : inputs) in->grad.assign(in->size(), 0.0);
  {
    Graph<double> g(true, opt.training, opt.seed);
    auto out = loss(g);
    g.backward(out);
  }
  auto evaluate = [&] {
    Graph<double> g(false, opt.training, opt.seed);
    return loss(g)->value[0];
  };
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    auto& v = inputs[n]->value.values;
    const std::vector<double> analytic = inputs[n]->grad;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + opt.eps;
      const double fp = evaluate();
      v[i] = orig - opt.eps;
      const double fm = evaluate();
      v[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[i];
      ++report.checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.nan_locations.push_back("input" + std::to_string(n) + "#" + std::to_string(i));
        continue;
      }
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst = "input" + std::to_string(n) + "#" + std::to_string(i) + " analytic=" + std::to_string(a) +
                       " numeric=" + std::to_string(numeric);
      }
    }
  }
  if (!report.nan_locations.empty()) report.max_relative_error = std::nan("");
  return report;
}

}  // namespace flatec::nn
