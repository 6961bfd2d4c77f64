#pragma once

// Central finite-difference oracle for the autodiff ops.

#include <functional>
#include <vector>

#include "t2icount/autodiff.hpp"

namespace t2i::testing {

struct GradCheckResult {
  double max_abs_error = 0;
  double max_rel_error = 0;
};

// f maps leaf Vars to a scalar (1x1) Var. Every input is perturbed entry by entry.
inline GradCheckResult gradcheck(const std::function<ad::Var<double>(const std::vector<ad::Var<double>>&)>& f,
                                 const std::vector<Grid<double>>& inputs, double h = 1e-6) {
  std::vector<ad::Var<double>> leaves;
  for (const auto& g : inputs) leaves.push_back(ad::Var<double>::from_grid(g, true));
  auto out = f(leaves);
  ad::backward(out);

  GradCheckResult r;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (Eigen::Index i = 0; i < inputs[k].data.size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<ad::Var<double>> vs;
        for (std::size_t m = 0; m < inputs.size(); ++m) {
          Grid<double> g = inputs[m];
          if (m == k) g.data.data()[i] += delta;
          vs.push_back(ad::Var<double>::from_grid(g, false));
        }
        return f(vs).item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = leaves[k].has_grad() ? leaves[k].grad().data()[i] : 0.0;
      const double abs_err = std::abs(numeric - analytic);
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / std::max(1e-3, std::abs(numeric) + std::abs(analytic)));
    }
  }
  return r;
}

inline Grid<double> random_grid(int c, int h, int w, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Grid<double> g(c, h, w);
  for (Eigen::Index i = 0; i < g.data.size(); ++i) g.data.data()[i] = dist(rng);
  return g;
}

}  // namespace t2i::testing
