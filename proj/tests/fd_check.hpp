#pragma once

// Central finite-difference gradient checking against the analytic backward
// passes. Works on any callable that evaluates a scalar loss from a flat
// parameter vector, so the same harness drives single blocks and the whole
// network.

#include <cmath>
#include <cstddef>
#include <vector>

namespace fd {

// Central difference d(eval)/d(theta[i]) with step h.
template <typename Eval, typename Vec>
double central(Eval&& eval, Vec& theta, std::size_t i, double h) {
  const double orig = theta[i];
  theta[i] = orig + h;
  const double fp = eval();
  theta[i] = orig - h;
  const double fm = eval();
  theta[i] = orig;
  return (fp - fm) / (2.0 * h);
}

// Relative error with an absolute floor so that a pair of true zeros passes.
inline double rel_err(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double diff = std::abs(analytic - numeric);
  if (diff <= 1e-9) return 0.0;
  return diff / std::max(scale, 1e-9);
}

struct Worst {
  double err = 0.0;
  std::size_t index = 0;
  double analytic = 0.0, numeric = 0.0;
};

// Checks the provided indices and returns the worst relative error seen.
template <typename Eval, typename Vec, typename GradVec>
Worst check_indices(Eval&& eval, Vec& theta, const GradVec& analytic_grad,
                    const std::vector<std::size_t>& indices, double h) {
  Worst w;
  for (const auto i : indices) {
    const double num = central(eval, theta, i, h);
    const double err = rel_err(static_cast<double>(analytic_grad[i]), num);
    if (err >= w.err) {
      w.err = err;
      w.index = i;
      w.analytic = static_cast<double>(analytic_grad[i]);
      w.numeric = num;
    }
  }
  return w;
}

// As above, but scores each index by its best step. No single step suits
// every parameter: tiny gradients drown in rounding noise at small h while
// strongly curved ones (norm scales) pick up truncation error at large h.
template <typename Eval, typename Vec, typename GradVec>
Worst check_indices_multi(Eval&& eval, Vec& theta, const GradVec& analytic_grad,
                          const std::vector<std::size_t>& indices,
                          const std::vector<double>& steps) {
  Worst w;
  for (const auto i : indices) {
    double best = -1.0, best_num = 0.0;
    for (const double h : steps) {
      const double num = central(eval, theta, i, h);
      const double err = rel_err(static_cast<double>(analytic_grad[i]), num);
      if (best < 0.0 || err < best) {
        best = err;
        best_num = num;
      }
    }
    if (best >= w.err) {
      w.err = best;
      w.index = i;
      w.analytic = static_cast<double>(analytic_grad[i]);
      w.numeric = best_num;
    }
  }
  return w;
}

}  // namespace fd
