#pragma once

// Central-difference gradient checking. The analytic side comes from the
// tape; the numeric side re-evaluates the scalar objective with perturbed
// inputs, so the two are fully independent.

#include "cvqa/autodiff.hpp"
#include "cvqa/types.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

namespace cvqa {

struct GradCheckStat {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

// Relative error with an absolute floor of 1 in the denominator, so tiny
// gradients are compared absolutely.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Checks `analytic_grad` (d objective / d x) against central differences of
// `objective`, which must read the current contents of `x` on every call.
// At most `max_coords` coordinates are sampled (all when the count fits).
inline GradCheckStat check_grad_fd(const std::function<double()>& objective,
                                   Mat& x, const Mat& analytic_grad,
                                   double step = 1e-5, Rng* rng = nullptr,
                                   int max_coords = 0) {
  GradCheckStat stat;
  const Eigen::Index n = x.size();
  std::vector<Eigen::Index> coords(static_cast<size_t>(n));
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < n && rng != nullptr) {
    for (int i = 0; i < max_coords; ++i) {
      const auto j =
          i + static_cast<Eigen::Index>(uniform_index(*rng, static_cast<std::uint64_t>(n - i)));
      std::swap(coords[static_cast<size_t>(i)], coords[static_cast<size_t>(j)]);
    }
    coords.resize(static_cast<size_t>(max_coords));
  }
  for (Eigen::Index c : coords) {
    const double orig = x.data()[c];
    x.data()[c] = orig + step;
    const double fp = objective();
    x.data()[c] = orig - step;
    const double fm = objective();
    x.data()[c] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    stat.max_rel_err = std::max(stat.max_rel_err, rel_err(fd, analytic_grad.data()[c]));
    ++stat.coords_checked;
  }
  return stat;
}

// Sweeps a set of Parameters. `eval(true)` must zero the grads, run one
// forward+backward pass and return the loss; `eval(false)` must run the same
// forward only, reading the current parameter values.
inline GradCheckStat check_params_fd(const std::function<double(bool)>& eval,
                                     const std::vector<ad::Parameter<double>*>& params,
                                     double step = 1e-5, Rng* rng = nullptr,
                                     int per_param_coords = 0) {
  eval(true);
  GradCheckStat total;
  for (auto* p : params) {
    const auto st = check_grad_fd([&] { return eval(false); }, p->value,
                                  p->grad, step, rng, per_param_coords);
    total.max_rel_err = std::max(total.max_rel_err, st.max_rel_err);
    total.coords_checked += st.coords_checked;
  }
  return total;
}

}  // namespace cvqa
