#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "cavinet/layers.hpp"
#include "cavinet/tensor.hpp"

namespace cavinet {

// Result of comparing analytic gradients against central finite differences.
// Relative error per element is |analytic - numeric| / max(1, |analytic|,
// |numeric|), so near-zero gradients are compared absolutely.
struct GradCheckReport {
  double max_rel_err = 0.0;
  long num_params_checked = 0;
  bool pass = false;
};

namespace detail {
inline double rel_err(double a, double n) {
  double denom = std::max({1.0, std::abs(a), std::abs(n)});
  return std::abs(a - n) / denom;
}
}  // namespace detail

// Core check: perturbs every element of every tensor in `params` by +-step,
// re-evaluates the scalar objective, and compares the central difference
// against the matching entry of `analytic`. The objective must re-read the
// parameter values on every call (and fix its own randomness internally).
template <class Scalar>
GradCheckReport grad_check_params(const std::vector<Tensor<Scalar>*>& params,
                                  const std::function<double()>& objective,
                                  const std::vector<Tensor<Scalar>>& analytic,
                                  double tolerance, double step = 1e-6) {
  if (params.size() != analytic.size())
    raise<UsageError>("grad_check: ", params.size(), " parameter tensors but ",
                      analytic.size(), " analytic gradients");
  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor<Scalar>& p = *params[t];
    if (p.shape() != analytic[t].shape())
      raise<UsageError>("grad_check: gradient shape ", shape_str(analytic[t].shape()),
                        " does not match parameter ", shape_str(p.shape()));
    for (Index i = 0; i < p.size(); ++i) {
      const Scalar saved = p[i];
      p[i] = saved + static_cast<Scalar>(step);
      double f_plus = objective();
      p[i] = saved - static_cast<Scalar>(step);
      double f_minus = objective();
      p[i] = saved;
      double numeric = (f_plus - f_minus) / (2.0 * step);
      double analytic_v = static_cast<double>(analytic[t][i]);
      if (!std::isfinite(numeric) || !std::isfinite(analytic_v)) {
        report.max_rel_err = std::numeric_limits<double>::infinity();
        report.num_params_checked++;
        report.pass = false;
        return report;
      }
      report.max_rel_err = std::max(report.max_rel_err,
                                    detail::rel_err(analytic_v, numeric));
      report.num_params_checked++;
    }
  }
  report.pass = report.max_rel_err <= tolerance;
  return report;
}

// Checks one kernel's backward pass. The output is scalarized through a fixed
// random weighting (a plain sum would blind the check to directions the
// softmax projects out), and gradients are verified with respect to the input
// and every parameter tensor. Dropout draws its mask from a stream re-seeded
// identically on every evaluation, so the analytic and numeric passes see the
// same mask.
template <class Scalar>
GradCheckReport grad_check_kernel(LayerKernel<Scalar>& kernel, Tensor<Scalar> input,
                                  double tolerance, Mode mode = Mode::kEval,
                                  std::uint64_t seed = 7, double step = 1e-6) {
  Shape out_shape = forward_shape(kernel, input.shape());
  RandomStream wrng = substream(seed, "grad_check/scalarize");
  Tensor<Scalar> weights = Tensor<Scalar>::uniform(out_shape, wrng, -1.0, 1.0);

  auto objective = [&]() -> double {
    RandomStream rng = substream(seed, "grad_check/forward");
    Tensor<Scalar> y = forward(kernel, input, mode, &rng);
    return static_cast<double>((y.array() * weights.array()).sum());
  };

  RandomStream rng = substream(seed, "grad_check/forward");
  KernelCache<Scalar> cache;
  forward(kernel, input, mode, &rng, &cache);
  std::vector<Tensor<Scalar>> param_grads;
  Tensor<Scalar> gx = backward(kernel, cache, weights, mode, &param_grads);

  std::vector<Tensor<Scalar>*> params{&input};
  std::vector<Tensor<Scalar>> analytic;
  analytic.push_back(std::move(gx));
  auto kparams = kernel_params(kernel);
  for (std::size_t i = 0; i < kparams.size(); ++i) {
    params.push_back(kparams[i]);
    analytic.push_back(std::move(param_grads[i]));
  }
  return grad_check_params<Scalar>(params, objective, analytic, tolerance, step);
}

}  // namespace cavinet
