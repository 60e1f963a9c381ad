#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "lmvcat/tensor.hpp"

namespace lmvcat {

struct GradCheckResult {
  double max_rel_err = 0.0;
  /// Max relative error per parameter tensor, in input order.
  std::vector<double> per_param;
  /// Location of the worst coordinate.
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
  return std::abs(analytic - numeric) / denom;
}

enum class Stencil {
  /// (f(x+h) - f(x-h)) / 2h, error O(h^2)
  TwoPoint,
  /// (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, error O(h^4)
  FourPoint,
};

/// Compares analytic gradients against central differences.
///
/// `f(params)` must return `{loss, grads}` with one gradient tensor per
/// parameter. It is called once at the unperturbed point and two or four
/// times per coordinate; the parameters are restored bit-exactly afterwards.
/// The relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
template <class F>
GradCheckResult gradient_check(F&& f, std::vector<Tensor<double>>& params, double eps,
                               Stencil stencil = Stencil::TwoPoint) {
  GradCheckResult result;
  auto [base_loss, grads] = f(params);
  (void)base_loss;
  result.per_param.assign(params.size(), 0.0);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& x = params[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      auto at = [&](double offset) {
        x[i] = saved + offset;
        return f(params).first;
      };
      double numeric = 0.0;
      if (stencil == Stencil::TwoPoint) {
        numeric = (at(eps) - at(-eps)) / (2.0 * eps);
      } else {
        // Differences first, so a locally constant loss yields exactly 0.
        const double near = at(eps) - at(-eps);
        const double far = at(2 * eps) - at(-2 * eps);
        numeric = (8.0 * near - far) / (12.0 * eps);
      }
      x[i] = saved;
      const double err = relative_error(grads[p][i], numeric);
      result.per_param[p] = std::max(result.per_param[p], err);
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_param = p;
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace lmvcat
