// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

// Central-difference gradient oracle with Richardson refinement: combines
// the epsilon and epsilon/2 central stencils to cancel the O(eps^2)
// truncation term, leaving O(eps^4). Plain central differences at
// eps = 1e-3 carry ~3e-6 absolute truncation noise on this family of
// losses, which would drown the 1e-4 relative tolerance for any small
// gradient; the refined stencil keeps the tolerance meaningful.
namespace btel_test {

inline double central_diff(const std::function<double(double)>& f, double x,
                           double eps) {
  return (f(x + eps) - f(x - eps)) / (2.0 * eps);
}

inline double fd_gradient(const std::function<double(double)>& f, double x,
                          double eps = 1e-3) {
  const double coarse = central_diff(f, x, eps);
  const double fine = central_diff(f, x, eps / 2.0);
  return (4.0 * fine - coarse) / 3.0;
}

// Relative error guarded below theta: values whose magnitudes both sit
// under theta are compared against theta instead (pure-noise regime).
inline double guarded_rel_err(double a, double b, double theta = 1e-6) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), theta});
}

}  // namespace btel_test
