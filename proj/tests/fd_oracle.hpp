// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for gradient checks. Test-only; it uses
// nothing from the library but forward evaluation.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seqjepa/autodiff.hpp"

namespace seqjepa::testing {

struct GradCheck {
  double max_rel_error = 0;
  std::string worst;
};

/// Relative error with an absolute floor so vanishing gradients compare
/// on an absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// `loss` rebuilds the graph from the current parameter values and returns a
/// 1x1 value. Analytic gradients come from one backward pass; numeric ones
/// from (f(x+eps) - f(x-eps)) / 2 eps per entry.
inline GradCheck check_gradients(const std::function<ad::Var<double>()>& loss,
                                 std::vector<std::pair<std::string, ad::Var<double>>> params,
                                 double eps = 1e-4) {
  for (auto& [name, p] : params) p.zero_grad();
  ad::backward(loss());
  GradCheck out;
  for (auto& [name, p] : params) {
    const ad::Matrix<double> analytic = p.grad();
    for (ad::Index i = 0; i < p.value().size(); ++i) {
      double& x = p.mutable_value().data()[i];
      const double saved = x;
      x = saved + eps;
      const double up = loss().scalar();
      x = saved - eps;
      const double down = loss().scalar();
      x = saved;
      const double numeric = (up - down) / (2 * eps);
      const double err = relative_error(analytic.data()[i], numeric);
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic.data()[i]) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

inline ad::Matrix<double> random_matrix(ad::Index rows, ad::Index cols, unsigned seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix<double> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

}  // namespace seqjepa::testing
