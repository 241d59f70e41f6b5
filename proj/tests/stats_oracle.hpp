// SPDX-License-Identifier: Apache-2.0
//
// Goodness-of-fit p-values for the statistical tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/students_t.hpp>

namespace seqjepa::testing {

/// Pearson chi-square p-value; cells with zero expectation must be
/// excluded by the caller.
inline double chi2_pvalue(const std::vector<double>& observed, const std::vector<double>& expected) {
  double stat = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double d = observed[i] - expected[i];
    stat += d * d / expected[i];
  }
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

/// One-sample Kolmogorov-Smirnov test against U(lo, hi), asymptotic
/// distribution with the Stephens small-sample correction.
inline double ks_uniform_pvalue(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = (xs[i] - lo) / (hi - lo);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
  double p = 0;
  for (int k = 1; k <= 100; ++k) {
    p += 2 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  }
  return std::clamp(p, 0.0, 1.0);
}

/// One-sided paired t-test p-value for mean(diffs) > 0.
inline double paired_t_pvalue(const std::vector<double>& diffs) {
  const double n = static_cast<double>(diffs.size());
  double mean = 0;
  for (double d : diffs) mean += d;
  mean /= n;
  double var = 0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= n - 1;
  const double t = mean / std::sqrt(var / n);
  boost::math::students_t dist(n - 1);
  return boost::math::cdf(boost::math::complement(dist, t));
}

}  // namespace seqjepa::testing
