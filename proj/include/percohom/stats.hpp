#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "percohom/errors.hpp"

namespace percohom::stats {

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// P[K > lambda] for the Kolmogorov distribution K = sup |B_t| of a Brownian bridge.
inline double kolmogorov_survival(double lambda) {
  if (lambda <= 0.0) return 1.0;
  // The alternating series converges slowly for small lambda; use the dual form there.
  if (lambda < 1.18) {
    const double y = -std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
    double cdf = 0.0;
    for (int j = 1; j <= 15; j += 2) cdf += std::exp(y * j * j);
    cdf *= std::sqrt(2.0 * std::numbers::pi) / lambda;
    return std::clamp(1.0 - cdf, 0.0, 1.0);
  }
  double sum = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = std::exp(-2.0 * j * j * lambda * lambda);
    sum += (j % 2 == 1 ? term : -term);
    if (term < 1e-18) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// One-sample KS test of a sample, standardized by its own mean and standard
/// deviation, against N(0, 1). p-value from the asymptotic Kolmogorov law with
/// Stephens' small-sample correction.
inline KsResult ks_standard_normal(std::span<const double> sample) {
  const std::size_t n = sample.size();
  require(n >= 2, "KS test needs at least two observations");
  double mean = 0.0;
  for (double v : sample) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : sample) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  require(sd > 0.0 && std::isfinite(sd), "KS test sample has degenerate variance");

  std::vector<double> z(sample.begin(), sample.end());
  for (auto& v : z) v = (v - mean) / sd;
  std::sort(z.begin(), z.end());
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double f = normal_cdf(z[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double rn = std::sqrt(static_cast<double>(n));
  return {d, kolmogorov_survival((rn + 0.12 + 0.11 / rn) * d)};
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Wilson score interval for a binomial proportion.
inline Interval wilson_interval(std::uint64_t successes, std::uint64_t trials, double z = 1.959963984540054) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double phat = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double centre = (phat + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(phat * (1 - phat) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  // The algebra gives exactly 0 and 1 at the extremes; rounding does not.
  return {successes == 0 ? 0.0 : std::max(0.0, centre - half), successes == trials ? 1.0 : std::min(1.0, centre + half)};
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_stderr = 0.0;
};

/// Weighted least squares y = a + b x with weights w_i = 1 / var(y_i).
inline LinearFit weighted_linear_fit(std::span<const double> x, std::span<const double> y,
                                     std::span<const double> w) {
  require(x.size() == y.size() && x.size() == w.size(), "fit inputs differ in length");
  require(x.size() >= 2, "linear fit needs at least two points");
  double sw = 0, sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += w[i];
    sx += w[i] * x[i];
    sy += w[i] * y[i];
  }
  const double mx = sx / sw;
  const double my = sy / sw;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += w[i] * (x[i] - mx) * (x[i] - mx);
    sxy += w[i] * (x[i] - mx) * (y[i] - my);
  }
  require(sxx > 0.0, "linear fit needs distinct abscissae");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.slope_stderr = std::sqrt(1.0 / sxx);
  return fit;
}

}  // namespace percohom::stats
