#pragma once

// Tower-level feature engineering: vegetation indices and their PCA, radar
// features, gap filling, LOWESS smoothing and extreme-event flags.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gppcast/calendar.hpp"
#include "gppcast/errors.hpp"
#include "gppcast/stats.hpp"

namespace gppcast::features {

// --- vegetation indices --------------------------------------------------------

// Surface reflectances in [0, 1]; NaN marks a masked (cloudy) observation.
struct Reflectance {
  double blue = 0, green = 0, red = 0, red_edge = 0, nir = 0, swir1 = 0, swir2 = 0;
};

inline constexpr std::array<std::string_view, 10> kViNames = {
    "ndvi", "kndvi", "evi", "nirv", "ndre", "gndvi", "ndmi", "nbr", "savi", "cire"};
inline constexpr std::size_t kViCount = kViNames.size();

using ViVector = std::array<double, kViCount>;

namespace detail {
inline double ratio(double num, double den) { return den == 0.0 ? kMissing : num / den; }
inline double normalized_difference(double a, double b) { return ratio(a - b, a + b); }
}  // namespace detail

inline ViVector compute_vis(const Reflectance& r) {
  for (double v : {r.blue, r.green, r.red, r.red_edge, r.nir, r.swir1, r.swir2}) {
    if (!is_missing(v) && !(v >= 0.0 && v <= 1.0)) {
      throw DataError("reflectance " + std::to_string(v) + " outside [0, 1]");
    }
  }
  using detail::normalized_difference;
  using detail::ratio;
  const double ndvi = normalized_difference(r.nir, r.red);
  return {
      ndvi,
      std::tanh(ndvi * ndvi),
      ratio(2.5 * (r.nir - r.red), r.nir + 6.0 * r.red - 7.5 * r.blue + 1.0),
      ndvi * r.nir,
      normalized_difference(r.nir, r.red_edge),
      normalized_difference(r.nir, r.green),
      normalized_difference(r.nir, r.swir1),
      normalized_difference(r.nir, r.swir2),
      1.5 * (r.nir - r.red) / (r.nir + r.red + 0.5),
      ratio(r.nir, r.red_edge) - 1.0,
  };
}

// --- PCA -------------------------------------------------------------------------

struct PcaModel {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;           // n_components x dim, orthonormal rows
  std::vector<double> explained_ratio;  // per kept component, non-increasing
  double total_variance = 0.0;

  std::size_t n_components() const { return static_cast<std::size_t>(components.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  double captured_ratio() const {
    double s = 0;
    for (double r : explained_ratio) s += r;
    return s;
  }
};

inline constexpr std::size_t kPcaWidth = 18;

// Keeps the smallest number of leading components whose cumulative
// explained-variance ratio exceeds variance_target, capped at
// max_components and at the number of components with non-zero variance.
inline PcaModel pca_fit(const Eigen::MatrixXd& x, double variance_target = 0.99,
                        std::size_t max_components = kPcaWidth) {
  if (x.rows() < 2) throw DataError("PCA needs at least 2 rows");
  if (x.cols() < 1) throw DataError("PCA needs at least 1 column");
  if (!x.allFinite()) throw DataError("PCA input contains missing values; interpolate first");
  if (!(variance_target > 0.0 && variance_target <= 1.0)) {
    throw ConfigError("variance target must lie in (0, 1]");
  }
  PcaModel model;
  model.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - model.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("PCA eigen-decomposition failed");

  const Eigen::Index dim = x.cols();
  std::vector<double> values(dim);
  for (Eigen::Index i = 0; i < dim; ++i) values[i] = std::max(eig.eigenvalues()(dim - 1 - i), 0.0);
  double total = 0;
  for (double v : values) total += v;
  model.total_variance = total;
  const double zero_tol = values.empty() ? 0.0 : values[0] * 1e-10;

  std::size_t keep = 0;
  double cumulative = 0;
  while (keep < static_cast<std::size_t>(dim) && keep < max_components && values[keep] > zero_tol) {
    cumulative += values[keep] / total;
    ++keep;
    if (cumulative > variance_target) break;
  }
  model.components.resize(static_cast<Eigen::Index>(keep), dim);
  for (std::size_t i = 0; i < keep; ++i) {
    Eigen::VectorXd v = eig.eigenvectors().col(dim - 1 - static_cast<Eigen::Index>(i));
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;  // deterministic sign
    model.components.row(static_cast<Eigen::Index>(i)) = v.transpose();
    model.explained_ratio.push_back(values[i] / total);
  }
  return model;
}

// Component scores, zero-padded (or truncated) to `width`.
inline std::vector<double> pca_transform(const PcaModel& model, std::span<const double> x,
                                         std::size_t width = kPcaWidth) {
  if (x.size() != model.dim()) {
    throw DataError("PCA input has " + std::to_string(x.size()) + " values, model expects " +
                    std::to_string(model.dim()));
  }
  const Eigen::Map<const Eigen::VectorXd> v(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::VectorXd scores = model.components * (v - model.mean);
  std::vector<double> out(width, 0.0);
  for (std::size_t i = 0; i < std::min(width, model.n_components()); ++i) out[i] = scores(i);
  return out;
}

inline std::vector<double> pca_inverse(const PcaModel& model, std::span<const double> scores) {
  Eigen::VectorXd s = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.n_components()));
  for (std::size_t i = 0; i < std::min(scores.size(), model.n_components()); ++i) s(i) = scores[i];
  const Eigen::VectorXd x = model.mean + model.components.transpose() * s;
  return {x.data(), x.data() + x.size()};
}

// --- radar -------------------------------------------------------------------------

// Dual-polarization ratio index 4*VH/(VV+VH) from linear-power backscatter.
inline double dprvi(double gamma_vv, double gamma_vh) {
  if (is_missing(gamma_vv) || is_missing(gamma_vh)) return kMissing;
  if (gamma_vv < 0.0 || gamma_vh < 0.0) throw DataError("backscatter power must be non-negative");
  return detail::ratio(4.0 * gamma_vh, gamma_vv + gamma_vh);
}

inline double to_db(double linear) {
  if (is_missing(linear) || linear <= 0.0) return kMissing;
  return 10.0 * std::log10(linear);
}

inline double from_db(double db) { return std::pow(10.0, db / 10.0); }

// --- gap filling and smoothing -------------------------------------------------------

// Linear interpolation across interior gaps; leading and trailing gaps take
// the nearest observed value.
inline std::vector<double> interpolate_gaps(std::span<const double> series) {
  std::vector<double> out(series.begin(), series.end());
  std::size_t prev = out.size();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (is_missing(out[i])) continue;
    if (prev == out.size()) {
      std::fill(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(i), out[i]);
    } else {
      const double step = (out[i] - out[prev]) / static_cast<double>(i - prev);
      for (std::size_t j = prev + 1; j < i; ++j) out[j] = out[prev] + step * static_cast<double>(j - prev);
    }
    prev = i;
  }
  if (prev == out.size()) throw DataError("cannot interpolate a series with no observed values");
  std::fill(out.begin() + static_cast<std::ptrdiff_t>(prev) + 1, out.end(), out[prev]);
  return out;
}

struct LowessOptions {
  double frac = 0.08;
  int iterations = 2;
};

// Cleveland's robust locally weighted linear regression. x must be sorted
// ascending. Each fit uses the k = floor(frac*n) nearest points with
// tricube distance weights; each robustness iteration reweights points by
// the bisquare of residual / (6 * median |residual|).
inline std::vector<double> lowess_smooth(std::span<const double> x, std::span<const double> y,
                                         const LowessOptions& opt = {}) {
  const std::size_t n = y.size();
  if (x.size() != n) throw DataError("lowess: x and y lengths differ");
  if (n < 3) throw DataError("lowess needs at least 3 points");
  if (!(opt.frac > 0.0 && opt.frac <= 1.0)) throw ConfigError("lowess frac must lie in (0, 1]");
  if (opt.iterations < 0) throw ConfigError("lowess iterations must be >= 0");
  for (std::size_t i = 0; i < n; ++i) {
    if (is_missing(x[i]) || is_missing(y[i])) throw DataError("lowess input contains missing values");
    if (i > 0 && x[i] < x[i - 1]) throw DataError("lowess x values must be sorted");
  }
  const auto k = std::min(n, static_cast<std::size_t>(opt.frac * static_cast<double>(n) + 1e-10));
  if (k < 3) {
    throw ConfigError("lowess neighbourhood of " + std::to_string(k) +
                      " points is too small; increase frac");
  }
  const double range = x[n - 1] - x[0];
  std::vector<double> fitted(n), robust(n, 1.0), w(n), residual(n);

  for (int iteration = 0; iteration <= opt.iterations; ++iteration) {
    std::size_t left = 0, right = k;  // neighbourhood [left, right)
    for (std::size_t i = 0; i < n; ++i) {
      while (right < n && x[i] > (x[left] + x[right]) / 2.0) {
        ++left;
        ++right;
      }
      const double h = std::max(x[i] - x[left], x[right - 1] - x[i]);
      const double h9 = 0.999 * h, h1 = 0.001 * h;
      double total = 0;
      for (std::size_t j = left; j < right; ++j) {
        const double r = std::abs(x[j] - x[i]);
        double wj = 0;
        if (r <= h9) {
          if (r > h1) {
            const double u = r / h;
            const double t = 1.0 - u * u * u;
            wj = t * t * t;
          } else {
            wj = 1.0;
          }
          wj *= robust[j];
        }
        w[j] = wj;
        total += wj;
      }
      if (total <= 0.0) {
        fitted[i] = y[i];
        continue;
      }
      for (std::size_t j = left; j < right; ++j) w[j] /= total;
      if (h > 0.0) {
        double xbar = 0;
        for (std::size_t j = left; j < right; ++j) xbar += w[j] * x[j];
        double spread = 0;
        for (std::size_t j = left; j < right; ++j) spread += w[j] * (x[j] - xbar) * (x[j] - xbar);
        if (std::sqrt(spread) > 0.001 * range) {
          const double slope = (x[i] - xbar) / spread;
          for (std::size_t j = left; j < right; ++j) w[j] *= slope * (x[j] - xbar) + 1.0;
        }
      }
      double value = 0;
      for (std::size_t j = left; j < right; ++j) value += w[j] * y[j];
      fitted[i] = value;
    }
    if (iteration == opt.iterations) break;

    double mean_abs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      residual[i] = std::abs(y[i] - fitted[i]);
      mean_abs += residual[i];
    }
    mean_abs /= static_cast<double>(n);
    const double cmad = 6.0 * median(residual);
    if (cmad < 1e-7 * mean_abs || cmad == 0.0) break;  // residuals already negligible
    for (std::size_t i = 0; i < n; ++i) {
      const double u = residual[i] / cmad;
      robust[i] = u < 1.0 ? (1.0 - u * u) * (1.0 - u * u) : 0.0;
    }
  }
  return fitted;
}

// Smooths a daily series at x = 0, 1, ..., skipping missing days (which stay
// missing in the output).
inline std::vector<double> lowess_smooth(std::span<const double> series, const LowessOptions& opt = {}) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (!is_missing(series[i])) {
      xs.push_back(static_cast<double>(i));
      ys.push_back(series[i]);
    }
  }
  const std::vector<double> fit = lowess_smooth(xs, ys, opt);
  std::vector<double> out(series.size(), kMissing);
  for (std::size_t j = 0; j < xs.size(); ++j) out[static_cast<std::size_t>(xs[j])] = fit[j];
  return out;
}

// --- anomalies and extremes -----------------------------------------------------------

inline constexpr std::size_t kSeasonDays = 365;

// Mean value per seasonal day (1..365, Feb 29 merged into day 59), index 0
// unused. Days never observed are missing.
inline std::vector<double> mean_seasonal_cycle(std::span<const double> values, std::span<const Date> dates) {
  if (values.size() != dates.size()) throw DataError("values and dates lengths differ");
  std::vector<double> sum(kSeasonDays + 1, 0.0), count(kSeasonDays + 1, 0.0);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (is_missing(values[i])) continue;
    const unsigned d = seasonal_day(dates[i]);
    sum[d] += values[i];
    count[d] += 1;
  }
  std::vector<double> cycle(kSeasonDays + 1, kMissing);
  for (std::size_t d = 1; d <= kSeasonDays; ++d) {
    if (count[d] > 0) cycle[d] = sum[d] / count[d];
  }
  return cycle;
}

// value minus the cross-year mean for the same seasonal day.
inline std::vector<double> seasonal_anomalies(std::span<const double> values, std::span<const Date> dates) {
  if (values.size() != dates.size()) throw DataError("values and dates lengths differ");
  if (dates.empty() || days_between(dates.front(), dates.back()) < 365) {
    throw DataError("seasonal anomalies need at least two years of data");
  }
  const std::vector<double> cycle = mean_seasonal_cycle(values, dates);
  std::vector<double> out(values.size(), kMissing);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const unsigned d = seasonal_day(dates[i]);
    if (is_missing(cycle[d])) {
      throw DataError("no observations for day of year " + std::to_string(d) + " (" +
                      format_date(dates[i]) + ")");
    }
    if (!is_missing(values[i])) out[i] = values[i] - cycle[d];
  }
  return out;
}

inline bool is_growing_month(unsigned month) { return month >= 5 && month <= 9; }

struct ExtremeOptions {
  double tail = 0.10;
  std::size_t min_run = 5;
};

struct ConditionFlags {
  std::vector<bool> growing;
  std::vector<bool> candidate_neg;  // below the lower quantile, before run filtering
  std::vector<bool> candidate_pos;
  std::vector<bool> extreme_neg;  // candidates inside runs of >= min_run days
  std::vector<bool> extreme_pos;
  double low_threshold = kMissing;
  double high_threshold = kMissing;
};

namespace detail {
inline std::vector<bool> keep_long_runs(const std::vector<bool>& candidate, std::size_t min_run) {
  std::vector<bool> out(candidate.size(), false);
  std::size_t i = 0;
  while (i < candidate.size()) {
    if (!candidate[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < candidate.size() && candidate[j]) ++j;
    if (j - i >= min_run) std::fill(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(j), true);
    i = j;
  }
  return out;
}
}  // namespace detail

// Days strictly below the `tail` quantile (above the 1 - tail quantile) of
// the non-missing anomalies are candidates; only runs of at least min_run
// consecutive candidate days are flagged. Missing days break runs.
inline ConditionFlags flag_extremes(std::span<const double> anomalies, std::span<const Date> dates,
                                    const ExtremeOptions& opt = {}) {
  if (anomalies.size() != dates.size()) throw DataError("anomalies and dates lengths differ");
  if (!(opt.tail > 0.0 && opt.tail < 0.5)) throw ConfigError("extreme tail must lie in (0, 0.5)");
  if (opt.min_run == 0) throw ConfigError("minimum run length must be >= 1");
  const std::size_t n = anomalies.size();
  ConditionFlags f;
  f.growing.resize(n);
  f.candidate_neg.assign(n, false);
  f.candidate_pos.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) f.growing[i] = is_growing_month(month_of(dates[i]));
  std::vector<double> observed;
  for (double a : anomalies) {
    if (!is_missing(a)) observed.push_back(a);
  }
  if (!observed.empty()) {
    std::sort(observed.begin(), observed.end());
    f.low_threshold = quantile_sorted(observed, opt.tail);
    f.high_threshold = quantile_sorted(observed, 1.0 - opt.tail);
    for (std::size_t i = 0; i < n; ++i) {
      if (is_missing(anomalies[i])) continue;
      f.candidate_neg[i] = anomalies[i] < f.low_threshold;
      f.candidate_pos[i] = anomalies[i] > f.high_threshold;
    }
  }
  f.extreme_neg = detail::keep_long_runs(f.candidate_neg, opt.min_run);
  f.extreme_pos = detail::keep_long_runs(f.candidate_pos, opt.min_run);
  return f;
}

}  // namespace gppcast::features
