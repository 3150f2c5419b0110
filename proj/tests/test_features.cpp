#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>

#include "gppcast/features.hpp"
#include "gppcast/random.hpp"

namespace gppcast::features {
namespace {

// --- vegetation indices ----------------------------------------------------------

Reflectance canopy(double red, double nir) {
  Reflectance r;
  r.blue = 0.03;
  r.green = 0.06;
  r.red = red;
  r.red_edge = 0.2;
  r.nir = nir;
  r.swir1 = 0.15;
  r.swir2 = 0.08;
  return r;
}

TEST(Vis, NdviCases) {
  EXPECT_EQ(compute_vis(canopy(0.3, 0.3))[0], 0.0);
  EXPECT_EQ(compute_vis(canopy(0.3, 0.3))[1], 0.0);
  const ViVector v = compute_vis(canopy(0.1, 0.4));
  EXPECT_NEAR(v[0], 0.6, 1e-15);
  EXPECT_NEAR(v[1], std::tanh(0.36), 1e-15);
  EXPECT_NEAR(v[3], 0.6 * 0.4, 1e-15);
  EXPECT_NEAR(v[2], 2.5 * 0.3 / (0.4 + 0.6 - 0.225 + 1.0), 1e-15);
  for (double x : v) EXPECT_TRUE(std::isfinite(x));
}

TEST(Vis, ZeroDenominatorIsMissing) {
  Reflectance dark;
  const ViVector v = compute_vis(dark);
  EXPECT_TRUE(is_missing(v[0]));
  EXPECT_TRUE(is_missing(v[4]));
  EXPECT_TRUE(is_missing(v[9]));
  EXPECT_EQ(v[8], 0.0);  // SAVI has a soil offset in its denominator
}

TEST(Vis, MaskedBandPropagatesAndRangeIsChecked) {
  Reflectance r = canopy(0.1, 0.4);
  r.nir = kMissing;
  for (double x : compute_vis(r)) EXPECT_TRUE(is_missing(x));
  r.nir = 1.2;
  EXPECT_THROW(compute_vis(r), DataError);
}

// --- PCA -------------------------------------------------------------------------

Eigen::MatrixXd latent_matrix(std::size_t rows, std::size_t cols, std::size_t factors, double noise,
                              std::uint64_t seed) {
  Rng rng(seed);
  Eigen::MatrixXd scores(rows, factors), loadings(factors, cols);
  for (Eigen::Index i = 0; i < scores.size(); ++i) scores.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < loadings.size(); ++i) loadings.data()[i] = rng.normal();
  Eigen::MatrixXd x = scores * loadings;
  const double scale = std::sqrt(x.squaredNorm() / static_cast<double>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += noise * scale * rng.normal() + 0.5;
  return x;
}

TEST(Pca, RankOneData) {
  Eigen::MatrixXd x(50, 4);
  for (int i = 0; i < 50; ++i) x.row(i) << i, 2.0 * i, -i, 7.0;
  const PcaModel m = pca_fit(x);
  ASSERT_EQ(m.n_components(), 1u);
  EXPECT_NEAR(m.explained_ratio[0], 1.0, 1e-12);
}

TEST(Pca, ConstantDataHasNoComponents) {
  const PcaModel m = pca_fit(Eigen::MatrixXd::Constant(10, 3, 2.0));
  EXPECT_EQ(m.n_components(), 0u);
  const std::vector<double> x = {2.0, 2.0, 2.0};
  for (double s : pca_transform(m, x)) EXPECT_EQ(s, 0.0);
}

TEST(Pca, LatentFactorsBoundComponentCount) {
  const PcaModel exact = pca_fit(latent_matrix(400, 122, 10, 0.0, 1));
  EXPECT_LE(exact.n_components(), 10u);
  const PcaModel noisy = pca_fit(latent_matrix(400, 122, 10, 0.01, 2));
  EXPECT_LE(noisy.n_components(), 12u);
  EXPECT_GT(noisy.captured_ratio(), 0.99);
}

TEST(Pca, MatchesSingularValueOracle) {
  const Eigen::MatrixXd x = latent_matrix(200, 30, 6, 0.05, 3);
  const PcaModel m = pca_fit(x, 0.999999, 30);
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  const double total = sv.squaredNorm();
  for (std::size_t i = 0; i < m.n_components(); ++i) {
    EXPECT_NEAR(m.explained_ratio[i], sv(i) * sv(i) / total, 1e-10);
    // Same axis up to sign; trailing noise eigenvalues are too close to pin down vectors.
    if (i < 6) {
      EXPECT_NEAR(std::abs(m.components.row(i).dot(svd.matrixV().col(i))), 1.0, 1e-8);
    }
  }
}

TEST(Pca, OrthonormalDecreasingCentred) {
  const Eigen::MatrixXd x = latent_matrix(300, 122, 10, 0.01, 4);
  const PcaModel m = pca_fit(x);
  const Eigen::MatrixXd gram = m.components * m.components.transpose();
  const auto k = static_cast<Eigen::Index>(m.n_components());
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff(), 1e-8);
  for (std::size_t i = 1; i < m.explained_ratio.size(); ++i)
    EXPECT_LE(m.explained_ratio[i], m.explained_ratio[i - 1]);
  EXPECT_LE(m.captured_ratio(), 1.0 + 1e-12);
  const std::vector<double> mean(m.mean.data(), m.mean.data() + m.mean.size());
  const std::vector<double> scores = pca_transform(m, mean);
  ASSERT_EQ(scores.size(), 18u);
  for (double s : scores) EXPECT_LE(std::abs(s), 1e-10);
}

TEST(Pca, ScoresAreUncorrelated) {
  const Eigen::MatrixXd x = latent_matrix(300, 40, 8, 0.02, 5);
  const PcaModel m = pca_fit(x);
  Eigen::MatrixXd s(x.rows(), m.n_components());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd row = x.row(i).transpose();
    const auto sc = pca_transform(m, std::span<const double>(row.data(), row.size()), m.n_components());
    for (std::size_t j = 0; j < sc.size(); ++j) s(i, j) = sc[j];
  }
  const Eigen::MatrixXd cov = s.transpose() * s / static_cast<double>(x.rows() - 1);
  for (Eigen::Index i = 0; i < cov.rows(); ++i)
    for (Eigen::Index j = 0; j < cov.cols(); ++j)
      if (i != j) {
        EXPECT_LT(std::abs(cov(i, j)) / std::sqrt(cov(i, i) * cov(j, j)), 1e-8);
      }
}

TEST(Pca, ReconstructionErrorBoundedByDiscardedVariance) {
  const Eigen::MatrixXd x = latent_matrix(250, 50, 12, 0.1, 6);
  const PcaModel m = pca_fit(x, 0.9);
  double err = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd row = x.row(i).transpose();
    const std::span<const double> v(row.data(), row.size());
    const auto back = pca_inverse(m, pca_transform(m, v));
    for (Eigen::Index j = 0; j < row.size(); ++j) err += (back[j] - row(j)) * (back[j] - row(j));
  }
  err /= static_cast<double>(x.rows());
  EXPECT_LE(err, (1.0 - m.captured_ratio()) * m.total_variance * (1 + 1e-9));
}

TEST(Pca, UnitStepAlongFirstComponent) {
  const PcaModel m = pca_fit(latent_matrix(100, 12, 4, 0.05, 7));
  Eigen::VectorXd x = m.mean + 3.0 * m.components.row(0).transpose();
  const auto s = pca_transform(m, std::span<const double>(x.data(), x.size()));
  EXPECT_NEAR(s[0], 3.0, 1e-12);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_NEAR(s[i], 0.0, 1e-12);
}

TEST(Pca, Errors) {
  EXPECT_THROW(pca_fit(Eigen::MatrixXd::Ones(1, 3)), DataError);
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(5, 3);
  x(2, 1) = kMissing;
  EXPECT_THROW(pca_fit(x), DataError);
  const PcaModel m = pca_fit(Eigen::MatrixXd::Random(5, 3));
  const std::vector<double> wrong = {1.0, 2.0};
  EXPECT_THROW(pca_transform(m, wrong), DataError);
}

// --- radar -------------------------------------------------------------------------

TEST(Radar, DprviCases) {
  EXPECT_EQ(dprvi(0.2, 0.2), 2.0);
  EXPECT_EQ(dprvi(0.3, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(dprvi(0.3, 0.1), 1.0);
  EXPECT_TRUE(is_missing(dprvi(0.0, 0.0)));
  EXPECT_THROW(dprvi(-0.1, 0.2), DataError);
  double prev = -1;
  for (double vh = 0.0; vh < 5.0; vh += 0.01) {
    const double v = dprvi(0.3, vh);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 4.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Radar, Decibels) {
  EXPECT_EQ(to_db(1.0), 0.0);
  EXPECT_NEAR(to_db(0.1), -10.0, 1e-14);
  EXPECT_NEAR(to_db(0.5), -3.0102999566398120, 1e-12);
  EXPECT_TRUE(is_missing(to_db(0.0)));
  EXPECT_TRUE(is_missing(to_db(-1.0)));
  for (double x = 1e-6; x <= 1e3; x *= 1.37) EXPECT_NEAR(from_db(to_db(x)) / x, 1.0, 1e-12);
}

// --- interpolation -------------------------------------------------------------------

TEST(Interpolate, Cases) {
  const double m = kMissing;
  EXPECT_EQ(interpolate_gaps(std::vector<double>{1, m, 3}), (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(interpolate_gaps(std::vector<double>{m, 5, m}), (std::vector<double>{5, 5, 5}));
  EXPECT_EQ(interpolate_gaps(std::vector<double>{m, m, 2, m, 8, m}), (std::vector<double>{2, 2, 2, 5, 8, 8}));
  EXPECT_THROW(interpolate_gaps(std::vector<double>{m, m}), DataError);
}

TEST(Interpolate, ChordAcrossLongGap) {
  std::vector<double> s(100);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sin(0.1 * i);
  for (std::size_t i = 31; i < 61; ++i) s[i] = kMissing;
  const auto f = interpolate_gaps(s);
  for (std::size_t i = 31; i < 61; ++i) {
    const double expected = s[30] + (s[61] - s[30]) * (static_cast<double>(i) - 30.0) / 31.0;
    EXPECT_NEAR(f[i], expected, 1e-14);
  }
}

// --- LOWESS -------------------------------------------------------------------------

std::vector<double> wiggle(std::size_t n) {
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(i);
    y[i] = std::sin(x / 10.0) + 0.3 * std::sin(x * x * 0.7) + (i % 37 == 0 ? 4.0 : 0.0);
  }
  return y;
}

std::vector<double> index_axis(std::size_t n) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i);
  return x;
}

// Values from tests/oracles/lowess_oracle.py (statsmodels 0.14).
using Frozen = std::map<std::size_t, double>;

void expect_frozen(const std::vector<double>& fit, const Frozen& expected, double tol) {
  for (const auto& [i, v] : expected) EXPECT_NEAR(fit[i], v, tol) << "index " << i;
}

TEST(Lowess, MatchesReferenceImplementation) {
  const auto x = index_axis(200);
  const auto y = wiggle(200);
  expect_frozen(lowess_smooth(x, y, {0.08, 0}), Frozen{{0, 1.3188647548301675}, {1, 1.1945095409233297}, {5, 0.7822607144610882}, {37, -0.01660532143656174}, {50, -0.9870297431266537}, {74, 1.2075320096714093}, {100, -0.4966081008607504}, {111, -0.5733238045522752}, {150, 1.1026641039408267}, {185, 0.020055142377076403}, {198, 0.6635814406365473}, {199, 0.7264050693026726}}, 1e-10);
  expect_frozen(lowess_smooth(x, y, {0.08, 2}), Frozen{{0, 0.053531275776086615}, {1, 0.1353860099005511}, {5, 0.4725679017090027}, {37, -0.41587103708557205}, {50, -0.9873511400856327}, {74, 0.7427118006944602}, {100, -0.49536821527971253}, {111, -0.9649966125007002}, {150, 0.6775995233322069}, {185, -0.42156959436528646}, {198, 0.652012842075121}, {199, 0.7176771062431031}}, 1e-10);
  expect_frozen(lowess_smooth(x, y, {0.3, 3}), Frozen{{0, 1.057698128219116}, {1, 1.0352114470190923}, {5, 0.9380001424756186}, {37, -0.21367012990707604}, {50, -0.440878076721706}, {74, 0.4132493817165866}, {100, -0.24042908674698232}, {111, -0.43429248617068933}, {150, 0.30806611304340586}, {185, -0.2073076373420096}, {198, 0.14096465517311668}, {199, 0.173488594050618}}, 1e-10);
}

TEST(Lowess, FullSpanOnQuadraticIsWeightedLinearFit) {
  const auto x = index_axis(200);
  std::vector<double> y(200);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (x[i] / 50.0) * (x[i] / 50.0);
  expect_frozen(lowess_smooth(x, y, {1.0, 0}), Frozen{{0, -1.360651397720331}, {20, -0.2578396782750645}, {100, 4.5761317007991495}, {199, 14.479748602279667}}, 1e-10);
}

TEST(Lowess, ReproducesLines) {
  const auto x = index_axis(150);
  std::vector<double> y(150);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 3.0 - 0.25 * x[i];
  const auto f = lowess_smooth(x, y, {0.08, 2});
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(f[i], y[i], 1e-9);
}

TEST(Lowess, AttenuatesSpike) {
  std::vector<double> y(200, 0.0);
  y[100] = 10.0;
  const auto f = lowess_smooth(index_axis(200), y, {0.08, 2});
  EXPECT_LT(f[100], 0.5 * y[100]);
  expect_frozen(f, Frozen{{98, 1.0303133580333719}, {100, 1.080158789860707}, {102, 1.0303133580333719}}, 1e-12);
}

TEST(Lowess, TranslationEquivariant) {
  const auto y = wiggle(180);
  std::vector<double> shifted = y;
  for (double& v : shifted) v += 12.5;
  const auto a = lowess_smooth(y, {0.1, 2});
  const auto b = lowess_smooth(shifted, {0.1, 2});
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(b[i], a[i] + 12.5, 1e-9);
}

TEST(Lowess, DailySeriesSkipsMissingDays) {
  auto y = wiggle(120);
  y[10] = y[11] = kMissing;
  const auto f = lowess_smooth(y, {0.2, 1});
  EXPECT_TRUE(is_missing(f[10]));
  EXPECT_TRUE(is_missing(f[11]));
  EXPECT_FALSE(is_missing(f[12]));
}

TEST(Lowess, Errors) {
  EXPECT_THROW(lowess_smooth(std::vector<double>{1, 2}), DataError);
  EXPECT_THROW(lowess_smooth(wiggle(20), {0.1, 2}), ConfigError);
  EXPECT_THROW(lowess_smooth(wiggle(20), {0.0, 2}), ConfigError);
}

// --- anomalies and extremes -----------------------------------------------------------

std::vector<Date> daily(Date start, std::size_t n) {
  std::vector<Date> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = add_days(start, static_cast<long>(i));
  return d;
}

TEST(Anomalies, IdenticalYearsGiveZero) {
  const auto dates = daily(make_date(2017, 1, 1), 365 * 3);
  std::vector<double> v(dates.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(2 * std::numbers::pi * seasonal_day(dates[i]) / 365.0);
  for (double a : seasonal_anomalies(v, dates)) EXPECT_NEAR(a, 0.0, 1e-15);
}

TEST(Anomalies, ShiftedYearGivesHalf) {
  const auto dates = daily(make_date(2017, 1, 1), 730);
  std::vector<double> v(dates.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::cos(0.05 * (i % 365)) + (i >= 365 ? 1.0 : 0.0);
  const auto a = seasonal_anomalies(v, dates);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], i >= 365 ? 0.5 : -0.5, 1e-12);
}

TEST(Anomalies, LeapDayMergesWithFebruary28) {
  const auto dates = daily(make_date(2019, 1, 1), 365 + 366);  // 2019, 2020
  std::vector<double> v(dates.size(), 1.0);
  for (std::size_t i = 0; i < v.size(); ++i)
    if (format_date(dates[i]) == "2020-02-29") v[i] = 4.0;
  const auto a = seasonal_anomalies(v, dates);
  // Bin 59 holds {1, 1, 4}: mean 2.
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string s = format_date(dates[i]);
    const double expected = s == "2020-02-29" ? 2.0 : s.ends_with("-02-28") ? -1.0 : 0.0;
    EXPECT_NEAR(a[i], expected, 1e-15) << s;
  }
}

TEST(Anomalies, NoiseVarianceIsRecovered) {
  const std::size_t years = 10;
  const auto dates = daily(make_date(2001, 1, 1), 365 * years + 2);  // covers 2 leap days
  Rng rng(42);
  const double sd = 0.3;
  std::vector<double> v(dates.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = 5.0 + 3.0 * std::sin(2 * std::numbers::pi * seasonal_day(dates[i]) / 365.0) + rng.normal(0.0, sd);
  const auto a = seasonal_anomalies(v, dates);
  double var = 0;
  for (double x : a) var += x * x;
  var /= static_cast<double>(a.size());
  // Removing a Y-year mean leaves (1 - 1/Y) of the noise variance.
  const double expected = sd * sd * (1.0 - 1.0 / years);
  EXPECT_NEAR(var / expected, 1.0, 0.05);
}

TEST(Anomalies, Errors) {
  const auto one_year = daily(make_date(2018, 1, 1), 365);
  EXPECT_THROW(seasonal_anomalies(std::vector<double>(365, 1.0), one_year), DataError);
  const auto dates = daily(make_date(2018, 1, 1), 730);
  std::vector<double> v(730, 1.0);
  v[40] = v[40 + 365] = kMissing;
  EXPECT_THROW(seasonal_anomalies(v, dates), DataError);
}

// Background pattern with no two consecutive low (or high) days.
std::vector<double> sawtooth(std::size_t n) {
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = static_cast<double>((i * 7) % 10) - 4.5;
  return a;
}

TEST(Extremes, FourDayRunIsNotFlagged) {
  auto a = sawtooth(300);
  for (std::size_t i = 100; i < 104; ++i) a[i] = -50.0;
  const auto f = flag_extremes(a, daily(make_date(2018, 1, 1), a.size()));
  for (std::size_t i = 100; i < 104; ++i) EXPECT_TRUE(f.candidate_neg[i]);
  for (bool b : f.extreme_neg) EXPECT_FALSE(b);
}

TEST(Extremes, FiveDayRunIsFlagged) {
  auto a = sawtooth(300);
  for (std::size_t i = 100; i < 105; ++i) a[i] = -50.0;
  for (std::size_t i = 200; i < 206; ++i) a[i] = 50.0;
  const auto f = flag_extremes(a, daily(make_date(2018, 1, 1), a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(f.extreme_neg[i], i >= 100 && i < 105) << i;
    EXPECT_EQ(f.extreme_pos[i], i >= 200 && i < 206) << i;
  }
}

TEST(Extremes, MissingDaysBreakRuns) {
  auto a = sawtooth(300);
  for (std::size_t i = 100; i < 106; ++i) a[i] = -50.0;
  a[103] = kMissing;
  const auto f = flag_extremes(a, daily(make_date(2018, 1, 1), a.size()));
  for (bool b : f.extreme_neg) EXPECT_FALSE(b);
}

TEST(Extremes, GrowingSeasonIsMayToSeptember) {
  const auto dates = daily(make_date(2018, 4, 30), 160);
  const auto f = flag_extremes(std::vector<double>(dates.size(), 0.0), dates);
  EXPECT_FALSE(f.growing[0]);  // Apr 30
  EXPECT_TRUE(f.growing[1]);   // May 1
  EXPECT_TRUE(f.growing[46]);  // Jun 15
  EXPECT_TRUE(f.growing[153]); // Sep 30
  EXPECT_FALSE(f.growing[154]);
}

TEST(Extremes, UniformTailsAndRunLengths) {
  Rng rng(8);
  std::vector<double> a(10000);
  for (double& x : a) x = rng.uniform(-1.0, 1.0);
  const auto f = flag_extremes(a, daily(make_date(1990, 1, 1), a.size()));
  double neg = 0, pos = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    neg += f.candidate_neg[i];
    pos += f.candidate_pos[i];
    EXPECT_FALSE(f.extreme_neg[i] && f.extreme_pos[i]);
  }
  EXPECT_NEAR(neg / a.size(), 0.10, 0.01);
  EXPECT_NEAR(pos / a.size(), 0.10, 0.01);
  for (const auto* flags : {&f.extreme_neg, &f.extreme_pos}) {
    std::size_t run = 0;
    for (std::size_t i = 0; i <= flags->size(); ++i) {
      if (i < flags->size() && (*flags)[i]) {
        ++run;
      } else {
        if (run > 0) {
          EXPECT_GE(run, 5u);
        }
        run = 0;
      }
    }
  }
}

TEST(Quantile, Type7) {
  const std::vector<double> x = {3, 1, 4, 1, 5, 9, 2, 6};
  EXPECT_DOUBLE_EQ(quantile(x, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(quantile(x, 1.0), 9.0);
  EXPECT_DOUBLE_EQ(quantile(x, 0.5), 3.5);
  EXPECT_DOUBLE_EQ(quantile(x, 0.1), 1.0);    // h = 0.7 between 1 and 1
  EXPECT_DOUBLE_EQ(quantile(x, 0.9), 6.0 + 0.3 * 3.0);  // numpy.percentile(x, 90)
}

}  // namespace
}  // namespace gppcast::features
