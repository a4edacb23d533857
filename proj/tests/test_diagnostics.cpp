#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "modestruct/diagnostics.hpp"

using namespace modestruct;

namespace {

SourceModel bright_pair_model() {
  SourceModel m;
  m.modes = {{ModeType::Thermal, 18.98, Occupancy::Conjugated, 0.44, 0.53},
             {ModeType::Thermal, 0.93, Occupancy::Conjugated, 0.44, 0.53},
             {ModeType::Poissonian, 0.07, Occupancy::SignalOnly},
             {ModeType::Poissonian, 0.21, Occupancy::IdlerOnly}};
  return m;
}

SourceModel small_model() {
  SourceModel m;
  m.n_max = 12;
  m.modes = {{ModeType::Thermal, 1.0, Occupancy::Conjugated, 0.6, 0.7}, {ModeType::Poissonian, 0.2, Occupancy::SignalOnly}};
  return m;
}

double ks_uniform(std::vector<double> p) {
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k)
    d = std::max({d, std::abs((k + 1) / n - p[k]), std::abs(p[k] - k / n)});
  return d;
}

} // namespace

TEST(Hillery, PerfectlyCorrelatedLosslessThermal) {
  SourceModel m;
  m.n_max = 80;
  m.modes = {{ModeType::Thermal, 1.0, Occupancy::Conjugated, 1.0, 1.0}};
  const HilleryResult h = hillery(full_jpd(m));
  EXPECT_EQ(h.odd_sum, 0.0);
  EXPECT_NEAR(h.even_sum, 0.5, 1e-12);
  EXPECT_NEAR(h.vacuum, 0.5, 1e-15);
  EXPECT_FALSE(h.classical());
  EXPECT_TRUE(std::isnan(h.significance));
}

TEST(Hillery, SumsPartitionUnity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 20; ++k) {
    SourceModel m;
    m.n_max = 6 + k % 10;
    m.modes = {{ModeType::Thermal, 3.0 * u(rng), Occupancy::Conjugated, u(rng), u(rng)},
               {ModeType::Poissonian, u(rng), Occupancy::IdlerOnly}};
    const ProbMatrix jpd = full_jpd(m);
    const HilleryResult h = hillery(jpd);
    EXPECT_NEAR(h.even_sum + h.odd_sum + h.vacuum + h.tail_mass, 1.0, 1e-12);
    EXPECT_NEAR(h.even_normalized + h.odd_normalized + h.vacuum / (1.0 - h.tail_mass), 1.0, 1e-12);
  }
}

TEST(Hillery, UncorrelatedClassicalStatesSatisfyBound) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 4.0);
  for (int k = 0; k < 30; ++k) {
    SourceModel m;
    m.n_max = 10;
    m.modes = {{k % 2 ? ModeType::Thermal : ModeType::Poissonian, u(rng), Occupancy::SignalOnly},
               {ModeType::Thermal, u(rng), Occupancy::IdlerOnly},
               {ModeType::Poissonian, u(rng), Occupancy::IdlerOnly}};
    const HilleryResult h = hillery(full_jpd(m));
    EXPECT_LE(h.even_sum, h.odd_sum + h.tail_mass) << "instance " << k;
  }
}

TEST(Hillery, CountsCarryBinomialSigmas) {
  CountMatrix c(2);
  c.n_tot = 1000;
  c(0, 0) = 500;
  c(1, 1) = 300;
  c(1, 0) = 150;
  const HilleryResult h = hillery(c);
  EXPECT_DOUBLE_EQ(h.even_sum, 0.3);
  EXPECT_DOUBLE_EQ(h.odd_sum, 0.15);
  EXPECT_DOUBLE_EQ(h.tail_mass, 0.05);
  EXPECT_DOUBLE_EQ(h.even_sigma, std::sqrt(0.3 * 0.7 / 1000));
  EXPECT_DOUBLE_EQ(h.odd_sigma, std::sqrt(0.15 * 0.85 / 1000));
  EXPECT_NEAR(h.significance, 0.15 / std::hypot(h.even_sigma, h.odd_sigma), 1e-12);
  EXPECT_NEAR(h.even_normalized, 300.0 / 950.0, 1e-15);
}

TEST(Hillery, BrightPairModelNumbers) {
  // Lossy detected state: classical side, close to 0.4775 vs 0.4924.
  const HilleryResult lossy = hillery(full_jpd(bright_pair_model()), 1e6);
  EXPECT_TRUE(lossy.even_normalized <= lossy.odd_normalized);
  EXPECT_NEAR(lossy.even_normalized, 0.4775, 0.01);
  EXPECT_NEAR(lossy.odd_normalized, 0.4924, 0.01);
  // Lossless back-projection: 0.65(4) vs 0.34(2).
  const HilleryResult lossless = hillery(lossless_jpd(bright_pair_model()));
  EXPECT_NEAR(lossless.even_normalized, 0.65, 0.04);
  EXPECT_NEAR(lossless.odd_normalized, 0.34, 0.02);
  EXPECT_GT(lossless.even_sum, lossless.odd_sum);
}

TEST(Hillery, BootstrapSigmasDeterministic) {
  const SourceModel truth = small_model();
  const CountMatrix c = sample_counts(full_jpd(truth), 100000, 4);
  FitConfig cfg;
  cfg.optimizer.restarts = 2;
  SourceModel start = truth;
  start.modes[0].eta_s = start.modes[0].eta_i = 0.5;
  const FitResult fit = fit_jpd(c, start, nullptr, cfg);
  ASSERT_EQ(fit.covariance.rows(), static_cast<Eigen::Index>(fit.params.size()));
  const HilleryResult a = hillery_bootstrap(fit, 50, 11);
  const HilleryResult b = hillery_bootstrap(fit, 50, 11);
  EXPECT_EQ(a.sigma_method, "parametric bootstrap");
  EXPECT_GT(a.even_sigma, 0.0);
  EXPECT_GT(a.odd_sigma, 0.0);
  EXPECT_EQ(a.even_sigma, b.even_sigma);
  EXPECT_EQ(a.even_sum, hillery(lossless_jpd(fit.model)).even_sum);
}

TEST(PearsonPvalue, CalibratedUnderTheModel) {
  const ProbMatrix jpd = full_jpd(small_model());
  std::vector<double> p;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const CountMatrix c = sample_counts(jpd, 20000, derive_seed(21, seed));
    const PearsonResult r = pearson_pvalue(c, jpd, 0);
    ASSERT_TRUE(r.defined);
    p.push_back(r.p_value);
  }
  EXPECT_LT(ks_uniform(p), 0.1);
}

TEST(PearsonPvalue, SwappedBrightBinsRejected) {
  const ProbMatrix jpd = full_jpd(small_model());
  CountMatrix c = sample_counts(jpd, 100000, 1);
  std::swap(c(0, 0), c(1, 1));
  EXPECT_LT(pearson_pvalue(c, jpd, 0).p_value, 1e-6);
}

TEST(PearsonPvalue, UndefinedWithoutDegreesOfFreedom) {
  CountMatrix c(1);
  c.n_tot = 10;
  c(0, 0) = 10;
  const PearsonResult r = pearson_pvalue(c, vacuum_matrix(1), 3);
  EXPECT_FALSE(r.defined);
  EXPECT_TRUE(std::isnan(r.p_value));
}

TEST(RelativeError, MatchesDefinition) {
  SourceModel a = small_model(), b = small_model();
  a.modes[0].mu = 1.1;
  a.modes[1].mu = 0.1;
  EXPECT_NEAR(relative_error(a, b), 0.2 / 1.2, 1e-15);
  EXPECT_EQ(relative_error(b, b), 0.0);
}

TEST(UncertaintyCurve, RejectsSingleRepeat) {
  const std::vector<std::uint64_t> n{1000};
  EXPECT_THROW(uncertainty_curve(small_model(), n, 1, 0, UncertaintyConfig{}), std::invalid_argument);
}

TEST(UncertaintyCurve, NoiselessAndDecreasing) {
  UncertaintyConfig cfg;
  cfg.fit.optimizer.restarts = 1;
  const std::vector<std::uint64_t> n{0, 1000, 100000};
  const auto pts = uncertainty_curve(small_model(), n, 6, 5, cfg);
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_EQ(pts[0].used + pts[0].excluded, 1);
  EXPECT_LT(pts[0].mean_error, 1e-4);
  EXPECT_EQ(pts[1].used + pts[1].excluded, 6);
  EXPECT_LT(pts[2].mean_error, pts[1].mean_error);
  const auto again = uncertainty_curve(small_model(), n, 6, 5, cfg);
  EXPECT_EQ(again[1].errors, pts[1].errors);
}
