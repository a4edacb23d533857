#include <gtest/gtest.h>

#include <random>

#include "modestruct/forward_model.hpp"
#include "oracles.hpp"

using namespace modestruct;

namespace {

ModeSpec conj(ModeType t, double mu, double es, double ei) { return {t, mu, Occupancy::Conjugated, es, ei}; }
ModeSpec sig(ModeType t, double mu) { return {t, mu, Occupancy::SignalOnly, 1.0, 1.0}; }
ModeSpec idl(ModeType t, double mu) { return {t, mu, Occupancy::IdlerOnly, 1.0, 1.0}; }

SourceModel bright_pair_model() {
  SourceModel m;
  m.n_max = 40;
  m.modes = {conj(ModeType::Thermal, 18.98, 0.44, 0.53), conj(ModeType::Thermal, 0.93, 0.44, 0.53),
             sig(ModeType::Poissonian, 0.07), idl(ModeType::Poissonian, 0.21)};
  return m;
}

double max_abs_diff(const ProbMatrix& a, const ProbMatrix& b) {
  double d = 0.0;
  for (int s = 0; s <= a.n_max(); ++s)
    for (int i = 0; i <= a.n_max(); ++i) d = std::max(d, std::abs(a(s, i) - b(s, i)));
  return d;
}

void expect_normalized(const ProbMatrix& m, double tol = 1e-10) {
  EXPECT_NEAR(m.total() + m.tail_mass, 1.0, tol);
  for (double v : m.p.values()) EXPECT_GE(v, 0.0);
}

Pmf row_marginal(const ProbMatrix& m) {
  Pmf out;
  out.probs.assign(static_cast<std::size_t>(m.n_max()) + 1, 0.0);
  for (int s = 0; s <= m.n_max(); ++s)
    for (int i = 0; i <= m.n_max(); ++i) out.probs[static_cast<std::size_t>(s)] += m(s, i);
  return out;
}

} // namespace

TEST(UncorrelatedPmf, EmptyIsVacuum) {
  const Pmf p = uncorrelated_pmf({}, 10);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p.total(), 1.0);
}

TEST(UncorrelatedPmf, SinglePoissonBackground) {
  const std::vector<ModeSpec> modes{sig(ModeType::Poissonian, 0.07)};
  const Pmf p = uncorrelated_pmf(modes, 40);
  const Pmf ref = pmf(ModeType::Poissonian, 0.07, 40);
  for (std::size_t n = 0; n <= 40; ++n) EXPECT_DOUBLE_EQ(p[n], ref[n]);
}

TEST(UncorrelatedPmf, TwoThermalsMatchNestedSum) {
  const std::vector<ModeSpec> modes{sig(ModeType::Thermal, 0.5), sig(ModeType::Thermal, 0.5)};
  const Pmf p = uncorrelated_pmf(modes, 20);
  for (int m = 0; m <= 20; ++m) {
    double ref = 0.0;
    for (int k = 0; k <= m; ++k)
      ref += oracle::closed_form_pmf(ModeType::Thermal, 0.5, k) * oracle::closed_form_pmf(ModeType::Thermal, 0.5, m - k);
    EXPECT_NEAR(p[static_cast<std::size_t>(m)], ref, 1e-15);
  }
}

TEST(UncorrelatedPmf, MixedOccupancyIsRejected) {
  const std::vector<ModeSpec> modes{sig(ModeType::Thermal, 0.5), idl(ModeType::Thermal, 0.5)};
  EXPECT_THROW(uncorrelated_pmf(modes, 10), std::invalid_argument);
}

TEST(CorrelatedJpd, LosslessThermalIsDiagonal) {
  const std::vector<ModeSpec> modes{conj(ModeType::Thermal, 1.0, 1.0, 1.0)};
  const ProbMatrix m = correlated_jpd(modes, 20);
  for (int s = 0; s <= 20; ++s)
    for (int i = 0; i <= 20; ++i) {
      if (s == i)
        EXPECT_NEAR(m(s, i), std::ldexp(1.0, -(s + 1)), 1e-15);
      else
        EXPECT_EQ(m(s, i), 0.0);
    }
  EXPECT_NEAR(m.tail_mass, std::ldexp(1.0, -21), 1e-14);
}

TEST(CorrelatedJpd, BlockedIdlerLeavesThermalMarginal) {
  const std::vector<ModeSpec> modes{conj(ModeType::Thermal, 5.0, 1.0, 0.0)};
  const ProbMatrix m = correlated_jpd(modes, 40);
  const Pmf ref = pmf(ModeType::Thermal, 5.0, 40);
  for (int s = 0; s <= 40; ++s) {
    EXPECT_NEAR(m(s, 0), ref[static_cast<std::size_t>(s)], 1e-14);
    for (int i = 1; i <= 40; ++i) EXPECT_EQ(m(s, i), 0.0);
  }
}

TEST(CorrelatedJpd, TwoModesMatchSixIndexEnumeration) {
  const ModeSpec a = conj(ModeType::Thermal, 2.0, 0.7, 0.6);
  const ModeSpec b = conj(ModeType::Thermal, 1.0, 0.3, 0.9);
  const int n_max = 8;
  const std::vector<ModeSpec> modes{a, b};
  const ProbMatrix m = correlated_jpd(modes, n_max);

  const int ka = oracle::generation_limit(ModeType::Thermal, 2.0);
  const int kb = oracle::generation_limit(ModeType::Thermal, 1.0);
  std::vector<std::vector<double>> ref(n_max + 1, std::vector<double>(n_max + 1, 0.0));
  for (int k1 = 0; k1 <= ka; ++k1) {
    const double p1 = oracle::closed_form_pmf(ModeType::Thermal, 2.0, k1);
    for (int k2 = 0; k2 <= kb; ++k2) {
      const double p2 = oracle::closed_form_pmf(ModeType::Thermal, 1.0, k2);
      for (int s1 = 0; s1 <= std::min(k1, n_max); ++s1)
        for (int s2 = 0; s2 <= std::min(k2, n_max - s1); ++s2)
          for (int i1 = 0; i1 <= std::min(k1, n_max); ++i1)
            for (int i2 = 0; i2 <= std::min(k2, n_max - i1); ++i2)
              ref[s1 + s2][i1 + i2] += p1 * p2 * loss_factor(s1, k1, 0.7) * loss_factor(s2, k2, 0.3) *
                                       loss_factor(i1, k1, 0.6) * loss_factor(i2, k2, 0.9);
    }
  }
  for (int s = 0; s <= n_max; ++s)
    for (int i = 0; i <= n_max; ++i) EXPECT_NEAR(m(s, i), ref[s][i], 1e-12) << s << "," << i;
  expect_normalized(m);
}

TEST(CorrelatedJpd, SharedLossGroupMatchesPairwiseConvolution) {
  const std::vector<ModeSpec> modes{{ModeType::Thermal, 1.7, Occupancy::Conjugated, 0.45, 0.7},
                                    {ModeType::Poissonian, 0.8, Occupancy::Conjugated, 0.45, 0.7},
                                    {ModeType::SinglePhoton, 0.3, Occupancy::Conjugated, 0.45, 0.7}};
  const int n = 9;
  const ProbMatrix merged = correlated_jpd(modes, n);
  const ProbMatrix chained =
      convolve2d(convolve2d(single_mode_jpd(modes[0], n), single_mode_jpd(modes[1], n)), single_mode_jpd(modes[2], n));
  SourceModel m;
  m.n_max = n;
  m.modes = modes;
  const auto ref = oracle::brute_force_jpd(m);
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) {
      EXPECT_NEAR(merged(s, i), chained(s, i), 1e-13);
      EXPECT_NEAR(merged(s, i), ref[s][i], 1e-12);
    }
  EXPECT_NEAR(merged.tail_mass, chained.tail_mass, 1e-12);
}

TEST(FullJpd, IndependentArmsOnly) {
  SourceModel model;
  model.n_max = 20;
  model.modes = {sig(ModeType::Poissonian, 1.0)};
  const ProbMatrix m = full_jpd(model);
  const Pmf ref = pmf(ModeType::Poissonian, 1.0, 20);
  for (int s = 0; s <= 20; ++s) {
    EXPECT_NEAR(m(s, 0), ref[static_cast<std::size_t>(s)], 1e-15);
    for (int i = 1; i <= 20; ++i) EXPECT_EQ(m(s, i), 0.0);
  }
  expect_normalized(m, 1e-14);
}

TEST(FullJpd, AllZeroMeansGiveVacuum) {
  SourceModel model;
  model.n_max = 10;
  model.modes = {conj(ModeType::Thermal, 0.0, 0.5, 0.5), sig(ModeType::Poissonian, 0.0),
                 idl(ModeType::SinglePhoton, 0.0)};
  const ProbMatrix m = full_jpd(model);
  EXPECT_EQ(m(0, 0), 1.0);
  EXPECT_EQ(m.total(), 1.0);
}

TEST(FullJpd, BrightPairMarginalMeans) {
  const ProbMatrix m = full_jpd(bright_pair_model());
  expect_normalized(m);
  EXPECT_GT(m.tail_mass, 0.0);

  // On a square wide enough that truncation is negligible the arm means are
  // the loss-scaled sums of the conjugated means plus the background.
  SourceModel wide = bright_pair_model();
  wide.n_max = 220;
  const ProbMatrix w = full_jpd(wide);
  ASSERT_LT(w.tail_mass, 1e-9);
  double ms = 0.0, mi = 0.0;
  for (int s = 0; s <= 220; ++s)
    for (int i = 0; i <= 220; ++i) {
      ms += s * w(s, i);
      mi += i * w(s, i);
    }
  EXPECT_NEAR(ms, (18.98 + 0.93) * 0.44 + 0.07, 1e-6);
  EXPECT_NEAR(mi, (18.98 + 0.93) * 0.53 + 0.21, 1e-6);
}

TEST(FullJpd, MarginalIsLossAppliedCorrelatedConvolvedWithBackground) {
  SourceModel wide = bright_pair_model();
  wide.n_max = 220;
  const ProbMatrix m = full_jpd(wide);
  const Pmf corr_sig = convolve(pmf(ModeType::Thermal, 18.98 * 0.44, 40), pmf(ModeType::Thermal, 0.93 * 0.44, 40), 40);
  const Pmf predicted = convolve(corr_sig, pmf(ModeType::Poissonian, 0.07, 40), 40);
  const Pmf marg = row_marginal(m);
  for (std::size_t n = 0; n <= 40; ++n) EXPECT_NEAR(marg[n], predicted[n], 1e-10) << n;
}

TEST(FullJpd, ArmSwapTransposes) {
  SourceModel model;
  model.n_max = 15;
  model.modes = {conj(ModeType::Thermal, 2.0, 0.7, 0.4), conj(ModeType::SinglePhoton, 0.6, 0.9, 0.2),
                 sig(ModeType::Poissonian, 0.3), idl(ModeType::Thermal, 0.5)};
  SourceModel swapped = model;
  for (auto& m : swapped.modes) {
    std::swap(m.eta_s, m.eta_i);
    if (m.occupancy == Occupancy::SignalOnly)
      m.occupancy = Occupancy::IdlerOnly;
    else if (m.occupancy == Occupancy::IdlerOnly)
      m.occupancy = Occupancy::SignalOnly;
  }
  const ProbMatrix a = full_jpd(model);
  const ProbMatrix b = full_jpd(swapped);
  // Equal up to floating-point summation order.
  for (int s = 0; s <= 15; ++s)
    for (int i = 0; i <= 15; ++i) EXPECT_NEAR(a(s, i), b(i, s), 1e-16 + 1e-14 * a(s, i));
}

TEST(FullJpd, MonotoneTruncation) {
  SourceModel model = bright_pair_model();
  model.n_max = 25;
  const ProbMatrix small = full_jpd(model);
  model.n_max = 35;
  const ProbMatrix large = full_jpd(model);
  for (int s = 0; s <= 25; ++s)
    for (int i = 0; i <= 25; ++i) EXPECT_LE(std::abs(small(s, i) - large(s, i)), small.tail_mass + 1e-15);
}

TEST(FullJpd, PerfectCorrelationParity) {
  SourceModel model;
  model.n_max = 20;
  model.modes = {conj(ModeType::Thermal, 1.5, 1.0, 1.0), conj(ModeType::Poissonian, 0.8, 1.0, 1.0),
                 conj(ModeType::SinglePhoton, 0.4, 1.0, 1.0)};
  const ProbMatrix m = full_jpd(model);
  for (int s = 0; s <= 20; ++s)
    for (int i = 0; i <= 20; ++i)
      if ((s + i) % 2 == 1) EXPECT_EQ(m(s, i), 0.0);
}

TEST(FullJpd, OracleEquivalenceRandomSmallModels) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, 2);
  for (int trial = 0; trial < 15; ++trial) {
    SourceModel model;
    model.n_max = 2 + trial % 7;
    const int n_modes = 1 + trial % 3;
    double budget = 3.0;
    for (int j = 0; j < n_modes; ++j) {
      ModeSpec m;
      m.type = static_cast<ModeType>(pick(rng));
      m.occupancy = static_cast<Occupancy>(pick(rng));
      const double cap = m.type == ModeType::SinglePhoton ? std::min(1.0, budget) : budget;
      m.mu = cap * u(rng);
      budget -= m.mu;
      m.eta_s = u(rng);
      m.eta_i = u(rng);
      model.modes.push_back(m);
    }
    const ProbMatrix got = full_jpd(model);
    const auto ref = oracle::brute_force_jpd(model);
    for (int s = 0; s <= model.n_max; ++s)
      for (int i = 0; i <= model.n_max; ++i) EXPECT_NEAR(got(s, i), ref[s][i], 1e-10);
    expect_normalized(got);
  }
}

TEST(ExperimentJpd, LosslessSingleThermal) {
  const ProbMatrix m = experiment_jpd(1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 15);
  for (int s = 0; s <= 15; ++s)
    for (int i = 0; i <= 15; ++i) EXPECT_NEAR(m(s, i), s == i ? std::ldexp(1.0, -(s + 1)) : 0.0, 1e-15);
}

TEST(ExperimentJpd, AgreesWithGeneralRouteOnBrightPair) {
  const ProbMatrix a = experiment_jpd(18.98, 0.93, 0.44, 0.53, 0.07, 0.21, 40);
  const ProbMatrix b = full_jpd(bright_pair_model());
  EXPECT_LT(max_abs_diff(a, b), 1e-12);
  EXPECT_NEAR(a.tail_mass, b.tail_mass, 1e-11);
}

TEST(ExperimentJpd, BackgroundOnly) {
  const ProbMatrix m = experiment_jpd(0.0, 0.0, 0.3, 0.8, 0.07, 0.21, 12);
  const Pmf ps = pmf(ModeType::Poissonian, 0.07, 12);
  const Pmf pi = pmf(ModeType::Poissonian, 0.21, 12);
  for (int s = 0; s <= 12; ++s)
    for (int i = 0; i <= 12; ++i)
      EXPECT_NEAR(m(s, i), ps[static_cast<std::size_t>(s)] * pi[static_cast<std::size_t>(i)], 1e-16);
}

TEST(LosslessJpd, AlreadyLosslessIsUnchanged) {
  SourceModel model;
  model.n_max = 20;
  model.modes = {conj(ModeType::Thermal, 1.3, 1.0, 1.0), sig(ModeType::Poissonian, 0.2)};
  const ProbMatrix a = full_jpd(model);
  const ProbMatrix b = lossless_jpd(model);
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(LosslessJpd, RemovesLossFromSingleThermal) {
  SourceModel model;
  model.n_max = 20;
  model.modes = {conj(ModeType::Thermal, 1.0, 0.5, 0.5)};
  const ProbMatrix m = lossless_jpd(model);
  for (int s = 0; s <= 20; ++s)
    for (int i = 0; i <= 20; ++i) EXPECT_NEAR(m(s, i), s == i ? std::ldexp(1.0, -(s + 1)) : 0.0, 1e-15);
}

TEST(LosslessJpd, BackgroundBackProjection) {
  const LosslessProjection proj = lossless_projection(bright_pair_model());
  EXPECT_NEAR(proj.eta_s, 0.44, 1e-15);
  EXPECT_NEAR(proj.eta_i, 0.53, 1e-15);
  for (const auto& m : proj.model.modes) {
    if (m.occupancy == Occupancy::SignalOnly) EXPECT_NEAR(m.mu, 0.07 / 0.44, 1e-15);
    if (m.occupancy == Occupancy::IdlerOnly) EXPECT_NEAR(m.mu, 0.21 / 0.53, 1e-15);
    if (m.occupancy == Occupancy::Conjugated) {
      EXPECT_EQ(m.eta_s, 1.0);
      EXPECT_EQ(m.eta_i, 1.0);
    }
  }
  EXPECT_FALSE(proj.notes.empty());
}

TEST(SourceModel, CanonicalOrdering) {
  SourceModel model;
  model.modes = {idl(ModeType::Thermal, 0.4), sig(ModeType::SinglePhoton, 0.8), conj(ModeType::Poissonian, 1.0, 0.5, 0.6),
                 conj(ModeType::Thermal, 3.0, 0.5, 0.6), conj(ModeType::Thermal, 4.0, 0.5, 0.6), sig(ModeType::Thermal, 1.5),
                 conj(ModeType::Thermal, 3.0, 0.7, 0.6)};
  model.canonicalize();
  EXPECT_EQ(model.modes[0].mu, 4.0);
  EXPECT_EQ(model.modes[1].eta_s, 0.7);
  EXPECT_EQ(model.modes[2].eta_s, 0.5);
  EXPECT_EQ(model.modes[3].type, ModeType::Poissonian);
  EXPECT_EQ(model.modes[4].type, ModeType::Thermal);
  EXPECT_EQ(model.modes[4].occupancy, Occupancy::SignalOnly);
  EXPECT_EQ(model.modes[5].type, ModeType::SinglePhoton);
  EXPECT_EQ(model.modes[6].occupancy, Occupancy::IdlerOnly);
}
