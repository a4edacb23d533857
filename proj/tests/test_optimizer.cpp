#include <gtest/gtest.h>

#include <cmath>

#include "modestruct/optimizer.hpp"

using namespace modestruct;

TEST(NelderMead, OneDimensionalQuadratic) {
  const Objective f = [](std::span<const double> x) { return (x[0] - 3.0) * (x[0] - 3.0); };
  const LocalResult r = nelder_mead(f, {0.0}, OptimizerConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 3.0, 1e-8);
}

TEST(NelderMead, Rosenbrock) {
  const Objective f = [](std::span<const double> x) {
    return 100.0 * std::pow(x[1] - x[0] * x[0], 2) + std::pow(1.0 - x[0], 2);
  };
  const LocalResult r = nelder_mead(f, {-1.2, 1.0}, OptimizerConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x[0], 1.0, 1e-6);
  EXPECT_NEAR(r.x[1], 1.0, 1e-6);
}

TEST(NelderMead, SixDimensionalQuadratic) {
  const Objective f = [](std::span<const double> x) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) s += (k + 1.0) * std::pow(x[k] - 0.5 * k, 2);
    return s;
  };
  const LocalResult r = nelder_mead(f, std::vector<double>(6, 2.0), OptimizerConfig{});
  EXPECT_TRUE(r.converged);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(r.x[k], 0.5 * k, 1e-6);
}

TEST(NelderMead, BudgetExhaustionIsReported) {
  OptimizerConfig cfg;
  cfg.max_evaluations = 10;
  const Objective f = [](std::span<const double> x) { return std::pow(x[0] - 30.0, 2) + std::pow(x[1], 2); };
  const LocalResult r = nelder_mead(f, {0.0, 0.0}, cfg);
  EXPECT_FALSE(r.converged);
  EXPECT_LE(r.evaluations, 12);
}

TEST(NelderMead, NonFiniteValuesAreWalls) {
  const Objective f = [](std::span<const double> x) {
    if (x[0] < 1.0) return std::nan("");
    return (x[0] - 2.0) * (x[0] - 2.0);
  };
  const LocalResult r = nelder_mead(f, {3.0}, OptimizerConfig{});
  EXPECT_NEAR(r.x[0], 2.0, 1e-7);
}

TEST(MultiStart, EscapesLocalMinimum) {
  // Tilted double well: local minimum near -1, global near +1.
  const Objective f = [](std::span<const double> x) {
    return std::pow(x[0] * x[0] - 1.0, 2) - 0.3 * x[0] + 0.01 * x[1] * x[1];
  };
  OptimizerConfig cfg;
  cfg.restarts = 8;
  const MultiStartResult m = multi_start(f, {-1.0, 0.0}, cfg, 7);
  EXPECT_GT(m.best.x[0], 0.5);
  EXPECT_TRUE(m.any_converged());
  EXPECT_EQ(m.runs.size(), 8u);
  EXPECT_LT(m.runs[0].x[0], 0.0);
}

TEST(MultiStart, DeterministicAndThreadIndependent) {
  const Objective f = [](std::span<const double> x) {
    return std::sin(3.0 * x[0]) + std::cos(2.0 * x[1]) + 0.1 * (x[0] * x[0] + x[1] * x[1]);
  };
  OptimizerConfig cfg;
  cfg.restarts = 6;
  const MultiStartResult a = multi_start(f, {0.0, 0.0}, cfg, 123);
  const MultiStartResult b = multi_start(f, {0.0, 0.0}, cfg, 123);
  cfg.threads = 3;
  const MultiStartResult c = multi_start(f, {0.0, 0.0}, cfg, 123);
  EXPECT_EQ(a.best.x, b.best.x);
  EXPECT_EQ(a.best.x, c.best.x);
  EXPECT_EQ(a.best_index, c.best_index);
  for (std::size_t r = 0; r < a.runs.size(); ++r) EXPECT_EQ(a.runs[r].value, c.runs[r].value);
}

TEST(LatinHypercube, OnePointPerStratum) {
  const std::vector<double> widths{1.0, 2.0};
  const auto starts = latin_hypercube_starts({0.0, 10.0}, 11, widths, 5);
  ASSERT_EQ(starts.size(), 11u);
  EXPECT_EQ(starts[0], (std::vector<double>{0.0, 10.0}));
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<int> hits(10, 0);
    for (std::size_t r = 1; r < starts.size(); ++r) {
      const double t = (starts[r][k] - (k == 0 ? 0.0 : 10.0)) / widths[k] * 0.5 + 0.5;
      ASSERT_GE(t, 0.0);
      ASSERT_LT(t, 1.0);
      ++hits[static_cast<std::size_t>(t * 10)];
    }
    for (int h : hits) EXPECT_EQ(h, 1);
  }
}
