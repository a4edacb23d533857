#pragma once

// Goodness of fit, the Hillery parity criterion, and Monte-Carlo
// reconstruction-error curves.

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "modestruct/goodness_of_fit.hpp"
#include "modestruct/model_selection.hpp"

namespace modestruct {

/// Parity sums of a JPD. Raw sums are fractions of all trials; the
/// normalized ones are conditional on the event lying inside the square.
struct HilleryResult {
  double even_sum = 0.0;
  double odd_sum = 0.0;
  double vacuum = 0.0;
  double tail_mass = 0.0;
  double even_sigma = 0.0;
  double odd_sigma = 0.0;
  /// (even - odd) / sqrt(even_sigma^2 + odd_sigma^2); NaN without sigmas.
  double significance = std::numeric_limits<double>::quiet_NaN();
  double even_normalized = 0.0;
  double odd_normalized = 0.0;
  double even_normalized_sigma = 0.0;
  double odd_normalized_sigma = 0.0;
  double significance_normalized = std::numeric_limits<double>::quiet_NaN();
  /// "none", "binomial counts", "binomial nominal", "parametric bootstrap"
  std::string sigma_method = "none";

  bool classical() const { return even_sum <= odd_sum; }
};

namespace detail {

inline double ratio_significance(double a, double b, double sa, double sb) {
  const double d = std::sqrt(sa * sa + sb * sb);
  return d > 0.0 ? (a - b) / d : std::numeric_limits<double>::quiet_NaN();
}

inline HilleryResult parity_sums(const Grid<double>& p, double tail) {
  HilleryResult h;
  const int n = p.n_max();
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) {
      if (s == 0 && i == 0) {
        h.vacuum += p(s, i);
        continue;
      }
      ((s + i) % 2 == 0 ? h.even_sum : h.odd_sum) += p(s, i);
    }
  h.tail_mass = tail;
  const double in_range = h.even_sum + h.odd_sum + h.vacuum;
  if (in_range > 0.0) {
    h.even_normalized = h.even_sum / in_range;
    h.odd_normalized = h.odd_sum / in_range;
  }
  return h;
}

inline void binomial_sigmas(HilleryResult& h, double n_tot, double n_in) {
  auto sd = [](double q, double n) { return n > 0.0 ? std::sqrt(std::max(q * (1.0 - q), 0.0) / n) : 0.0; };
  h.even_sigma = sd(h.even_sum, n_tot);
  h.odd_sigma = sd(h.odd_sum, n_tot);
  h.even_normalized_sigma = sd(h.even_normalized, n_in);
  h.odd_normalized_sigma = sd(h.odd_normalized, n_in);
  h.significance = ratio_significance(h.even_sum, h.odd_sum, h.even_sigma, h.odd_sigma);
  h.significance_normalized =
      ratio_significance(h.even_normalized, h.odd_normalized, h.even_normalized_sigma, h.odd_normalized_sigma);
}

} // namespace detail

/// Even sum over n_s + n_i = 2, 4, ... (vacuum excluded) and odd sum over
/// n_s + n_i = 1, 3, .... With nominal_n_tot > 0 the sigmas are the binomial
/// ones a measurement of that size would carry.
inline HilleryResult hillery(const ProbMatrix& jpd, double nominal_n_tot = 0.0) {
  HilleryResult h = detail::parity_sums(jpd.p, jpd.tail_mass);
  if (nominal_n_tot > 0.0) {
    detail::binomial_sigmas(h, nominal_n_tot, nominal_n_tot * (1.0 - jpd.tail_mass));
    h.sigma_method = "binomial nominal";
  }
  return h;
}

inline HilleryResult hillery(const CountMatrix& counts) {
  if (counts.n_tot < 1) throw std::invalid_argument("hillery needs n_tot >= 1");
  const ProbabilityEstimate est = to_probabilities(counts);
  HilleryResult h = detail::parity_sums(est.p.p, est.p.tail_mass);
  detail::binomial_sigmas(h, static_cast<double>(counts.n_tot), static_cast<double>(counts.in_range()));
  h.sigma_method = "binomial counts";
  return h;
}

/// Hillery sums of a fitted model's JPD (lossless projection by default)
/// with sigmas from the spread over `resamples` parameter draws from the
/// fit's Fisher covariance in unconstrained coordinates.
inline HilleryResult hillery_bootstrap(const FitResult& fit, int resamples, std::uint64_t seed, bool lossless = true) {
  auto evaluate = [&](const SourceModel& m) { return hillery(lossless ? lossless_jpd(m) : full_jpd(m)); };
  HilleryResult h = evaluate(fit.model);
  const auto k = static_cast<Eigen::Index>(fit.params.size());
  if (resamples < 2 || fit.covariance.rows() != k || k == 0) return h;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(fit.covariance);
  const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd root = eig.eigenvectors() * lambda.asDiagonal();
  const std::vector<double> th0 = fit.params.to_unconstrained();
  Rng rng(mix_seed(seed));
  std::normal_distribution<double> normal;
  std::vector<double> e, o, en, on;
  for (int r = 0; r < resamples; ++r) {
    Eigen::VectorXd z(k);
    for (Eigen::Index a = 0; a < k; ++a) z(a) = normal(rng);
    const Eigen::VectorXd dz = root * z;
    std::vector<double> th = th0;
    for (Eigen::Index a = 0; a < k; ++a) th[static_cast<std::size_t>(a)] += dz(a);
    ParamVector p = fit.params;
    p.assign_unconstrained(th);
    SourceModel m = fit.model;
    apply_params(p, m);
    const HilleryResult d = evaluate(m);
    e.push_back(d.even_sum);
    o.push_back(d.odd_sum);
    en.push_back(d.even_normalized);
    on.push_back(d.odd_normalized);
  }
  auto sd = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  };
  h.even_sigma = sd(e);
  h.odd_sigma = sd(o);
  h.even_normalized_sigma = sd(en);
  h.odd_normalized_sigma = sd(on);
  h.significance = detail::ratio_significance(h.even_sum, h.odd_sum, h.even_sigma, h.odd_sigma);
  h.significance_normalized =
      detail::ratio_significance(h.even_normalized, h.odd_normalized, h.even_normalized_sigma, h.odd_normalized_sigma);
  h.sigma_method = "parametric bootstrap";
  return h;
}

/// sum_j |mu_rec_j - mu_j| / sum_j mu_j with both models in canonical order.
inline double relative_error(const SourceModel& reconstructed, const SourceModel& truth) {
  SourceModel a = reconstructed, b = truth;
  a.canonicalize();
  b.canonicalize();
  if (a.modes.size() != b.modes.size()) return std::numeric_limits<double>::infinity();
  double num = 0.0, den = 0.0;
  for (std::size_t j = 0; j < b.modes.size(); ++j) {
    num += std::abs(a.modes[j].mu - b.modes[j].mu);
    den += b.modes[j].mu;
  }
  return den > 0.0 ? num / den : num;
}

struct UncertaintyConfig {
  FitConfig fit;
  int max_correction_passes = 3;
  double correction_tol = 1e-5;
  double correction_noise_fraction = 0.1;
  unsigned threads = 1;
};

struct UncertaintyPoint {
  /// 0 stands for the noiseless (exact JPD) input.
  std::uint64_t n_tot = 0;
  double mean_error = 0.0;
  /// Standard error of the mean over the used repeats.
  double std_error = 0.0;
  int used = 0;
  /// Repeats whose final fit did not converge.
  int excluded = 0;
  std::vector<double> errors;
};

/// For each n_tot: simulate `repeats` count matrices, reconstruct each with
/// the true template, and average the relative error over converged fits.
/// n_tot = 0 runs the noiseless path once.
inline std::vector<UncertaintyPoint> uncertainty_curve(const SourceModel& model,
                                                       std::span<const std::uint64_t> n_tot_list, int repeats,
                                                       std::uint64_t seed, const UncertaintyConfig& cfg) {
  if (repeats < 2) throw std::invalid_argument("uncertainty_curve needs repeats >= 2");
  model.validate();
  const ProbMatrix jpd = full_jpd(model);
  std::vector<UncertaintyPoint> out;
  for (std::size_t q = 0; q < n_tot_list.size(); ++q) {
    UncertaintyPoint pt;
    pt.n_tot = n_tot_list[q];
    const int runs = pt.n_tot == 0 ? 1 : repeats;
    std::vector<double> err(static_cast<std::size_t>(runs), 0.0);
    std::vector<char> ok(static_cast<std::size_t>(runs), 0);
    auto work = [&](int r) {
      const std::uint64_t s = derive_seed(derive_seed(seed, q), static_cast<std::uint64_t>(r));
      FitConfig fc = cfg.fit;
      fc.seed = s;
      TwoStepResult res;
      if (pt.n_tot == 0)
        res = two_step_with_template(jpd, model, fc, cfg.max_correction_passes, cfg.correction_tol,
                                     cfg.correction_noise_fraction);
      else
        res = two_step_with_template(sample_counts(jpd, pt.n_tot, s), model, fc, cfg.max_correction_passes,
                                     cfg.correction_tol, cfg.correction_noise_fraction);
      err[static_cast<std::size_t>(r)] = relative_error(res.fit.model, model);
      ok[static_cast<std::size_t>(r)] = res.fit.converged ? 1 : 0;
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(runs)));
    if (threads == 1) {
      for (int r = 0; r < runs; ++r) work(r);
    } else {
      std::atomic<int> next{0};
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&] {
          for (int r = next++; r < runs; r = next++) work(r);
        });
      for (auto& th : pool) th.join();
    }
    for (int r = 0; r < runs; ++r) {
      if (!ok[static_cast<std::size_t>(r)]) {
        ++pt.excluded;
        continue;
      }
      pt.errors.push_back(err[static_cast<std::size_t>(r)]);
    }
    pt.used = static_cast<int>(pt.errors.size());
    if (pt.used > 0) {
      double sum = 0.0;
      for (double e : pt.errors) sum += e;
      pt.mean_error = sum / pt.used;
      if (pt.used > 1) {
        double ss = 0.0;
        for (double e : pt.errors) ss += (e - pt.mean_error) * (e - pt.mean_error);
        pt.std_error = std::sqrt(ss / (pt.used - 1) / pt.used);
      }
    } else {
      pt.mean_error = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back(std::move(pt));
  }
  return out;
}

} // namespace modestruct
