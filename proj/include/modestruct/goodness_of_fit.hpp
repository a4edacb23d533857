#pragma once

// Pearson chi-squared test of observed counts against model probabilities.

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "modestruct/matrix.hpp"

namespace modestruct {

struct PearsonResult {
  double chi2 = 0.0;
  int bins = 0;
  int dof = 0;
  /// Upper-tail probability; NaN when the test is undefined (dof <= 0).
  double p_value = std::numeric_limits<double>::quiet_NaN();
  bool defined = false;
};

inline constexpr double kMinExpectedPerBin = 5.0;

/// Cells are grouped into shells (total photon number for a JPD, photon
/// number for an RPD) and visited shell by shell. Cells with expected count
/// >= 5 form their own bin; the others are pooled, and the pool is emitted
/// once it reaches 5 expected events at the end of a shell. A remainder left
/// after the last shell joins the last emitted bin. The test conditions on
/// in-range events: expected = N_in * f / sum(f).
inline PearsonResult pearson_test(std::span<const std::uint64_t> observed, std::span<const double> model,
                                  std::span<const int> shell, int n_fit_params) {
  if (observed.size() != model.size() || model.size() != shell.size())
    throw std::invalid_argument("pearson_test: size mismatch");
  double n_in = 0.0, f_sum = 0.0;
  int max_shell = 0;
  for (std::size_t c = 0; c < observed.size(); ++c) {
    n_in += static_cast<double>(observed[c]);
    f_sum += model[c];
    max_shell = std::max(max_shell, shell[c]);
  }
  PearsonResult out;
  if (n_in < 1.0) throw std::invalid_argument("pearson_test needs at least one observed event");
  if (!(f_sum > 0.0)) {
    out.chi2 = std::numeric_limits<double>::infinity();
    return out;
  }
  std::vector<std::vector<std::size_t>> by_shell(static_cast<std::size_t>(max_shell) + 1);
  for (std::size_t c = 0; c < shell.size(); ++c) by_shell[static_cast<std::size_t>(shell[c])].push_back(c);

  struct Bin {
    double obs = 0.0;
    double exp = 0.0;
  };
  std::vector<Bin> bins;
  Bin pool;
  for (const auto& cells : by_shell) {
    for (std::size_t c : cells) {
      const double e = n_in * model[c] / f_sum;
      const double o = static_cast<double>(observed[c]);
      if (e >= kMinExpectedPerBin) {
        bins.push_back({o, e});
      } else {
        pool.obs += o;
        pool.exp += e;
      }
    }
    if (pool.exp >= kMinExpectedPerBin) {
      bins.push_back(pool);
      pool = {};
    }
  }
  if (pool.exp > 0.0 || pool.obs > 0.0) {
    if (bins.empty()) {
      bins.push_back(pool);
    } else {
      bins.back().obs += pool.obs;
      bins.back().exp += pool.exp;
    }
  }
  for (const Bin& b : bins) {
    if (b.exp > 0.0)
      out.chi2 += (b.obs - b.exp) * (b.obs - b.exp) / b.exp;
    else if (b.obs > 0.0)
      out.chi2 = std::numeric_limits<double>::infinity();
  }
  out.bins = static_cast<int>(bins.size());
  out.dof = out.bins - n_fit_params - 1;
  if (out.dof <= 0) return out;
  out.defined = true;
  out.p_value = std::isfinite(out.chi2) ? boost::math::gamma_q(0.5 * out.dof, 0.5 * out.chi2) : 0.0;
  return out;
}

inline PearsonResult pearson_pvalue(const CountMatrix& observed, const ProbMatrix& model, int n_fit_params) {
  if (observed.n_max() != model.n_max()) throw std::invalid_argument("pearson_pvalue: dimension mismatch");
  if (observed.n_tot < 1) throw std::invalid_argument("pearson_pvalue needs n_tot >= 1");
  const int n = observed.n_max();
  std::vector<int> shell;
  shell.reserve(observed.counts.size());
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) shell.push_back(s + i);
  return pearson_test(observed.counts.values(), model.p.values(), shell, n_fit_params);
}

inline PearsonResult pearson_pvalue(std::span<const std::uint64_t> observed, std::span<const double> model,
                                    int n_fit_params) {
  std::vector<int> shell(observed.size());
  for (std::size_t k = 0; k < shell.size(); ++k) shell[k] = static_cast<int>(k);
  return pearson_test(observed, model, shell, n_fit_params);
}

} // namespace modestruct
