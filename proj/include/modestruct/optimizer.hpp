#pragma once

// Nelder-Mead simplex search with Latin-hypercube multi-start.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <thread>
#include <vector>

#include "modestruct/sampling.hpp"

namespace modestruct {

using Objective = std::function<double(std::span<const double>)>;

struct OptimizerConfig {
  double diameter_tol = 1e-8;
  /// Relative: spread of simplex values <= score_tol * max(1, |best|).
  double score_tol = 1e-10;
  int max_evaluations = 20000;
  int restarts = 16;
  /// Edge length of the initial simplex in unconstrained coordinates.
  double initial_step = 0.5;
  /// Half width of the Latin-hypercube box around the initial point.
  double lhs_half_width = 2.0;
  unsigned threads = 1;
};

struct LocalResult {
  std::vector<double> x;
  std::vector<double> start;
  double value = std::numeric_limits<double>::infinity();
  bool converged = false;
  int evaluations = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline double guarded(const Objective& f, std::span<const double> x, int& evals) {
  ++evals;
  const double v = f(x);
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

struct Simplex {
  std::vector<std::vector<double>> pts;
  std::vector<double> vals;

  void order() {
    std::vector<std::size_t> idx(vals.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    std::vector<std::vector<double>> p2;
    std::vector<double> v2;
    for (std::size_t i : idx) {
      p2.push_back(std::move(pts[i]));
      v2.push_back(vals[i]);
    }
    pts = std::move(p2);
    vals = std::move(v2);
  }

  double diameter() const {
    double d = 0.0;
    for (std::size_t j = 1; j < pts.size(); ++j)
      for (std::size_t k = 0; k < pts[0].size(); ++k) d = std::max(d, std::abs(pts[j][k] - pts[0][k]));
    return d;
  }
};

inline Simplex make_simplex(const Objective& f, const std::vector<double>& x0, double step, Rng& rng, int& evals) {
  const std::size_t n = x0.size();
  Simplex s;
  s.pts.push_back(x0);
  s.vals.push_back(guarded(f, x0, evals));
  std::bernoulli_distribution flip(0.5);
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> p = x0;
    p[k] += flip(rng) ? step : -step;
    s.vals.push_back(guarded(f, p, evals));
    s.pts.push_back(std::move(p));
  }
  return s;
}

/// One simplex run until the tolerances are met or the budget is spent.
inline bool run_simplex(const Objective& f, Simplex& s, const OptimizerConfig& cfg, int& evals) {
  const std::size_t n = s.pts.front().size();
  const double nd = static_cast<double>(n);
  // Dimension-adapted coefficients (Gao and Han).
  const double alpha = 1.0;
  const double beta = 1.0 + 2.0 / nd;
  const double gamma = 0.75 - 1.0 / (2.0 * nd);
  const double delta = 1.0 - 1.0 / nd;
  std::vector<double> centroid(n), xr(n), xe(n), xc(n);
  s.order();
  while (evals < cfg.max_evaluations) {
    const double spread = s.vals.back() - s.vals.front();
    if (s.diameter() < cfg.diameter_tol && spread <= cfg.score_tol * std::max(1.0, std::abs(s.vals.front())))
      return true;
    std::fill(centroid.begin(), centroid.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) centroid[k] += s.pts[j][k] / nd;
    const auto& worst = s.pts[n];
    for (std::size_t k = 0; k < n; ++k) xr[k] = centroid[k] + alpha * (centroid[k] - worst[k]);
    const double fr = guarded(f, xr, evals);
    if (fr < s.vals[0]) {
      for (std::size_t k = 0; k < n; ++k) xe[k] = centroid[k] + beta * (xr[k] - centroid[k]);
      const double fe = guarded(f, xe, evals);
      if (fe < fr) {
        s.pts[n] = xe;
        s.vals[n] = fe;
      } else {
        s.pts[n] = xr;
        s.vals[n] = fr;
      }
    } else if (fr < s.vals[n - 1]) {
      s.pts[n] = xr;
      s.vals[n] = fr;
    } else {
      const bool outside = fr < s.vals[n];
      for (std::size_t k = 0; k < n; ++k)
        xc[k] = outside ? centroid[k] + gamma * (xr[k] - centroid[k]) : centroid[k] - gamma * (centroid[k] - worst[k]);
      const double fc = guarded(f, xc, evals);
      if (fc < (outside ? fr : s.vals[n])) {
        s.pts[n] = xc;
        s.vals[n] = fc;
      } else {
        for (std::size_t j = 1; j <= n; ++j) {
          for (std::size_t k = 0; k < n; ++k) s.pts[j][k] = s.pts[0][k] + delta * (s.pts[j][k] - s.pts[0][k]);
          s.vals[j] = guarded(f, s.pts[j], evals);
        }
      }
    }
    s.order();
  }
  return false;
}

} // namespace detail

/// Local simplex search from x0. A converged run is restarted once from its
/// best vertex with a fresh simplex to guard against premature collapse.
inline LocalResult nelder_mead(const Objective& f, const std::vector<double>& x0, const OptimizerConfig& cfg,
                               std::uint64_t seed = 0) {
  if (x0.empty()) throw std::invalid_argument("nelder_mead needs at least one parameter");
  LocalResult out;
  out.start = x0;
  out.seed = seed;
  Rng rng(mix_seed(seed));
  int evals = 0;
  detail::Simplex s = detail::make_simplex(f, x0, cfg.initial_step, rng, evals);
  bool converged = detail::run_simplex(f, s, cfg, evals);
  for (int polish = 0; converged && polish < 3; ++polish) {
    const double before = s.vals.front();
    const std::vector<double> best = s.pts.front();
    const double step = std::max(cfg.initial_step * 0.1, 100.0 * cfg.diameter_tol);
    detail::Simplex again = detail::make_simplex(f, best, step, rng, evals);
    converged = detail::run_simplex(f, again, cfg, evals);
    if (again.vals.front() < s.vals.front()) s = std::move(again);
    if (before - s.vals.front() <= cfg.score_tol * std::max(1.0, std::abs(before))) break;
  }
  out.x = s.pts.front();
  out.value = s.vals.front();
  out.converged = converged && std::isfinite(out.value);
  out.evaluations = evals;
  return out;
}

/// Starting points: x0 itself, then Latin-hypercube samples of the box
/// x0 +- half_width (per-coordinate widths may be supplied).
inline std::vector<std::vector<double>> latin_hypercube_starts(const std::vector<double>& x0, int count,
                                                               std::span<const double> half_widths,
                                                               std::uint64_t seed) {
  std::vector<std::vector<double>> starts{x0};
  const int extra = count - 1;
  if (extra <= 0) return starts;
  Rng rng(mix_seed(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> cols(x0.size());
  for (std::size_t k = 0; k < x0.size(); ++k) {
    std::vector<int> strata(static_cast<std::size_t>(extra));
    std::iota(strata.begin(), strata.end(), 0);
    std::shuffle(strata.begin(), strata.end(), rng);
    for (int r = 0; r < extra; ++r) {
      const double t = (strata[static_cast<std::size_t>(r)] + u(rng)) / extra;
      cols[k].push_back(x0[k] + half_widths[k] * (2.0 * t - 1.0));
    }
  }
  for (int r = 0; r < extra; ++r) {
    std::vector<double> p(x0.size());
    for (std::size_t k = 0; k < x0.size(); ++k) p[k] = cols[k][static_cast<std::size_t>(r)];
    starts.push_back(std::move(p));
  }
  return starts;
}

struct MultiStartResult {
  LocalResult best;
  std::vector<LocalResult> runs;
  std::size_t best_index = 0;

  bool any_converged() const {
    return std::any_of(runs.begin(), runs.end(), [](const LocalResult& r) { return r.converged; });
  }
};

/// Runs from the given starting points (in parallel when cfg.threads > 1)
/// and merges by value, ties going to the lowest index.
inline MultiStartResult multi_start_from(const Objective& f, const std::vector<std::vector<double>>& starts,
                                         const OptimizerConfig& cfg, std::uint64_t seed) {
  MultiStartResult out;
  out.runs.resize(starts.size());
  auto work = [&](std::size_t r) { out.runs[r] = nelder_mead(f, starts[r], cfg, derive_seed(seed, r)); };
  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(starts.size())));
  if (threads == 1) {
    for (std::size_t r = 0; r < starts.size(); ++r) work(r);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t r = next++; r < starts.size(); r = next++) work(r);
      });
    for (auto& th : pool) th.join();
  }
  for (std::size_t r = 1; r < out.runs.size(); ++r)
    if (out.runs[r].value < out.runs[out.best_index].value) out.best_index = r;
  out.best = out.runs[out.best_index];
  return out;
}

inline MultiStartResult multi_start(const Objective& f, const std::vector<double>& x0, const OptimizerConfig& cfg,
                                    std::uint64_t seed) {
  const std::vector<double> widths(x0.size(), cfg.lhs_half_width);
  return multi_start_from(f, latin_hypercube_starts(x0, std::max(1, cfg.restarts), widths, seed), cfg, seed);
}

} // namespace modestruct
