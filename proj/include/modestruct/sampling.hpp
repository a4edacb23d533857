#pragma once

// Finite-trial measurement simulation and count-to-probability conversion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>

#include "modestruct/matrix.hpp"

namespace modestruct {

/// splitmix64 finalizer; used to derive independent seeds for substreams.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Seed of substream `index` of the stream rooted at `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  return mix_seed(mix_seed(seed) ^ mix_seed(index + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

/// Multinomial draw of n_tot trials over the cells of `jpd` plus an implicit
/// overflow cell holding tail_mass. Cells are visited in row-major order and
/// drawn as conditional binomials.
inline CountMatrix sample_counts(const ProbMatrix& jpd, std::uint64_t n_tot, std::uint64_t seed) {
  if (n_tot < 1) throw std::invalid_argument("sample_counts needs n_tot >= 1");
  Rng rng(mix_seed(seed));
  CountMatrix out(jpd.n_max());
  out.n_tot = n_tot;
  const auto cells = jpd.p.values();
  double remaining_mass = 0.0;
  for (double v : cells) remaining_mass += v;
  remaining_mass += jpd.tail_mass;
  std::uint64_t remaining = n_tot;
  auto dst = out.counts.values();
  for (std::size_t c = 0; c < cells.size() && remaining > 0; ++c) {
    const double p = cells[c];
    if (p <= 0.0) continue;
    const double q = std::clamp(p / remaining_mass, 0.0, 1.0);
    std::uint64_t k = remaining;
    if (q < 1.0) {
      std::binomial_distribution<std::uint64_t> draw(remaining, q);
      k = draw(rng);
    }
    dst[c] = k;
    remaining -= k;
    remaining_mass -= p;
    if (remaining_mass <= 0.0) break;
  }
  return out;
}

/// Frequency estimate with shot-noise uncertainties.
struct ProbabilityEstimate {
  ProbMatrix p;
  Grid<double> sigma;
};

/// sigma = sqrt(p/n_tot), floored at 1/n_tot (the one-event level) so that
/// empty cells keep a finite weight.
inline double shot_noise_sigma(double p, double n_tot) { return std::max(std::sqrt(p / n_tot), 1.0 / n_tot); }

inline ProbabilityEstimate to_probabilities(const CountMatrix& counts) {
  if (counts.n_tot < 1) throw std::invalid_argument("to_probabilities needs n_tot >= 1");
  if (counts.in_range() > counts.n_tot) throw std::invalid_argument("counts exceed n_tot");
  const double n = static_cast<double>(counts.n_tot);
  ProbabilityEstimate out{ProbMatrix(counts.n_max()), Grid<double>(counts.n_max(), 0.0)};
  const auto src = counts.counts.values();
  auto p = out.p.p.values();
  auto s = out.sigma.values();
  for (std::size_t c = 0; c < src.size(); ++c) {
    p[c] = static_cast<double>(src[c]) / n;
    s[c] = shot_noise_sigma(p[c], n);
  }
  out.p.tail_mass = static_cast<double>(counts.overflow()) / n;
  return out;
}

} // namespace modestruct
