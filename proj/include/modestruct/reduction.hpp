#pragma once

// Single-arm reduced probability distributions (row and column marginals).

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "modestruct/matrix.hpp"
#include "modestruct/sampling.hpp"
#include "modestruct/statistics.hpp"

namespace modestruct {

enum class Arm { Signal, Idler };

inline std::string_view to_string(Arm a) { return a == Arm::Signal ? "signal" : "idler"; }

struct Rpd {
  std::vector<double> probs;
  /// Absolute uncertainties of probs; empty for exact distributions.
  std::vector<double> uncertainties;
  Arm arm = Arm::Signal;
  /// Number of trials when derived from counts, 0 for exact input.
  std::uint64_t n_tot = 0;
  /// Summed event counts per photon number (counts input only).
  std::vector<std::uint64_t> counts;
  double tail_mass = 0.0;

  int n_max() const { return static_cast<int>(probs.size()) - 1; }
  double total() const {
    double s = 0.0;
    for (double v : probs) s += v;
    return s;
  }
  double mean() const {
    double m = 0.0;
    for (std::size_t n = 0; n < probs.size(); ++n) m += static_cast<double>(n) * probs[n];
    return m;
  }
  bool has_counts() const { return n_tot > 0; }
};

inline Rpd marginalize(const ProbMatrix& m, Arm arm) {
  Rpd out;
  out.arm = arm;
  const int n = m.n_max();
  out.probs.assign(static_cast<std::size_t>(n) + 1, 0.0);
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) out.probs[static_cast<std::size_t>(arm == Arm::Signal ? s : i)] += m(s, i);
  out.tail_mass = m.tail_mass;
  return out;
}

/// Counts are summed first and the uncertainties derived from the summed
/// bins, which are themselves binomial.
inline Rpd marginalize(const CountMatrix& m, Arm arm) {
  if (m.n_tot < 1) throw std::invalid_argument("marginalize needs n_tot >= 1");
  Rpd out;
  out.arm = arm;
  out.n_tot = m.n_tot;
  const int n = m.n_max();
  out.counts.assign(static_cast<std::size_t>(n) + 1, 0);
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) out.counts[static_cast<std::size_t>(arm == Arm::Signal ? s : i)] += m(s, i);
  const double nt = static_cast<double>(m.n_tot);
  out.probs.resize(out.counts.size());
  out.uncertainties.resize(out.counts.size());
  for (std::size_t k = 0; k < out.counts.size(); ++k) {
    out.probs[k] = static_cast<double>(out.counts[k]) / nt;
    out.uncertainties[k] = shot_noise_sigma(out.probs[k], nt);
  }
  out.tail_mass = static_cast<double>(m.overflow()) / nt;
  return out;
}

/// Exact distribution dressed with the shot-noise uncertainties it would
/// carry if measured with `nominal_n_tot` trials.
inline Rpd rpd_from_pmf(const Pmf& p, double nominal_n_tot, Arm arm = Arm::Signal) {
  if (!(nominal_n_tot > 0.0)) throw std::invalid_argument("nominal trial count must be positive");
  Rpd out;
  out.arm = arm;
  out.probs = p.probs;
  out.tail_mass = p.tail_mass;
  out.uncertainties.resize(p.probs.size());
  for (std::size_t k = 0; k < p.probs.size(); ++k) out.uncertainties[k] = shot_noise_sigma(p.probs[k], nominal_n_tot);
  return out;
}

} // namespace modestruct
