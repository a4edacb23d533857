#pragma once

// Joint photon-number distribution of a two-arm field made of conjugated
// (pair-generated) modes and single-arm background modes.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modestruct/matrix.hpp"
#include "modestruct/statistics.hpp"

namespace modestruct {

inline constexpr int kDefaultNMax = 40;

enum class Occupancy { Conjugated, SignalOnly, IdlerOnly };

inline std::string_view to_string(Occupancy o) {
  switch (o) {
  case Occupancy::Conjugated: return "conjugated";
  case Occupancy::SignalOnly: return "signal";
  case Occupancy::IdlerOnly: return "idler";
  }
  return "?";
}

inline Occupancy occupancy_from_string(std::string_view s) {
  if (s == "conjugated") return Occupancy::Conjugated;
  if (s == "signal") return Occupancy::SignalOnly;
  if (s == "idler") return Occupancy::IdlerOnly;
  throw DomainError("unknown occupancy '" + std::string(s) + "'");
}

/// One optical mode. For single-arm modes mu is the effective (already
/// loss-adjusted) mean and the transmittances are ignored.
struct ModeSpec {
  ModeType type = ModeType::Thermal;
  double mu = 0.0;
  Occupancy occupancy = Occupancy::Conjugated;
  double eta_s = 1.0;
  double eta_i = 1.0;

  bool operator==(const ModeSpec&) const = default;

  void validate() const {
    detail::check_mu(type, mu);
    if (occupancy == Occupancy::Conjugated) {
      detail::check_eta(eta_s);
      detail::check_eta(eta_i);
    }
  }
};

inline bool canonical_less(const ModeSpec& a, const ModeSpec& b) {
  if (a.occupancy != b.occupancy) return static_cast<int>(a.occupancy) < static_cast<int>(b.occupancy);
  if (a.type != b.type) return type_rank(a.type) < type_rank(b.type);
  if (a.mu != b.mu) return a.mu > b.mu;
  return a.eta_s > b.eta_s;
}

struct SourceModel {
  std::vector<ModeSpec> modes;
  int n_max = kDefaultNMax;

  bool operator==(const SourceModel&) const = default;

  void validate() const {
    if (n_max < 0) throw DomainError("n_max must be >= 0");
    for (const auto& m : modes) m.validate();
  }

  /// Conjugated, then signal-only, then idler-only; inside each class
  /// thermal, poissonian, single photon; inside a type descending mu.
  void canonicalize() { std::stable_sort(modes.begin(), modes.end(), canonical_less); }

  std::vector<ModeSpec> with_occupancy(Occupancy o) const {
    std::vector<ModeSpec> out;
    for (const auto& m : modes)
      if (m.occupancy == o) out.push_back(m);
    return out;
  }
};

namespace detail {

inline constexpr double kOmittedGenerationTolerance = 1e-13;
inline constexpr int kMaxGeneratedPhotons = 400000;

/// sum_k P(k) L_{ns,k}(eta_s) L_{ni,k}(eta_i), the sum over k truncated
/// adaptively: stop once P(K > k) times the probability that an arm still
/// lands inside the square is negligible. `prob(k)` and `tail_after(k)`
/// describe the pair-number distribution.
template <typename Prob, typename Tail>
ProbMatrix pair_jpd(Prob&& prob, Tail&& tail_after, double eta_s, double eta_i, int n_max) {
  check_eta(eta_s);
  check_eta(eta_i);
  ProbMatrix out(n_max);
  if (eta_s == 0.0 && eta_i == 0.0) {
    out(0, 0) = 1.0;
    return out;
  }
  std::vector<double> row_s;
  std::vector<double> row_i;
  for (int k = 0; k < kMaxGeneratedPhotons; ++k) {
    const double pk = prob(k);
    loss_row(k, eta_s, n_max, row_s);
    loss_row(k, eta_i, n_max, row_i);
    if (pk > 0.0) {
      for (std::size_t s = 0; s < row_s.size(); ++s) {
        const double ls = row_s[s];
        if (ls == 0.0) continue;
        double* dst = &out.p(static_cast<int>(s), 0);
        for (std::size_t i = 0; i < row_i.size(); ++i) dst[i] += pk * (ls * row_i[i]);
      }
    }
    const double cdf_s = std::accumulate(row_s.begin(), row_s.end(), 0.0);
    const double cdf_i = std::accumulate(row_i.begin(), row_i.end(), 0.0);
    const double remaining = tail_after(k);
    if (remaining * std::min(cdf_s, cdf_i) < kOmittedGenerationTolerance) break;
  }
  out.tail_mass = std::max(0.0, 1.0 - out.total());
  return out;
}

} // namespace detail

/// Background distribution of one arm: convolution of the modes' own pmfs
/// at their effective means.
inline Pmf uncorrelated_pmf(std::span<const ModeSpec> modes, int n_max) {
  Pmf acc = vacuum_pmf(n_max);
  if (modes.empty()) return acc;
  const Occupancy occ = modes.front().occupancy;
  if (occ == Occupancy::Conjugated) throw std::invalid_argument("uncorrelated_pmf given a conjugated mode");
  for (const auto& m : modes) {
    if (m.occupancy != occ) throw std::invalid_argument("uncorrelated_pmf given modes from different arms");
    acc = convolve(acc, pmf(m.type, m.mu, n_max), n_max);
  }
  return acc;
}

/// Detected JPD of a single conjugated mode after independent arm losses.
inline ProbMatrix single_mode_jpd(const ModeSpec& mode, int n_max) {
  mode.validate();
  const ModeType type = mode.type;
  const double mu = mode.mu;
  return detail::pair_jpd([&](int k) { return detail::point_probability(type, mu, k); },
                          [&](int k) { return detail::upper_tail(type, mu, k); },
                          mode.eta_s, mode.eta_i, n_max);
}

/// 2D convolution (distribution of the sum of independent photon-number
/// pairs), truncated to the smaller square.
inline ProbMatrix convolve2d(const ProbMatrix& a, const ProbMatrix& b) {
  const int n = std::min(a.n_max(), b.n_max());
  ProbMatrix out(n);
  for (int s1 = 0; s1 <= n; ++s1) {
    for (int i1 = 0; i1 <= n; ++i1) {
      const double av = a(s1, i1);
      if (av == 0.0) continue;
      for (int s2 = 0; s2 <= n - s1; ++s2) {
        const double* src = &b.p(s2, 0);
        double* dst = &out.p(s1 + s2, i1);
        for (int i2 = 0; i2 <= n - i1; ++i2) dst[i2] += av * src[i2];
      }
    }
  }
  // Represented products falling outside the square, via prefix sums of b.
  const int nb = b.n_max();
  Grid<double> prefix(nb, 0.0);
  for (int s = 0; s <= nb; ++s)
    for (int i = 0; i <= nb; ++i)
      prefix(s, i) = b(s, i) + (s > 0 ? prefix(s - 1, i) : 0.0) + (i > 0 ? prefix(s, i - 1) : 0.0) -
                     (s > 0 && i > 0 ? prefix(s - 1, i - 1) : 0.0);
  const double sb = prefix(nb, nb);
  double dropped = 0.0;
  for (int s1 = 0; s1 <= a.n_max(); ++s1)
    for (int i1 = 0; i1 <= a.n_max(); ++i1) {
      const double av = a(s1, i1);
      if (av == 0.0) continue;
      const double kept = (s1 <= n && i1 <= n) ? prefix(n - s1, n - i1) : 0.0;
      dropped += av * (sb - kept);
    }
  const double sa = a.total();
  out.tail_mass = a.tail_mass * (sb + b.tail_mass) + sa * b.tail_mass + std::max(0.0, dropped);
  return out;
}

/// Adds independent background photons to each arm: out = jpd (*) (us x ui).
inline ProbMatrix add_backgrounds(const ProbMatrix& jpd, const Pmf& us, const Pmf& ui) {
  const int n = jpd.n_max();
  if (us.n_max() < n || ui.n_max() < n) throw std::invalid_argument("background pmf shorter than jpd");
  ProbMatrix tmp(n);
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) {
      const double v = jpd(s, i);
      if (v == 0.0) continue;
      for (int m = 0; m <= n - s; ++m) tmp(s + m, i) += v * us[static_cast<std::size_t>(m)];
    }
  ProbMatrix out(n);
  for (int s = 0; s <= n; ++s) {
    const double* src = &tmp.p(s, 0);
    double* dst = &out.p(s, 0);
    for (int i = 0; i <= n; ++i) {
      const double v = src[i];
      if (v == 0.0) continue;
      for (int m = 0; m <= n - i; ++m) dst[i + m] += v * ui[static_cast<std::size_t>(m)];
    }
  }
  std::vector<double> cs(static_cast<std::size_t>(n) + 1), ci(static_cast<std::size_t>(n) + 1);
  std::partial_sum(us.probs.begin(), us.probs.begin() + n + 1, cs.begin());
  std::partial_sum(ui.probs.begin(), ui.probs.begin() + n + 1, ci.begin());
  const double background_mass = (us.total() + us.tail_mass) * (ui.total() + ui.tail_mass);
  double dropped = 0.0;
  for (int s = 0; s <= n; ++s)
    for (int i = 0; i <= n; ++i) {
      const double v = jpd(s, i);
      if (v == 0.0) continue;
      dropped += v * (background_mass - cs[static_cast<std::size_t>(n - s)] * ci[static_cast<std::size_t>(n - i)]);
    }
  out.tail_mass = jpd.tail_mass * background_mass + std::max(0.0, dropped);
  return out;
}

namespace detail {

/// Conjugated modes sharing both transmittances: their pair numbers add, so
/// the total pair-number distribution (a 1D convolution) goes through the
/// loss channels once.
inline ProbMatrix merged_pair_jpd(std::span<const ModeSpec> group, int n_max) {
  // each[j]: pmf of mode j; part[j]: pmf of the pair number of modes 0..j.
  std::vector<std::vector<double>> each(group.size()), part(group.size());
  double cumulative = 0.0;
  auto extend = [&](int k) {
    while (static_cast<int>(part.back().size()) <= k) {
      const std::size_t m = part.back().size();
      for (std::size_t j = 0; j < group.size(); ++j) {
        each[j].push_back(point_probability(group[j].type, group[j].mu, static_cast<int>(m)));
        double v = each[j][m];
        if (j > 0) {
          v = 0.0;
          for (std::size_t a = 0; a <= m; ++a) v += part[j - 1][a] * each[j][m - a];
        }
        part[j].push_back(v);
      }
      cumulative += part.back()[m];
    }
  };
  const std::vector<double>& pairs = part.back();
  return pair_jpd(
      [&](int k) {
        extend(k);
        return pairs[static_cast<std::size_t>(k)];
      },
      [&](int k) {
        extend(k);
        return std::max(0.0, 1.0 - cumulative);
      },
      group.front().eta_s, group.front().eta_i, n_max);
}

} // namespace detail

/// Correlated part: modes with identical transmittances are merged through
/// their total pair number; the resulting groups are convolved in 2D.
inline ProbMatrix correlated_jpd(std::span<const ModeSpec> modes, int n_max) {
  std::vector<std::vector<ModeSpec>> groups;
  for (const auto& m : modes) {
    if (m.occupancy != Occupancy::Conjugated) throw std::invalid_argument("correlated_jpd given a single-arm mode");
    m.validate();
    auto it = std::find_if(groups.begin(), groups.end(), [&](const std::vector<ModeSpec>& g) {
      return g.front().eta_s == m.eta_s && g.front().eta_i == m.eta_i;
    });
    if (it == groups.end())
      groups.push_back({m});
    else
      it->push_back(m);
  }
  ProbMatrix acc = vacuum_matrix(n_max);
  bool first = true;
  for (const auto& g : groups) {
    ProbMatrix one = g.size() == 1 ? single_mode_jpd(g.front(), n_max) : detail::merged_pair_jpd(g, n_max);
    acc = first ? std::move(one) : convolve2d(acc, one);
    first = false;
  }
  return acc;
}

/// Complete detected JPD of a source model.
inline ProbMatrix full_jpd(const SourceModel& model) {
  model.validate();
  const auto conj = model.with_occupancy(Occupancy::Conjugated);
  const auto sig = model.with_occupancy(Occupancy::SignalOnly);
  const auto idl = model.with_occupancy(Occupancy::IdlerOnly);
  const ProbMatrix pc = correlated_jpd(conj, model.n_max);
  return add_backgrounds(pc, uncorrelated_pmf(sig, model.n_max), uncorrelated_pmf(idl, model.n_max));
}

/// Two conjugated thermal modes with a common loss per arm plus one
/// Poissonian background per arm. Coded through the total pair number, so
/// it is an independent route to the same numbers full_jpd produces.
inline ProbMatrix experiment_jpd(double mu1, double mu2, double eta_s, double eta_i, double mu_bs, double mu_bi,
                                 int n_max) {
  detail::check_mu(ModeType::Thermal, mu1);
  detail::check_mu(ModeType::Thermal, mu2);
  detail::check_mu(ModeType::Poissonian, mu_bs);
  detail::check_mu(ModeType::Poissonian, mu_bi);
  std::vector<double> p1, p2, pairs;
  double cumulative = 0.0;
  auto extend = [&](int k) {
    while (static_cast<int>(pairs.size()) <= k) {
      const int m = static_cast<int>(pairs.size());
      p1.push_back(detail::point_probability(ModeType::Thermal, mu1, m));
      p2.push_back(detail::point_probability(ModeType::Thermal, mu2, m));
      double v = 0.0;
      for (int j = 0; j <= m; ++j) v += p1[static_cast<std::size_t>(j)] * p2[static_cast<std::size_t>(m - j)];
      pairs.push_back(v);
      cumulative += v;
    }
  };
  const ProbMatrix pc = detail::pair_jpd(
      [&](int k) {
        extend(k);
        return pairs[static_cast<std::size_t>(k)];
      },
      [&](int k) {
        extend(k);
        return std::max(0.0, 1.0 - cumulative);
      },
      eta_s, eta_i, n_max);
  return add_backgrounds(pc, pmf(ModeType::Poissonian, mu_bs, n_max), pmf(ModeType::Poissonian, mu_bi, n_max));
}

/// Model with losses removed: conjugated transmittances set to 1, and
/// background means divided by the arm's population-weighted conjugated
/// transmittance (the only loss estimate a fit provides for that arm).
struct LosslessProjection {
  SourceModel model;
  double eta_s = 1.0;
  double eta_i = 1.0;
  std::vector<std::string> notes;
};

inline LosslessProjection lossless_projection(const SourceModel& model) {
  LosslessProjection out;
  out.model = model;
  double w = 0.0, ws = 0.0, wi = 0.0;
  for (const auto& m : model.modes)
    if (m.occupancy == Occupancy::Conjugated) {
      w += m.mu;
      ws += m.mu * m.eta_s;
      wi += m.mu * m.eta_i;
    }
  if (w > 0.0) {
    out.eta_s = ws / w;
    out.eta_i = wi / w;
  } else {
    out.notes.emplace_back("no conjugated modes: background means left unscaled");
  }
  out.notes.emplace_back("background means divided by the arm's fitted conjugated transmittance");
  for (auto& m : out.model.modes) {
    if (m.occupancy == Occupancy::Conjugated) {
      m.eta_s = 1.0;
      m.eta_i = 1.0;
      continue;
    }
    const double eta = m.occupancy == Occupancy::SignalOnly ? out.eta_s : out.eta_i;
    if (eta > 0.0) m.mu /= eta;
    if (m.type == ModeType::SinglePhoton && m.mu > 1.0) {
      m.mu = 1.0;
      out.notes.emplace_back("single-photon background clamped at mean 1 after loss removal");
    }
  }
  return out;
}

inline ProbMatrix lossless_jpd(const SourceModel& model) { return full_jpd(lossless_projection(model).model); }

} // namespace modestruct
