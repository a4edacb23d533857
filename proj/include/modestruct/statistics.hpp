#pragma once

// Photon-number distributions of single optical modes and the binomial loss
// channel. Everything else in the library is assembled from these kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <boost/math/special_functions/gamma.hpp>

namespace modestruct {

/// Raised when a distribution is asked for outside its parameter domain.
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

enum class ModeType { Thermal, Poissonian, SinglePhoton };

inline std::string_view to_string(ModeType t) {
  switch (t) {
  case ModeType::Thermal: return "thermal";
  case ModeType::Poissonian: return "poissonian";
  case ModeType::SinglePhoton: return "single_photon";
  }
  return "?";
}

inline ModeType mode_type_from_string(std::string_view s) {
  if (s == "thermal") return ModeType::Thermal;
  if (s == "poissonian") return ModeType::Poissonian;
  if (s == "single_photon") return ModeType::SinglePhoton;
  throw DomainError("unknown mode type '" + std::string(s) + "'");
}

/// Rank used for canonical ordering: thermal < poissonian < single photon.
inline int type_rank(ModeType t) { return static_cast<int>(t); }

/// Photon-number distribution truncated at n_max. Mass above n_max is kept
/// in tail_mass instead of being renormalized away.
struct Pmf {
  std::vector<double> probs;
  double tail_mass = 0.0;

  int n_max() const { return static_cast<int>(probs.size()) - 1; }
  double total() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }
  double operator[](std::size_t n) const { return probs[n]; }

  /// Mean over the represented range only.
  double mean() const {
    double m = 0.0;
    for (std::size_t n = 1; n < probs.size(); ++n) m += static_cast<double>(n) * probs[n];
    return m;
  }
};

inline Pmf vacuum_pmf(int n_max) {
  Pmf v;
  v.probs.assign(static_cast<std::size_t>(n_max) + 1, 0.0);
  v.probs[0] = 1.0;
  return v;
}

namespace detail {

inline constexpr int kDirectBinomialLimit = 30;

/// ln(n!) with a lazily built table for small n.
inline double log_factorial(int n) {
  static const std::vector<double> table = [] {
    std::vector<double> t(2048);
    t[0] = 0.0;
    for (std::size_t i = 1; i < t.size(); ++i) t[i] = std::lgamma(static_cast<double>(i) + 1.0);
    return t;
  }();
  if (n < 0) throw DomainError("log_factorial of negative number");
  if (static_cast<std::size_t>(n) < table.size()) return table[static_cast<std::size_t>(n)];
  return std::lgamma(static_cast<double>(n) + 1.0);
}

inline double log_choose(int k, int n) {
  return log_factorial(k) - log_factorial(n) - log_factorial(k - n);
}

inline void check_eta(double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw DomainError("transmittance outside [0, 1]");
}

inline void check_mu(ModeType type, double mu) {
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw DomainError("mean photon number must be finite and >= 0");
  if (type == ModeType::SinglePhoton && mu > 1.0)
    throw DomainError("single-photon mode requires mean photon number <= 1");
}

/// Single probability p_mu(k) for any k, evaluated in log space when large.
inline double point_probability(ModeType type, double mu, int k) {
  switch (type) {
  case ModeType::Thermal: {
    if (mu == 0.0) return k == 0 ? 1.0 : 0.0;
    const double log_ratio = std::log(mu) - std::log1p(mu);
    return std::exp(static_cast<double>(k) * log_ratio - std::log1p(mu));
  }
  case ModeType::Poissonian: {
    if (mu == 0.0) return k == 0 ? 1.0 : 0.0;
    if (k <= kDirectBinomialLimit) {
      double p = std::exp(-mu);
      for (int j = 1; j <= k; ++j) p *= mu / j;
      return p;
    }
    return std::exp(-mu + k * std::log(mu) - log_factorial(k));
  }
  case ModeType::SinglePhoton:
    if (k == 0) return 1.0 - mu;
    if (k == 1) return mu;
    return 0.0;
  }
  return 0.0;
}

/// P(K > n) for a single mode, exact closed forms.
inline double upper_tail(ModeType type, double mu, int n) {
  if (n < 0) return 1.0;
  switch (type) {
  case ModeType::Thermal:
    if (mu == 0.0) return 0.0;
    return std::exp(static_cast<double>(n + 1) * (std::log(mu) - std::log1p(mu)));
  case ModeType::Poissonian:
    if (mu == 0.0) return 0.0;
    return boost::math::gamma_p(static_cast<double>(n + 1), mu);
  case ModeType::SinglePhoton:
    return n >= 1 ? 0.0 : mu;
  }
  return 0.0;
}

/// Row L_{n,k}(eta) for n = 0..min(k, n_max). Log-space recurrence so that
/// large k neither overflows the binomial coefficient nor underflows the
/// leading power prematurely.
inline void loss_row(int k, double eta, int n_max, std::vector<double>& out) {
  const int top = std::min(k, n_max);
  out.assign(static_cast<std::size_t>(top) + 1, 0.0);
  if (eta == 1.0) {
    if (k <= n_max) out[static_cast<std::size_t>(k)] = 1.0;
    return;
  }
  if (eta == 0.0) {
    out[0] = 1.0;
    return;
  }
  const double log_eta = std::log(eta);
  const double log_loss = std::log1p(-eta);
  for (int n = 0; n <= top; ++n) {
    out[static_cast<std::size_t>(n)] =
        std::exp(log_choose(k, n) + n * log_eta + (k - n) * log_loss);
  }
}

} // namespace detail

/// Photon-number distribution of one mode, truncated at n_max with the
/// analytic remainder in tail_mass.
inline Pmf pmf(ModeType type, double mu, int n_max) {
  detail::check_mu(type, mu);
  if (n_max < 0) throw DomainError("n_max must be >= 0");
  Pmf out;
  out.probs.resize(static_cast<std::size_t>(n_max) + 1);
  for (int k = 0; k <= n_max; ++k) out.probs[static_cast<std::size_t>(k)] = detail::point_probability(type, mu, k);
  out.tail_mass = detail::upper_tail(type, mu, n_max);
  return out;
}

/// Probability that n of k photons survive a channel of transmittance eta.
inline double loss_factor(int n, int k, double eta) {
  detail::check_eta(eta);
  if (n < 0 || n > k) throw DomainError("loss factor requires 0 <= n <= k");
  if (eta == 0.0) return n == 0 ? 1.0 : 0.0;
  if (eta == 1.0) return n == k ? 1.0 : 0.0;
  if (k <= detail::kDirectBinomialLimit) {
    double c = 1.0;
    for (int j = 1; j <= n; ++j) c = c * (k - n + j) / j;
    return c * std::pow(eta, n) * std::pow(1.0 - eta, k - n);
  }
  return std::exp(detail::log_choose(k, n) + n * std::log(eta) + (k - n) * std::log1p(-eta));
}

/// Pass a distribution through a loss channel. The input's own tail has
/// unknown shape, so it stays in the output tail together with anything
/// pushed above the output truncation.
inline Pmf apply_loss(const Pmf& input, double eta, int n_max) {
  detail::check_eta(eta);
  if (n_max < 0) throw DomainError("n_max must be >= 0");
  Pmf out;
  out.probs.assign(static_cast<std::size_t>(n_max) + 1, 0.0);
  std::vector<double> row;
  double kept = 0.0;
  for (int k = 0; k <= input.n_max(); ++k) {
    const double pk = input.probs[static_cast<std::size_t>(k)];
    if (pk == 0.0) continue;
    detail::loss_row(k, eta, n_max, row);
    for (std::size_t n = 0; n < row.size(); ++n) {
      out.probs[n] += pk * row[n];
    }
  }
  kept = out.total();
  const double in_range = input.total();
  // Mass from represented inputs that landed above n_max.
  const double spilled = std::max(0.0, in_range - kept);
  out.tail_mass = input.tail_mass + spilled;
  return out;
}

/// Distribution of the sum of two independent photon numbers.
inline Pmf convolve(const Pmf& a, const Pmf& b, int n_max) {
  if (n_max < 0) throw DomainError("n_max must be >= 0");
  Pmf out;
  out.probs.assign(static_cast<std::size_t>(n_max) + 1, 0.0);
  const int na = std::min(a.n_max(), n_max);
  for (int i = 0; i <= na; ++i) {
    const double ai = a.probs[static_cast<std::size_t>(i)];
    if (ai == 0.0) continue;
    const int nb = std::min(b.n_max(), n_max - i);
    for (int j = 0; j <= nb; ++j) out.probs[static_cast<std::size_t>(i + j)] += ai * b.probs[static_cast<std::size_t>(j)];
  }
  // Products of represented entries that exceed n_max.
  double dropped = 0.0;
  {
    std::vector<double> suffix(b.probs.size() + 1, 0.0);
    for (std::size_t j = b.probs.size(); j-- > 0;) suffix[j] = suffix[j + 1] + b.probs[j];
    for (int i = 0; i <= a.n_max(); ++i) {
      const int first = std::max(0, n_max - i + 1);
      if (static_cast<std::size_t>(first) < suffix.size()) dropped += a.probs[static_cast<std::size_t>(i)] * suffix[static_cast<std::size_t>(first)];
    }
  }
  const double sa = a.total();
  const double sb = b.total();
  out.tail_mass = a.tail_mass * (sb + b.tail_mass) + sa * b.tail_mass + dropped;
  return out;
}

} // namespace modestruct
