#pragma once

// Scoring function, bounded parameterization and the RPD / JPD fit drivers.

#include <Eigen/Dense>
#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modestruct/forward_model.hpp"
#include "modestruct/goodness_of_fit.hpp"
#include "modestruct/optimizer.hpp"
#include "modestruct/reduction.hpp"

namespace modestruct {

/// How the sigma_j of the score are obtained from the data.
/// ShotNoise: sigma of the probability itself, sqrt(p/N) floored at 1/N.
/// RootScale: sigma of sqrt(p), 1/(2 sqrt(N)) for every cell.
enum class Weighting { ShotNoise, RootScale };

inline std::string_view to_string(Weighting w) { return w == Weighting::ShotNoise ? "shot_noise" : "root_scale"; }

inline Weighting weighting_from_string(std::string_view s) {
  if (s == "shot_noise") return Weighting::ShotNoise;
  if (s == "root_scale") return Weighting::RootScale;
  throw std::invalid_argument("unknown weighting '" + std::string(s) + "'");
}

struct FitConfig {
  OptimizerConfig optimizer;
  Weighting weighting = Weighting::RootScale;
  /// Weight of the step-1 consistency penalty. The penalty is a sum of
  /// squared deviations in units of the step-1 standard errors, so 1 makes it
  /// count like the data.
  double penalty_weight = 1.0;
  /// One transmittance per arm for all conjugated modes instead of per mode.
  bool shared_losses = false;
  /// Trial count assumed for exact (noiseless) inputs.
  double nominal_n_tot = 1e6;
  std::uint64_t seed = 0;
  /// Restarts ending more than this (relative) above the best are counted
  /// as stuck in a worse stationary point.
  double disagreement_tol = 1e-6;
};

/// sum_j ((sqrt(x_j) - sqrt(f_j)) / sigma_j)^2
inline double score(std::span<const double> x, std::span<const double> f, std::span<const double> sigma) {
  if (x.size() != f.size() || x.size() != sigma.size()) throw std::invalid_argument("score: size mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (!(sigma[j] > 0.0)) throw std::invalid_argument("score: sigma must be positive");
    const double d = (std::sqrt(std::max(0.0, x[j])) - std::sqrt(std::max(0.0, f[j]))) / sigma[j];
    s += d * d;
  }
  return s;
}

enum class ParamRole { ModeMu, EtaSignal, EtaIdler };
enum class Transform { Log, Logit };

inline std::string_view to_string(ParamRole r) {
  switch (r) {
  case ParamRole::ModeMu: return "mu";
  case ParamRole::EtaSignal: return "eta_s";
  case ParamRole::EtaIdler: return "eta_i";
  }
  return "?";
}

/// One free parameter. mode = -1 marks a transmittance shared by every
/// conjugated mode, or a mean shared by every mode of an equal-population fit.
struct ParamEntry {
  ParamRole role = ParamRole::ModeMu;
  int mode = 0;
  double value = 0.0;
  Transform transform = Transform::Log;
};

namespace detail {

inline constexpr double kParamFloor = 1e-12;

inline double to_theta(double v, Transform t) {
  if (t == Transform::Log) return std::log(std::max(v, kParamFloor));
  const double c = std::clamp(v, kParamFloor, 1.0 - kParamFloor);
  return std::log(c / (1.0 - c));
}

inline double from_theta(double th, Transform t) {
  if (t == Transform::Log) return std::exp(std::min(th, 700.0));
  return 1.0 / (1.0 + std::exp(-th));
}

/// d value / d theta, for the delta method.
inline double jacobian(double v, Transform t) { return t == Transform::Log ? v : v * (1.0 - v); }

} // namespace detail

struct ParamVector {
  std::vector<ParamEntry> entries;

  std::size_t size() const { return entries.size(); }

  std::vector<double> to_unconstrained() const {
    std::vector<double> th;
    for (const auto& e : entries) th.push_back(detail::to_theta(e.value, e.transform));
    return th;
  }

  void assign_unconstrained(std::span<const double> theta) {
    for (std::size_t k = 0; k < entries.size(); ++k) entries[k].value = detail::from_theta(theta[k], entries[k].transform);
  }
};

/// Means for every mode, and transmittances for conjugated modes (per mode
/// or one pair for all).
inline ParamVector parameterize(const SourceModel& model, bool shared_losses) {
  ParamVector p;
  bool any_conjugated = false;
  for (std::size_t j = 0; j < model.modes.size(); ++j) {
    const auto& m = model.modes[j];
    const int idx = static_cast<int>(j);
    p.entries.push_back({ParamRole::ModeMu, idx, m.mu,
                         m.type == ModeType::SinglePhoton ? Transform::Logit : Transform::Log});
    if (m.occupancy != Occupancy::Conjugated) continue;
    if (shared_losses) {
      if (!any_conjugated) {
        p.entries.push_back({ParamRole::EtaSignal, -1, m.eta_s, Transform::Logit});
        p.entries.push_back({ParamRole::EtaIdler, -1, m.eta_i, Transform::Logit});
      }
    } else {
      p.entries.push_back({ParamRole::EtaSignal, idx, m.eta_s, Transform::Logit});
      p.entries.push_back({ParamRole::EtaIdler, idx, m.eta_i, Transform::Logit});
    }
    any_conjugated = true;
  }
  return p;
}

inline void apply_params(const ParamVector& p, SourceModel& model) {
  for (const auto& e : p.entries) {
    if (e.role == ParamRole::ModeMu) {
      if (e.mode < 0) {
        for (auto& m : model.modes) m.mu = e.value;
      } else {
        model.modes[static_cast<std::size_t>(e.mode)].mu = e.value;
      }
      continue;
    }
    for (std::size_t j = 0; j < model.modes.size(); ++j) {
      auto& m = model.modes[j];
      if (m.occupancy != Occupancy::Conjugated) continue;
      if (e.mode >= 0 && static_cast<std::size_t>(e.mode) != j) continue;
      (e.role == ParamRole::EtaSignal ? m.eta_s : m.eta_i) = e.value;
    }
  }
}

/// Single-arm mode with its effective (loss-adjusted) mean.
struct ReducedMode {
  ModeType type = ModeType::Thermal;
  double mu = 0.0;
  /// Standard error of mu from the step-1 fit (0 when unknown).
  double sigma = 0.0;
  bool operator==(const ReducedMode&) const = default;
};

struct ArmStructure {
  std::vector<ReducedMode> signal;
  std::vector<ReducedMode> idler;
};

/// Observations prepared for fitting, conditioned on in-range events:
/// x = counts / sum(counts), and the model is compared as f / sum(f).
struct FitData {
  int n_max = 0;
  bool two_d = false;
  std::vector<double> x;
  std::vector<double> sigma;
  /// Raw counts (empty for exact input).
  std::vector<std::uint64_t> counts;
  /// In-range events, or the nominal trial count for exact input.
  double n_eff = 0.0;

  bool has_counts() const { return !counts.empty(); }
};

namespace detail {

inline void fill_sigma(FitData& d, Weighting w) {
  d.sigma.resize(d.x.size());
  for (std::size_t c = 0; c < d.x.size(); ++c)
    d.sigma[c] = w == Weighting::ShotNoise ? shot_noise_sigma(d.x[c], d.n_eff) : 0.5 / std::sqrt(d.n_eff);
}

template <typename T>
std::vector<double> normalized(std::span<const T> v) {
  double s = 0.0;
  for (T a : v) s += static_cast<double>(a);
  std::vector<double> out(v.size(), 0.0);
  if (s > 0.0)
    for (std::size_t c = 0; c < v.size(); ++c) out[c] = static_cast<double>(v[c]) / s;
  return out;
}

} // namespace detail

inline FitData fit_data(const CountMatrix& m, Weighting w) {
  FitData d;
  d.n_max = m.n_max();
  d.two_d = true;
  const auto c = m.counts.values();
  d.counts.assign(c.begin(), c.end());
  d.n_eff = static_cast<double>(m.in_range());
  if (d.n_eff < 1.0) throw std::invalid_argument("fit data needs at least one in-range event");
  d.x = detail::normalized<std::uint64_t>(d.counts);
  detail::fill_sigma(d, w);
  return d;
}

inline FitData fit_data(const ProbMatrix& m, double nominal_n_tot, Weighting w) {
  FitData d;
  d.n_max = m.n_max();
  d.two_d = true;
  d.n_eff = nominal_n_tot;
  d.x = detail::normalized<double>(m.p.values());
  detail::fill_sigma(d, w);
  return d;
}

/// Count-derived RPDs use their summed counts. Exact RPDs keep the
/// uncertainties they carry (ShotNoise) or use the nominal trial count.
inline FitData fit_data(const Rpd& r, Weighting w, double nominal_n_tot) {
  FitData d;
  d.n_max = r.n_max();
  if (r.has_counts()) {
    d.counts = r.counts;
    d.n_eff = 0.0;
    for (auto c : r.counts) d.n_eff += static_cast<double>(c);
    if (d.n_eff < 1.0) throw std::invalid_argument("fit data needs at least one in-range event");
    d.x = detail::normalized<std::uint64_t>(d.counts);
    detail::fill_sigma(d, w);
    return d;
  }
  d.n_eff = nominal_n_tot;
  d.x = detail::normalized<double>(r.probs);
  if (w == Weighting::ShotNoise && r.uncertainties.size() == r.probs.size()) {
    d.sigma = r.uncertainties;
    for (double& s : d.sigma) s = std::max(s, 1.0 / nominal_n_tot);
  } else {
    detail::fill_sigma(d, w);
  }
  return d;
}

struct FitResult {
  ParamVector params;
  /// Fitted model in canonical order. RPD fits hold single-arm modes whose
  /// means are the effective means.
  SourceModel model;
  double score = std::numeric_limits<double>::infinity();
  double penalty = 0.0;
  PearsonResult pearson;
  double p_value = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  int restarts_used = 0;
  std::size_t best_restart = 0;
  std::uint64_t best_restart_seed = 0;
  std::vector<double> restart_scores;
  std::vector<bool> restart_converged;
  /// Converged restarts that stopped at a clearly worse score.
  int worse_restarts = 0;
  bool restarts_disagree = false;
  long evaluations = 0;
  /// sqrt(sum (x - f)^2) on the unnormalized arrays.
  double residual_l2 = 0.0;
  /// Standard errors of params (natural units) from the Fisher information;
  /// empty when the information matrix is singular.
  std::vector<double> std_errors;
  /// Covariance of the unconstrained coordinates.
  Eigen::MatrixXd covariance;
  std::vector<std::string> notes;
};

namespace detail {

using Predictor = std::function<std::vector<double>(const SourceModel&)>;
using Penalty = std::function<double(const SourceModel&)>;

inline double objective_value(const FitData& d, const std::vector<double>& f_raw) {
  double s = 0.0;
  for (double v : f_raw) s += v;
  if (!(s > 0.0)) return std::numeric_limits<double>::infinity();
  std::vector<double> f(f_raw.size());
  for (std::size_t c = 0; c < f.size(); ++c) f[c] = f_raw[c] / s;
  return score(d.x, f, d.sigma);
}

inline std::vector<double> predict_normalized(const Predictor& predict, const SourceModel& m) {
  std::vector<double> f = predict(m);
  double s = 0.0;
  for (double v : f) s += v;
  if (s > 0.0)
    for (double& v : f) v /= s;
  return f;
}

inline std::vector<int> shells(const FitData& d) {
  std::vector<int> out;
  const int n = d.n_max;
  if (d.two_d) {
    for (int s = 0; s <= n; ++s)
      for (int i = 0; i <= n; ++i) out.push_back(s + i);
  } else {
    for (int k = 0; k <= n; ++k) out.push_back(k);
  }
  return out;
}

/// Fisher information of the multinomial model in unconstrained
/// coordinates, I = N sum_c (df_c/dth)(df_c/dth)^T / f_c.
inline Eigen::MatrixXd fisher_information(const FitData& d, const SourceModel& base, const ParamVector& at,
                                         const Predictor& predict) {
  const std::size_t k = at.size();
  const std::vector<double> th0 = at.to_unconstrained();
  SourceModel m0 = base;
  apply_params(at, m0);
  const std::vector<double> f0 = predict_normalized(predict, m0);
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(f0.size()), static_cast<Eigen::Index>(k));
  const double h = 1e-5;
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<double> fp, fm;
    for (int sign : {1, -1}) {
      std::vector<double> th = th0;
      th[a] += sign * h;
      ParamVector p = at;
      p.assign_unconstrained(th);
      SourceModel m = base;
      apply_params(p, m);
      (sign > 0 ? fp : fm) = predict_normalized(predict, m);
    }
    for (std::size_t c = 0; c < f0.size(); ++c)
      jac(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(a)) = (fp[c] - fm[c]) / (2.0 * h);
  }
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
  for (std::size_t c = 0; c < f0.size(); ++c) {
    if (f0[c] < 1e-300) continue;
    const auto row = jac.row(static_cast<Eigen::Index>(c));
    info += d.n_eff * row.transpose() * row / f0[c];
  }
  return info;
}

/// Pseudo-inverse of the Fisher information; directions the data do not
/// constrain get zero weight. `variances` receives per-parameter variances,
/// infinite for parameters with weight on such a direction.
inline Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& info, std::vector<double>& variances) {
  const Eigen::Index k = info.rows();
  variances.assign(static_cast<std::size_t>(k), std::numeric_limits<double>::infinity());
  if (k == 0 || !info.allFinite()) return {};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
  const Eigen::VectorXd& lam = eig.eigenvalues();
  const Eigen::MatrixXd& v = eig.eigenvectors();
  const double cut = 1e-12 * std::max(lam.cwiseAbs().maxCoeff(), 1e-300);
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(k);
  for (Eigen::Index j = 0; j < k; ++j)
    if (lam(j) > cut) inv(j) = 1.0 / lam(j);
  for (Eigen::Index a = 0; a < k; ++a) {
    double var = 0.0;
    bool degenerate = false;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (inv(j) > 0.0)
        var += v(a, j) * v(a, j) * inv(j);
      else if (std::abs(v(a, j)) > 1e-6)
        degenerate = true;
    }
    if (!degenerate) variances[static_cast<std::size_t>(a)] = var;
  }
  return v * inv.asDiagonal() * v.transpose();
}

inline void attach_errors(FitResult& r, const FitData& d, const SourceModel& base, const Predictor& predict) {
  std::vector<double> var;
  r.covariance = pseudo_inverse(fisher_information(d, base, r.params, predict), var);
  r.std_errors.clear();
  bool degenerate = false;
  for (std::size_t a = 0; a < r.params.size(); ++a) {
    const auto& e = r.params.entries[a];
    degenerate = degenerate || !std::isfinite(var[a]);
    r.std_errors.push_back(std::sqrt(var[a]) * jacobian(e.value, e.transform));
  }
  if (degenerate) r.notes.emplace_back("Fisher information singular: some standard errors are infinite");
}

inline void attach_pearson(FitResult& r, const FitData& d, const Predictor& predict) {
  if (!d.has_counts()) return;
  const std::vector<double> f = predict(r.model);
  const std::vector<int> sh = shells(d);
  r.pearson = pearson_test(d.counts, f, sh, static_cast<int>(r.params.size()));
  r.p_value = r.pearson.p_value;
}

inline double residual_l2(std::span<const double> x, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t c = 0; c < x.size(); ++c) s += (x[c] - f[c]) * (x[c] - f[c]);
  return std::sqrt(s);
}

/// Data concentrated in the vacuum cell: the boundary solution with every
/// mean at zero is returned without searching.
inline bool vacuum_only(const FitData& d) {
  if (d.x.empty() || d.x[0] != 1.0) return false;
  return std::all_of(d.x.begin() + 1, d.x.end(), [](double v) { return v == 0.0; });
}

/// Multi-start search over params starting at `start`, then the model is
/// canonicalized and the parameter vector rebuilt in that order.
inline FitResult run_fit(const FitData& d, const SourceModel& start, bool shared_losses, const Predictor& predict,
                         const Penalty& penalty, const FitConfig& cfg) {
  FitResult r;
  r.params = parameterize(start, shared_losses);
  if (vacuum_only(d)) {
    r.model = start;
    for (auto& m : r.model.modes) m.mu = 0.0;
    r.params = parameterize(r.model, shared_losses);
    r.score = objective_value(d, predict(r.model));
    r.converged = false;
    r.notes.emplace_back("degenerate data: all events in the vacuum cell, boundary solution returned");
    attach_pearson(r, d, predict);
    return r;
  }
  const ParamVector proto = r.params;
  const Objective objective = [&](std::span<const double> th) {
    ParamVector p = proto;
    p.assign_unconstrained(th);
    SourceModel m = start;
    apply_params(p, m);
    const double pen = penalty ? penalty(m) : 0.0;
    return objective_value(d, predict(m)) + pen;
  };
  const MultiStartResult ms = multi_start(objective, proto.to_unconstrained(), cfg.optimizer, cfg.seed);
  ParamVector best = proto;
  best.assign_unconstrained(ms.best.x);
  r.model = start;
  apply_params(best, r.model);
  r.penalty = penalty ? penalty(r.model) : 0.0;
  r.score = ms.best.value - r.penalty;
  r.converged = ms.best.converged;
  r.restarts_used = static_cast<int>(ms.runs.size());
  r.best_restart = ms.best_index;
  r.best_restart_seed = derive_seed(cfg.seed, ms.best_index);
  for (const auto& run : ms.runs) {
    r.restart_scores.push_back(run.value);
    r.restart_converged.push_back(run.converged);
    r.evaluations += run.evaluations;
    const double gap = run.value - ms.best.value;
    if (run.converged && gap > cfg.disagreement_tol * std::max(1.0, std::abs(ms.best.value))) ++r.worse_restarts;
  }
  r.restarts_disagree = r.worse_restarts > 0;
  if (!ms.any_converged()) r.notes.emplace_back("no restart met the convergence tolerances");
  r.model.canonicalize();
  r.params = parameterize(r.model, shared_losses);
  attach_pearson(r, d, predict);
  attach_errors(r, d, r.model, predict);
  return r;
}

inline Occupancy arm_occupancy(Arm a) { return a == Arm::Signal ? Occupancy::SignalOnly : Occupancy::IdlerOnly; }

inline Predictor rpd_predictor(int n_max) {
  return [n_max](const SourceModel& m) { return uncorrelated_pmf(m.modes, n_max).probs; };
}

inline Predictor jpd_predictor() {
  return [](const SourceModel& m) {
    const ProbMatrix p = full_jpd(m);
    return std::vector<double>(p.p.values().begin(), p.p.values().end());
  };
}

} // namespace detail

/// Complete single-arm distribution of a model: every mode visible in the
/// arm at its effective mean.
inline Pmf arm_pmf(const SourceModel& model, Arm arm, int n_max) {
  std::vector<ModeSpec> eff;
  for (const auto& m : model.modes) {
    if (m.occupancy == Occupancy::Conjugated)
      eff.push_back({m.type, m.mu * (arm == Arm::Signal ? m.eta_s : m.eta_i), detail::arm_occupancy(arm), 1.0, 1.0});
    else if (m.occupancy == detail::arm_occupancy(arm))
      eff.push_back(m);
  }
  return uncorrelated_pmf(eff, n_max);
}

/// P(other arm <= n_max | this arm = n) under the model: the fraction of
/// row (signal) or column (idler) n that survives truncation of the square.
inline std::vector<double> truncation_keep_fraction(const SourceModel& model, Arm arm) {
  const Rpd in_square = marginalize(full_jpd(model), arm);
  const Pmf full = arm_pmf(model, arm, model.n_max);
  std::vector<double> keep(in_square.probs.size(), 1.0);
  for (std::size_t n = 0; n < keep.size(); ++n)
    if (full[n] > 0.0) keep[n] = std::clamp(in_square.probs[n] / full[n], 0.0, 1.0);
  return keep;
}

/// Count-derived RPD with each bin divided by its keep fraction (floored at
/// 1e-3), i.e. an estimate of the arm's own distribution before the other
/// arm was truncated. Counts are rounded to whole events.
inline Rpd correct_truncation(const Rpd& r, std::span<const double> keep) {
  if (keep.size() != r.probs.size()) throw std::invalid_argument("correct_truncation: size mismatch");
  Rpd out = r;
  if (!r.has_counts()) {
    for (std::size_t n = 0; n < out.probs.size(); ++n) out.probs[n] /= std::max(keep[n], 1e-3);
    return out;
  }
  const double nt = static_cast<double>(r.n_tot);
  for (std::size_t n = 0; n < out.counts.size(); ++n) {
    out.counts[n] = static_cast<std::uint64_t>(std::llround(static_cast<double>(r.counts[n]) / std::max(keep[n], 1e-3)));
    out.probs[n] = static_cast<double>(out.counts[n]) / nt;
    out.uncertainties[n] = shot_noise_sigma(out.probs[n], nt);
  }
  return out;
}

/// Generic bounded minimization in transformed coordinates.
inline MultiStartResult minimize(const Objective& objective, const ParamVector& initial, const OptimizerConfig& cfg,
                                 std::uint64_t seed) {
  return multi_start(objective, initial.to_unconstrained(), cfg, seed);
}

/// Fits effective means of the given mode types to one arm's RPD.
inline FitResult fit_rpd(const Rpd& rpd, std::span<const ModeType> types, const FitConfig& cfg) {
  if (types.empty()) throw std::invalid_argument("fit_rpd needs a non-empty template");
  const FitData d = fit_data(rpd, cfg.weighting, cfg.nominal_n_tot);
  const double total = rpd.total();
  const double mean = total > 0.0 ? std::max(rpd.mean() / total, 1e-3) : 1e-3;
  SourceModel start;
  start.n_max = rpd.n_max();
  double wsum = 0.0;
  for (std::size_t j = 0; j < types.size(); ++j) wsum += std::ldexp(1.0, -static_cast<int>(j));
  for (std::size_t j = 0; j < types.size(); ++j) {
    double mu = mean * std::ldexp(1.0, -static_cast<int>(j)) / wsum;
    if (types[j] == ModeType::SinglePhoton) mu = std::min(mu, 0.5);
    start.modes.push_back({types[j], mu, detail::arm_occupancy(rpd.arm), 1.0, 1.0});
  }
  const auto predict = detail::rpd_predictor(rpd.n_max());
  FitResult r = detail::run_fit(d, start, false, predict, nullptr, cfg);
  r.residual_l2 = detail::residual_l2(rpd.probs, predict(r.model));
  return r;
}

/// k modes of one type constrained to a common mean; a one-dimensional
/// Brent search over log(mu) bracketed by a coarse grid.
inline FitResult fit_rpd_equal(const Rpd& rpd, ModeType type, int k, const FitConfig& cfg) {
  if (k < 1) throw std::invalid_argument("fit_rpd_equal needs k >= 1");
  const FitData d = fit_data(rpd, cfg.weighting, cfg.nominal_n_tot);
  SourceModel model;
  model.n_max = rpd.n_max();
  model.modes.assign(static_cast<std::size_t>(k), ModeSpec{type, 0.0, detail::arm_occupancy(rpd.arm), 1.0, 1.0});
  const auto predict = detail::rpd_predictor(rpd.n_max());
  const Transform tr = type == ModeType::SinglePhoton ? Transform::Logit : Transform::Log;
  long evals = 0;
  auto at = [&](double th) {
    ++evals;
    SourceModel m = model;
    for (auto& mode : m.modes) mode.mu = detail::from_theta(th, tr);
    return detail::objective_value(d, predict(m));
  };
  const double mean = std::max(rpd.mean() / std::max(rpd.total(), 1e-300), 1e-3);
  const double lo = tr == Transform::Log ? std::log(1e-5) : -12.0;
  const double hi = tr == Transform::Log ? std::log(std::max(100.0, 10.0 * mean)) : 12.0;
  const int grid = 120;
  int best = 0;
  std::vector<double> vals(grid + 1);
  for (int g = 0; g <= grid; ++g) {
    vals[static_cast<std::size_t>(g)] = at(lo + (hi - lo) * g / grid);
    if (vals[static_cast<std::size_t>(g)] < vals[static_cast<std::size_t>(best)]) best = g;
  }
  const double a = lo + (hi - lo) * std::max(0, best - 1) / grid;
  const double b = lo + (hi - lo) * std::min(grid, best + 1) / grid;
  boost::uintmax_t iters = 200;
  const auto [th, fmin] = boost::math::tools::brent_find_minima(at, a, b, std::numeric_limits<double>::digits / 2, iters);
  FitResult r;
  r.model = model;
  for (auto& mode : r.model.modes) mode.mu = detail::from_theta(th, tr);
  r.params.entries.push_back({ParamRole::ModeMu, -1, r.model.modes.front().mu, tr});
  r.score = fmin;
  r.converged = iters < 200 && best > 0 && best < grid;
  if (!r.converged) r.notes.emplace_back("shared-mean search ended at the bracket edge or iteration cap");
  r.restarts_used = 1;
  r.restart_scores = {fmin};
  r.restart_converged = {r.converged};
  r.evaluations = evals;
  r.residual_l2 = detail::residual_l2(rpd.probs, predict(r.model));
  detail::attach_pearson(r, d, predict);
  detail::attach_errors(r, d, model, predict);
  return r;
}

/// Step-1 consistency: per arm and per type, the model's effective means
/// (mu*eta for conjugated modes, mu for that arm's background modes) sorted
/// in descending order against the RPD means, also sorted, in units of the
/// step-1 standard errors. Being label-free it does not depend on which
/// conjugated mode ends up where. Missing partners count as zero with an
/// uncertainty of 1% of the arm total.
inline double structure_penalty(const SourceModel& model, const ArmStructure& target, double weight) {
  double pen = 0.0;
  for (Arm arm : {Arm::Signal, Arm::Idler}) {
    const auto& tgt = arm == Arm::Signal ? target.signal : target.idler;
    double total = 0.0;
    for (const auto& t : tgt) total += t.mu;
    const double floor = 0.01 * total + 1e-12;
    for (ModeType type : {ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton}) {
      std::vector<double> a;
      std::vector<ReducedMode> b;
      for (const auto& m : model.modes) {
        if (m.type != type) continue;
        if (m.occupancy == Occupancy::Conjugated)
          a.push_back(m.mu * (arm == Arm::Signal ? m.eta_s : m.eta_i));
        else if (m.occupancy == detail::arm_occupancy(arm))
          a.push_back(m.mu);
      }
      for (const auto& t : tgt)
        if (t.type == type) b.push_back(t);
      if (b.empty()) continue;
      std::sort(a.rbegin(), a.rend());
      std::sort(b.begin(), b.end(), [](const ReducedMode& x, const ReducedMode& y) { return x.mu > y.mu; });
      const std::size_t n = std::max(a.size(), b.size());
      a.resize(n, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const bool present = j < b.size();
        const double mu = present ? b[j].mu : 0.0;
        double sd = present ? b[j].sigma : floor;
        if (!(sd > 0.0) || std::isnan(sd)) sd = floor;
        pen += (a[j] - mu) * (a[j] - mu) / (sd * sd);
      }
    }
  }
  return weight * pen;
}

/// JPD fit from the starting model `start` (its mode count, types and
/// occupancies are the template; its values the initial point). With
/// constraints the step-1 penalty is added.
inline FitResult fit_jpd(const FitData& d, const SourceModel& start, const ArmStructure* constraints,
                         const FitConfig& cfg) {
  if (!d.two_d) throw std::invalid_argument("fit_jpd needs two-dimensional data");
  SourceModel templ = start;
  templ.n_max = d.n_max;
  templ.validate();
  detail::Penalty pen;
  if (constraints && cfg.penalty_weight > 0.0) {
    const ArmStructure target = *constraints;
    const double w = cfg.penalty_weight;
    pen = [target, w](const SourceModel& m) { return structure_penalty(m, target, w); };
  }
  return detail::run_fit(d, templ, cfg.shared_losses, detail::jpd_predictor(), pen, cfg);
}

inline FitResult fit_jpd(const CountMatrix& observed, const SourceModel& start, const ArmStructure* constraints,
                         const FitConfig& cfg) {
  return fit_jpd(fit_data(observed, cfg.weighting), start, constraints, cfg);
}

inline FitResult fit_jpd(const ProbMatrix& exact, const SourceModel& start, const ArmStructure* constraints,
                         const FitConfig& cfg) {
  return fit_jpd(fit_data(exact, cfg.nominal_n_tot, cfg.weighting), start, constraints, cfg);
}

/// Reduced modes of an RPD fit, in canonical order.
inline std::vector<ReducedMode> reduced_modes(const FitResult& r) {
  std::vector<ReducedMode> out;
  const bool shared = r.params.size() == 1 && r.params.entries[0].mode < 0;
  for (std::size_t j = 0; j < r.model.modes.size(); ++j) {
    const auto& m = r.model.modes[j];
    const std::size_t k = shared ? 0 : j;
    out.push_back({m.type, m.mu, k < r.std_errors.size() ? r.std_errors[k] : std::numeric_limits<double>::infinity()});
  }
  return out;
}

} // namespace modestruct
