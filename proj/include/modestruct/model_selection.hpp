#pragma once

// Mode-structure discovery from reduced distributions: thermal escalation,
// forward growth over mode types, pruning, and conjugation assignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "modestruct/fitting.hpp"

namespace modestruct {

struct SelectionConfig {
  FitConfig fit;
  /// Fraction of the arm total below which a mode is dropped.
  double prune_threshold = 0.01;
  int assignment_cap = 64;
  std::vector<ModeType> candidate_types{ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton};
  /// Largest number of modes tried per arm.
  int max_modes = 6;
  /// Required score drop for one more mode (score is chi-squared scaled).
  double min_improvement = 9.0;
  /// Stability and significance threshold in standard errors.
  double sigma_threshold = 3.0;
  /// Two candidate structures whose scores differ by less than this are
  /// reported as ambiguous.
  double ambiguity_tol = 1.0;
  /// Thermal means within this relative spread count as equal populations.
  double equal_population_tol = 0.1;
};

struct EscalationRow {
  int k = 0;
  double mu_per_mode = 0.0;
  double total = 0.0;
  /// sqrt(sum (x - f)^2)
  double error = 0.0;
  double score = 0.0;
  /// Cross-check with k free means (empty when not run).
  std::vector<double> free_mu;
  double free_score = 0.0;
};

/// Equal-population thermal fits for k = 1..k_max. The free-mean cross-check
/// runs for k <= free_check_max.
inline std::vector<EscalationRow> escalate_thermal(const Rpd& rpd, int k_max, const FitConfig& cfg,
                                                   int free_check_max = 4) {
  if (k_max < 1) throw std::invalid_argument("escalate_thermal needs k_max >= 1");
  std::vector<EscalationRow> rows;
  for (int k = 1; k <= k_max; ++k) {
    const FitResult eq = fit_rpd_equal(rpd, ModeType::Thermal, k, cfg);
    EscalationRow row;
    row.k = k;
    row.mu_per_mode = eq.model.modes.front().mu;
    row.total = k * row.mu_per_mode;
    row.error = eq.residual_l2;
    row.score = eq.score;
    if (k <= free_check_max) {
      const std::vector<ModeType> types(static_cast<std::size_t>(k), ModeType::Thermal);
      const FitResult fr = fit_rpd(rpd, types, cfg);
      for (const auto& m : fr.model.modes) row.free_mu.push_back(m.mu);
      row.free_score = fr.score;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

struct StructureCandidate {
  std::vector<ModeType> types;
  std::vector<ReducedMode> modes;
  double score = 0.0;
  double p_value = 0.0;
  bool converged = false;
  bool accepted = false;
  /// "start", "add thermal", "substitute poissonian", ...
  std::string move;
};

struct StructureResult {
  Arm arm = Arm::Signal;
  std::vector<ReducedMode> modes;
  FitResult fit;
  std::vector<StructureCandidate> tried;
  bool ambiguous = false;
  std::vector<std::string> notes;
};

inline std::string describe(std::span<const ModeType> types) {
  int t = 0, p = 0, s = 0;
  for (ModeType m : types) (m == ModeType::Thermal ? t : m == ModeType::Poissonian ? p : s)++;
  return std::to_string(t) + "T+" + std::to_string(p) + "P+" + std::to_string(s) + "SP";
}

namespace detail {

inline bool allowed(const SelectionConfig& cfg, ModeType t) {
  return std::find(cfg.candidate_types.begin(), cfg.candidate_types.end(), t) != cfg.candidate_types.end();
}

inline int count_type(std::span<const ModeType> types, ModeType t) {
  return static_cast<int>(std::count(types.begin(), types.end(), t));
}

inline bool all_in_vacuum(const Rpd& rpd) {
  for (std::size_t n = 1; n < rpd.probs.size(); ++n)
    if (rpd.probs[n] > 0.0) return false;
  return true;
}

/// Largest root-scale residual in units of the fit sigma at n = 0 and 1.
inline double low_number_residual(const Rpd& rpd, const FitResult& fit, const FitConfig& cfg) {
  const FitData d = fit_data(rpd, cfg.weighting, cfg.nominal_n_tot);
  std::vector<double> f = uncorrelated_pmf(fit.model.modes, rpd.n_max()).probs;
  double s = 0.0;
  for (double v : f) s += v;
  double worst = 0.0;
  for (std::size_t n = 0; n < std::min<std::size_t>(2, f.size()); ++n)
    worst = std::max(worst, std::abs(std::sqrt(d.x[n]) - std::sqrt(f[n] / s)) / d.sigma[n]);
  return worst;
}

/// Retained (parent) modes compared with the best same-type partners of the
/// child fit, both sorted by descending mean; true if any moved by more than
/// `k` standard errors. The child's unmatched mode is the added one.
inline bool parent_moved(const std::vector<ReducedMode>& parent, const std::vector<ReducedMode>& child, double k) {
  for (ModeType t : {ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton}) {
    std::vector<ReducedMode> a, b;
    for (const auto& m : parent)
      if (m.type == t) a.push_back(m);
    for (const auto& m : child)
      if (m.type == t) b.push_back(m);
    auto by_mu = [](const ReducedMode& x, const ReducedMode& y) { return x.mu > y.mu; };
    std::sort(a.begin(), a.end(), by_mu);
    std::sort(b.begin(), b.end(), by_mu);
    for (std::size_t j = 0; j < std::min(a.size(), b.size()); ++j) {
      const double sd = std::max(a[j].sigma, 1e-12);
      if (std::abs(a[j].mu - b[j].mu) > k * sd) return true;
    }
  }
  return false;
}

/// The mode a child has beyond its parent: the smallest child mode of the
/// type whose count grew.
inline ReducedMode added_mode(std::span<const ModeType> parent, const std::vector<ReducedMode>& child) {
  for (ModeType t : {ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton}) {
    int pc = count_type(parent, t);
    int cc = 0;
    ReducedMode smallest{t, std::numeric_limits<double>::infinity(), 0.0};
    for (const auto& m : child)
      if (m.type == t) {
        ++cc;
        if (m.mu < smallest.mu) smallest = m;
      }
    if (cc > pc) return smallest;
  }
  return {};
}

inline bool equal_populations(const std::vector<ReducedMode>& modes, double tol) {
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  int n = 0;
  for (const auto& m : modes)
    if (m.type == ModeType::Thermal) {
      lo = std::min(lo, m.mu);
      hi = std::max(hi, m.mu);
      ++n;
    }
  return n >= 2 && hi > 0.0 && (hi - lo) / hi < tol;
}

} // namespace detail

/// Forward growth of one arm's structure. From the empty structure each step
/// fits the current structure plus one thermal or Poissonian mode, plus, when
/// the thermals carry equal populations, the thermals replaced by one
/// Poissonian. A single-photon mode is tried only when that growth stalls and
/// the fit leaves residual structure at n <= 1. A candidate is accepted if it
/// lowers the score by
/// more than min_improvement and either its new mode is significant or a
/// retained mean moved by more than sigma_threshold standard errors.
inline StructureResult detect_structure(const Rpd& rpd, const SelectionConfig& cfg) {
  StructureResult out;
  out.arm = rpd.arm;
  if (detail::all_in_vacuum(rpd)) {
    out.notes.emplace_back("all events in the vacuum bin: no modes");
    return out;
  }
  FitConfig fc = cfg.fit;
  auto run = [&](const std::vector<ModeType>& types, const std::string& move) {
    StructureCandidate c;
    c.types = types;
    c.move = move;
    fc.seed = derive_seed(cfg.fit.seed, out.tried.size());
    FitResult f = fit_rpd(rpd, types, fc);
    c.modes = reduced_modes(f);
    c.score = f.score;
    c.p_value = f.p_value;
    c.converged = f.converged;
    out.tried.push_back(c);
    return std::make_pair(out.tried.size() - 1, std::move(f));
  };

  std::vector<ModeType> current;
  FitResult current_fit;
  double current_score = std::numeric_limits<double>::infinity();
  std::vector<ReducedMode> current_modes;
  for (int step = 0; step < cfg.max_modes; ++step) {
    struct Option {
      std::vector<ModeType> types;
      std::string move;
    };
    std::vector<Option> options;
    if (detail::allowed(cfg, ModeType::Thermal)) {
      auto t = current;
      t.push_back(ModeType::Thermal);
      options.push_back({t, "add thermal"});
    }
    if (detail::allowed(cfg, ModeType::Poissonian) && detail::count_type(current, ModeType::Poissonian) == 0) {
      auto t = current;
      t.push_back(ModeType::Poissonian);
      options.push_back({t, "add poissonian"});
      if (detail::equal_populations(current_modes, cfg.equal_population_tol)) {
        std::vector<ModeType> sub{ModeType::Poissonian};
        for (ModeType m : current)
          if (m != ModeType::Thermal) sub.push_back(m);
        options.push_back({sub, "substitute poissonian for equal thermals"});
      }
    }
    const bool single_photon_open =
        detail::allowed(cfg, ModeType::SinglePhoton) && detail::count_type(current, ModeType::SinglePhoton) == 0;
    if (options.empty() && single_photon_open) {
      auto t = current;
      t.push_back(ModeType::SinglePhoton);
      options.push_back({t, "add single photon"});
    }
    if (options.empty()) break;

    std::vector<std::pair<std::size_t, FitResult>> fits;
    for (const auto& o : options) fits.push_back(run(o.types, o.move));
    std::size_t best = 0;
    for (std::size_t j = 1; j < fits.size(); ++j)
      if (fits[j].second.score < fits[best].second.score) best = j;
    const FitResult& bf = fits[best].second;
    const StructureCandidate& bc = out.tried[fits[best].first];

    bool accept = false;
    if (current.empty()) {
      accept = true;
    } else if (current_score - bf.score > cfg.min_improvement) {
      const bool substitution = bc.types.size() <= current.size();
      const ReducedMode added = detail::added_mode(current, bc.modes);
      const bool significant = substitution || added.mu > cfg.sigma_threshold * std::max(added.sigma, 1e-12);
      accept = significant || detail::parent_moved(current_modes, bc.modes, cfg.sigma_threshold);
    }
    if (!accept && single_photon_open && bc.types.back() != ModeType::SinglePhoton && !current.empty() &&
        detail::low_number_residual(rpd, current_fit, cfg.fit) > cfg.sigma_threshold) {
      auto t = current;
      t.push_back(ModeType::SinglePhoton);
      auto sp = run(t, "add single photon (residual at n <= 1)");
      if (current_score - sp.second.score > cfg.min_improvement) {
        const ReducedMode added = detail::added_mode(current, out.tried[sp.first].modes);
        if (added.mu > cfg.sigma_threshold * std::max(added.sigma, 1e-12)) {
          fits.push_back(std::move(sp));
          best = fits.size() - 1;
          accept = true;
        }
      }
    }
    const FitResult& chosen = fits[best].second;
    const StructureCandidate& cc = out.tried[fits[best].first];
    if (!accept) {
      out.notes.push_back("stopped at " + describe(current) + ": best extension " + describe(cc.types) +
                          " not supported by the data");
      break;
    }
    for (std::size_t j = 0; j < fits.size(); ++j) {
      if (j == best) continue;
      if (std::abs(fits[j].second.score - chosen.score) < cfg.ambiguity_tol) {
        out.ambiguous = true;
        out.notes.push_back("ambiguous: " + describe(cc.types) + " and " + describe(out.tried[fits[j].first].types) +
                            " fit equally well");
      }
    }
    out.tried[fits[best].first].accepted = true;
    current = cc.types;
    current_modes = cc.modes;
    current_score = chosen.score;
    current_fit = chosen;
    // Backward step: a mode made redundant by a later addition is removed
    // when dropping it costs less than min_improvement.
    for (std::size_t j = current_modes.size(); j-- > 0 && current_modes.size() > 1;) {
      const ReducedMode& m = current_modes[j];
      if (m.sigma > 0.0 && m.mu > cfg.sigma_threshold * m.sigma) continue;
      std::vector<ModeType> reduced;
      for (std::size_t q = 0; q < current_modes.size(); ++q)
        if (q != j) reduced.push_back(current_modes[q].type);
      auto r = run(reduced, "drop redundant " + std::string(to_string(m.type)));
      if (r.second.score - current_score < cfg.min_improvement) {
        out.tried[r.first].accepted = true;
        out.notes.push_back("dropped redundant " + std::string(to_string(m.type)) + " mode");
        current = out.tried[r.first].types;
        current_modes = out.tried[r.first].modes;
        current_score = r.second.score;
        current_fit = std::move(r.second);
        j = current_modes.size();
      }
    }
  }
  out.modes = current_modes;
  out.fit = current_fit;
  return out;
}

/// Drops modes below threshold * (sum of means). Output in canonical order
/// (type rank, then descending mean).
inline std::vector<ReducedMode> prune_modes(const std::vector<ReducedMode>& modes, double threshold,
                                            std::vector<ReducedMode>* dropped = nullptr) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("prune threshold must lie in (0, 1)");
  double total = 0.0;
  for (const auto& m : modes) total += m.mu;
  std::vector<ReducedMode> kept;
  for (const auto& m : modes) {
    if (m.mu >= threshold * total)
      kept.push_back(m);
    else if (dropped)
      dropped->push_back(m);
  }
  auto order = [](const ReducedMode& a, const ReducedMode& b) {
    if (a.type != b.type) return type_rank(a.type) < type_rank(b.type);
    return a.mu > b.mu;
  };
  std::stable_sort(kept.begin(), kept.end(), order);
  if (dropped) std::stable_sort(dropped->begin(), dropped->end(), order);
  return kept;
}

/// One pairing of signal and idler modes: pairs[j] = (signal index, idler
/// index) become conjugated modes; the rest are single-arm background.
struct Assignment {
  std::vector<std::pair<int, int>> pairs;
  SourceModel start;
  FitResult fit;
  std::string label;
};

struct AssignmentResult {
  /// Sorted by descending P-value, then ascending score.
  std::vector<Assignment> ranking;
  bool truncated = false;
  std::size_t enumerated = 0;
  std::vector<std::string> notes;

  const Assignment& best() const { return ranking.front(); }
};

/// Starting model of a pairing: conjugated mu = mu_s + mu_i (both
/// transmittances 0.5), background modes at their effective means.
inline SourceModel assignment_start(const std::vector<ReducedMode>& sig, const std::vector<ReducedMode>& idl,
                                    const std::vector<std::pair<int, int>>& pairs, int n_max) {
  SourceModel m;
  m.n_max = n_max;
  std::vector<bool> used_s(sig.size(), false), used_i(idl.size(), false);
  for (auto [s, i] : pairs) {
    used_s[static_cast<std::size_t>(s)] = used_i[static_cast<std::size_t>(i)] = true;
    const auto& a = sig[static_cast<std::size_t>(s)];
    const auto& b = idl[static_cast<std::size_t>(i)];
    double mu = a.mu + b.mu;
    if (a.type == ModeType::SinglePhoton) mu = std::min(mu, 0.99);
    m.modes.push_back({a.type, mu, Occupancy::Conjugated, 0.5, 0.5});
  }
  for (std::size_t s = 0; s < sig.size(); ++s)
    if (!used_s[s]) m.modes.push_back({sig[s].type, sig[s].mu, Occupancy::SignalOnly, 1.0, 1.0});
  for (std::size_t i = 0; i < idl.size(); ++i)
    if (!used_i[i]) m.modes.push_back({idl[i].type, idl[i].mu, Occupancy::IdlerOnly, 1.0, 1.0});
  return m;
}

inline std::string pairing_label(const std::vector<ReducedMode>& sig, const std::vector<ReducedMode>& idl,
                                 const std::vector<std::pair<int, int>>& pairs) {
  std::string s;
  for (auto [a, b] : pairs) {
    if (!s.empty()) s += ", ";
    s += std::string(to_string(sig[static_cast<std::size_t>(a)].type)) + " s" + std::to_string(a) + "<->i" +
         std::to_string(b);
  }
  return s.empty() ? "independent arms" : s;
}

/// Type-consistent partial matchings. The greedy pairing (per type, by
/// descending mean, as many pairs as possible) comes first, then every
/// other matching in enumeration order with more pairs first.
inline std::vector<std::vector<std::pair<int, int>>> enumerate_pairings(const std::vector<ReducedMode>& sig,
                                                                        const std::vector<ReducedMode>& idl) {
  std::vector<std::vector<std::pair<int, int>>> all;
  std::vector<std::pair<int, int>> cur;
  std::vector<bool> used(idl.size(), false);
  auto rec = [&](auto&& self, std::size_t s) -> void {
    if (s == sig.size()) {
      all.push_back(cur);
      return;
    }
    for (std::size_t i = 0; i < idl.size(); ++i) {
      if (used[i] || idl[i].type != sig[s].type) continue;
      used[i] = true;
      cur.push_back({static_cast<int>(s), static_cast<int>(i)});
      self(self, s + 1);
      cur.pop_back();
      used[i] = false;
    }
    self(self, s + 1);
  };
  rec(rec, 0);

  std::vector<std::pair<int, int>> greedy;
  for (ModeType t : {ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton}) {
    std::vector<int> a, b;
    for (std::size_t s = 0; s < sig.size(); ++s)
      if (sig[s].type == t) a.push_back(static_cast<int>(s));
    for (std::size_t i = 0; i < idl.size(); ++i)
      if (idl[i].type == t) b.push_back(static_cast<int>(i));
    auto desc = [](const std::vector<ReducedMode>& v) {
      return [&v](int x, int y) { return v[static_cast<std::size_t>(x)].mu > v[static_cast<std::size_t>(y)].mu; };
    };
    std::stable_sort(a.begin(), a.end(), desc(sig));
    std::stable_sort(b.begin(), b.end(), desc(idl));
    for (std::size_t j = 0; j < std::min(a.size(), b.size()); ++j) greedy.push_back({a[j], b[j]});
  }
  std::sort(greedy.begin(), greedy.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.size() > y.size(); });
  std::vector<std::vector<std::pair<int, int>>> out{greedy};
  for (auto& p : all) {
    auto q = p;
    std::sort(q.begin(), q.end());
    if (q != greedy) out.push_back(std::move(q));
  }
  return out;
}

/// Fits every pairing (up to the cap) to the observed counts and ranks them
/// by Pearson P-value. The step-1 structure constrains each fit.
inline AssignmentResult assign_conjugation(const std::vector<ReducedMode>& signal_modes,
                                           const std::vector<ReducedMode>& idler_modes, const CountMatrix& observed,
                                           const SelectionConfig& cfg) {
  AssignmentResult out;
  const auto pairings = enumerate_pairings(signal_modes, idler_modes);
  out.enumerated = pairings.size();
  const std::size_t cap = static_cast<std::size_t>(std::max(1, cfg.assignment_cap));
  if (pairings.size() > cap) {
    out.truncated = true;
    out.notes.push_back("assignment enumeration truncated: " + std::to_string(pairings.size()) +
                        " pairings, cap " + std::to_string(cap));
  }
  const ArmStructure target{signal_modes, idler_modes};
  const FitData data = fit_data(observed, cfg.fit.weighting);
  for (std::size_t k = 0; k < std::min(cap, pairings.size()); ++k) {
    Assignment a;
    a.pairs = pairings[k];
    a.label = pairing_label(signal_modes, idler_modes, a.pairs);
    a.start = assignment_start(signal_modes, idler_modes, a.pairs, observed.n_max());
    FitConfig fc = cfg.fit;
    fc.seed = derive_seed(cfg.fit.seed, k);
    if (a.start.modes.empty()) {
      a.fit.model = a.start;
      a.fit.score = detail::objective_value(data, detail::jpd_predictor()(a.start));
      a.fit.converged = true;
      detail::attach_pearson(a.fit, data, detail::jpd_predictor());
    } else {
      a.fit = fit_jpd(data, a.start, &target, fc);
    }
    out.ranking.push_back(std::move(a));
  }
  std::stable_sort(out.ranking.begin(), out.ranking.end(), [](const Assignment& x, const Assignment& y) {
    const double px = std::isnan(x.fit.p_value) ? -1.0 : x.fit.p_value;
    const double py = std::isnan(y.fit.p_value) ? -1.0 : y.fit.p_value;
    if (px != py) return px > py;
    return x.fit.score < y.fit.score;
  });
  return out;
}

/// Mode types visible in one arm of a model (conjugated modes and that arm's
/// background), in canonical order.
inline std::vector<ModeType> arm_types(const SourceModel& model, Arm arm) {
  SourceModel m = model;
  m.canonicalize();
  std::vector<ModeType> out;
  for (const auto& mode : m.modes)
    if (mode.occupancy == Occupancy::Conjugated || mode.occupancy == detail::arm_occupancy(arm))
      out.push_back(mode.type);
  std::stable_sort(out.begin(), out.end(), [](ModeType a, ModeType b) { return type_rank(a) < type_rank(b); });
  return out;
}

/// Starting model for a known template: per type, the brightest step-1
/// modes of each arm are taken as the template's conjugated modes (paired
/// in descending order), the rest as background.
inline SourceModel template_start(const SourceModel& templ, const ArmStructure& step1, int n_max) {
  std::vector<std::pair<int, int>> pairs;
  for (ModeType t : {ModeType::Thermal, ModeType::Poissonian, ModeType::SinglePhoton}) {
    const int conj = static_cast<int>(std::count_if(templ.modes.begin(), templ.modes.end(), [&](const ModeSpec& m) {
      return m.type == t && m.occupancy == Occupancy::Conjugated;
    }));
    auto ranked = [&](const std::vector<ReducedMode>& v) {
      std::vector<int> idx;
      for (std::size_t j = 0; j < v.size(); ++j)
        if (v[j].type == t) idx.push_back(static_cast<int>(j));
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return v[static_cast<std::size_t>(a)].mu > v[static_cast<std::size_t>(b)].mu;
      });
      return idx;
    };
    const auto a = ranked(step1.signal);
    const auto b = ranked(step1.idler);
    for (int j = 0; j < conj && j < static_cast<int>(std::min(a.size(), b.size())); ++j)
      pairs.push_back({a[static_cast<std::size_t>(j)], b[static_cast<std::size_t>(j)]});
  }
  return assignment_start(step1.signal, step1.idler, pairs, n_max);
}

struct TwoStepResult {
  FitResult fit;
  /// Step-1 structures of the last pass (truncation-corrected after pass 0).
  ArmStructure step1;
  int passes = 0;
};

/// Largest relative change of any mean or transmittance between two fits of
/// the same template (both canonical).
inline double model_change(const SourceModel& a, const SourceModel& b) {
  if (a.modes.size() != b.modes.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  auto rel = [](double x, double y) { return std::abs(x - y) / std::max(std::abs(y), 1e-12); };
  for (std::size_t j = 0; j < a.modes.size(); ++j) {
    worst = std::max(worst, rel(a.modes[j].mu, b.modes[j].mu));
    if (a.modes[j].occupancy == Occupancy::Conjugated)
      worst = std::max({worst, rel(a.modes[j].eta_s, b.modes[j].eta_s), rel(a.modes[j].eta_i, b.modes[j].eta_i)});
  }
  return worst;
}

/// Largest change of a fitted parameter since `previous`, in units of the
/// parameter's standard error; infinite without standard errors. Parameters
/// the data do not constrain (infinite error) are skipped.
inline double change_in_sigmas(const FitResult& next, const SourceModel& previous) {
  if (next.std_errors.size() != next.params.size() || next.model.modes.size() != previous.modes.size())
    return std::numeric_limits<double>::infinity();
  auto first_conjugated = [&]() -> const ModeSpec* {
    for (const auto& m : previous.modes)
      if (m.occupancy == Occupancy::Conjugated) return &m;
    return nullptr;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < next.params.size(); ++k) {
    const ParamEntry& e = next.params.entries[k];
    const double sd = next.std_errors[k];
    if (!(sd > 0.0) || std::isnan(sd)) return std::numeric_limits<double>::infinity();
    if (std::isinf(sd)) continue;
    const ModeSpec* m = e.mode >= 0 ? &previous.modes[static_cast<std::size_t>(e.mode)] : first_conjugated();
    if (m == nullptr) return std::numeric_limits<double>::infinity();
    const double before = e.role == ParamRole::ModeMu ? m->mu : (e.role == ParamRole::EtaSignal ? m->eta_s : m->eta_i);
    worst = std::max(worst, std::abs(e.value - before) / sd);
  }
  return worst;
}

/// Two-step reconstruction with a known template. Pass 0 fits the observed
/// RPDs, then the JPD. Each further pass divides the RPDs by the truncation
/// keep fractions of the current JPD fit, refits them, and refits the JPD
/// from the previous solution; passes stop once the model changes by less
/// than `tol` (relative), for counts also once no parameter moves by more
/// than `noise_fraction` of its standard error, or after
/// `max_correction_passes`.
template <typename Observed>
TwoStepResult two_step_with_template(const Observed& observed, const SourceModel& templ, const FitConfig& cfg,
                                     int max_correction_passes = 3, double tol = 1e-5, double noise_fraction = 0.1) {
  TwoStepResult out;
  const Rpd raw_s = marginalize(observed, Arm::Signal);
  const Rpd raw_i = marginalize(observed, Arm::Idler);
  const auto ts = arm_types(templ, Arm::Signal);
  const auto ti = arm_types(templ, Arm::Idler);
  FitConfig fc = cfg;
  auto step1 = [&](const Rpd& s, const Rpd& i, std::uint64_t tag) {
    ArmStructure st;
    fc.seed = derive_seed(cfg.seed, tag);
    if (!ts.empty()) st.signal = reduced_modes(fit_rpd(s, ts, fc));
    fc.seed = derive_seed(cfg.seed, tag + 1);
    if (!ti.empty()) st.idler = reduced_modes(fit_rpd(i, ti, fc));
    return st;
  };
  out.step1 = step1(raw_s, raw_i, 0);
  SourceModel start = template_start(templ, out.step1, observed.n_max());
  fc.seed = derive_seed(cfg.seed, 2);
  out.fit = fit_jpd(observed, start, &out.step1, fc);
  out.passes = 1;
  for (int pass = 1; pass <= max_correction_passes; ++pass) {
    const Rpd cs = correct_truncation(raw_s, truncation_keep_fraction(out.fit.model, Arm::Signal));
    const Rpd ci = correct_truncation(raw_i, truncation_keep_fraction(out.fit.model, Arm::Idler));
    out.step1 = step1(cs, ci, 3ULL * static_cast<std::uint64_t>(pass));
    fc.seed = derive_seed(cfg.seed, 3ULL * static_cast<std::uint64_t>(pass) + 2);
    FitResult next = fit_jpd(observed, out.fit.model, &out.step1, fc);
    const double change = model_change(next.model, out.fit.model);
    bool within_noise = false;
    if constexpr (std::is_same_v<Observed, CountMatrix>)
      within_noise = change_in_sigmas(next, out.fit.model) < noise_fraction;
    out.fit = std::move(next);
    ++out.passes;
    if (change < tol || within_noise) break;
  }
  return out;
}

} // namespace modestruct
