#pragma once

// End-to-end reconstruction: counts -> RPDs -> per-arm structure -> pruning
// -> conjugation assignment -> constrained JPD fit -> diagnostics.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "modestruct/diagnostics.hpp"
#include "modestruct/io.hpp"
#include "modestruct/model_selection.hpp"

namespace modestruct {

struct PipelineConfig {
  SelectionConfig selection = [] {
    SelectionConfig s;
    s.fit.shared_losses = true;
    return s;
  }();
  /// Truncation-correction passes after the first reconstruction.
  int max_correction_passes = 3;
  double correction_tol = 1e-5;
  /// Passes also stop once no parameter moves by more than this fraction of
  /// its standard error.
  double correction_noise_fraction = 0.1;
  int bootstrap_resamples = 50;
  std::uint64_t seed = 0;
};

struct StageRecord {
  std::string name;
  bool ok = true;
  std::string message;
};

struct AssignmentSummary {
  std::string label;
  std::vector<std::pair<int, int>> pairs;
  double p_value = std::numeric_limits<double>::quiet_NaN();
  double score = 0.0;
  bool converged = false;
  SourceModel model;
};

struct PassRecord {
  int pass = 0;
  /// Pass 0 uses the measured RPDs, later passes the truncation-corrected ones.
  Rpd signal_rpd;
  Rpd idler_rpd;
  StructureResult signal;
  StructureResult idler;
  std::vector<ReducedMode> kept_signal, kept_idler;
  std::vector<ReducedMode> dropped_signal, dropped_idler;
  std::vector<AssignmentSummary> ranking;
  bool ranking_truncated = false;
  /// True when the structure matched the previous pass and only the chosen
  /// assignment was refitted.
  bool refit_only = false;
  std::string chosen;
  FitResult fit;
  double change = std::numeric_limits<double>::infinity();
  double change_sigmas = std::numeric_limits<double>::infinity();
};

struct ReconstructionReport {
  int n_max = 0;
  std::uint64_t n_tot = 0;
  std::uint64_t in_range = 0;
  double overflow_fraction = 0.0;

  std::vector<PassRecord> passes;
  SourceModel model;
  FitResult fit;
  std::string assignment;
  HilleryResult hillery_measured;
  HilleryResult hillery_lossless;
  LosslessProjection lossless;
  PipelineConfig config;
  std::vector<StageRecord> stages;
  std::vector<std::string> warnings;

  bool complete() const {
    for (const auto& s : stages)
      if (!s.ok) return false;
    return true;
  }
};

namespace detail {

inline std::vector<ModeType> sorted_types(const std::vector<ReducedMode>& modes) {
  std::vector<ModeType> t;
  for (const auto& m : modes) t.push_back(m.type);
  std::sort(t.begin(), t.end(), [](ModeType a, ModeType b) { return type_rank(a) < type_rank(b); });
  return t;
}

inline bool vacuum_counts(const CountMatrix& c) { return c.in_range() == c(0, 0); }

} // namespace detail

/// Runs the reconstruction. Every stage is recorded; a failing stage leaves
/// the report incomplete but still returned. If run_dir is non-empty the
/// intermediate artifacts and the report are written there.
inline ReconstructionReport reconstruct(const CountMatrix& observed, const PipelineConfig& cfg,
                                        const std::string& run_dir = "");

// ---------------------------------------------------------------- JSON

namespace detail {

inline Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json optimizer_to_json(const OptimizerConfig& o) {
  Json j;
  j["diameter_tol"] = o.diameter_tol;
  j["score_tol"] = o.score_tol;
  j["max_evaluations"] = o.max_evaluations;
  j["restarts"] = o.restarts;
  j["initial_step"] = o.initial_step;
  j["lhs_half_width"] = o.lhs_half_width;
  j["threads"] = o.threads;
  return j;
}

inline Json reduced_to_json(const std::vector<ReducedMode>& modes) {
  Json a = Json::array();
  for (const auto& m : modes) {
    Json e;
    e["type"] = std::string(to_string(m.type));
    e["mu"] = m.mu;
    e["sigma"] = number_or_null(m.sigma);
    a.push_back(e);
  }
  return a;
}

inline Json pairs_to_json(const std::vector<std::pair<int, int>>& pairs) {
  Json a = Json::array();
  for (auto [s, i] : pairs) a.push_back(Json::array({s, i}));
  return a;
}

inline Json hillery_to_json(const HilleryResult& h) {
  Json j;
  j["even_sum"] = h.even_sum;
  j["odd_sum"] = h.odd_sum;
  j["even_sigma"] = h.even_sigma;
  j["odd_sigma"] = h.odd_sigma;
  j["significance"] = number_or_null(h.significance);
  j["vacuum"] = h.vacuum;
  j["tail_mass"] = h.tail_mass;
  j["even_normalized"] = h.even_normalized;
  j["odd_normalized"] = h.odd_normalized;
  j["even_normalized_sigma"] = h.even_normalized_sigma;
  j["odd_normalized_sigma"] = h.odd_normalized_sigma;
  j["significance_normalized"] = number_or_null(h.significance_normalized);
  j["classical_side"] = h.classical();
  j["sigma_method"] = h.sigma_method;
  j["significance_formula"] = "(even - odd) / sqrt(even_sigma^2 + odd_sigma^2)";
  return j;
}

} // namespace detail

inline Json fit_to_json(const FitResult& f) {
  Json j;
  j["model"] = model_to_json(f.model);
  j["score"] = detail::number_or_null(f.score);
  j["penalty"] = f.penalty;
  j["p_value"] = detail::number_or_null(f.p_value);
  j["pearson"] = {{"chi2", detail::number_or_null(f.pearson.chi2)},
                  {"bins", f.pearson.bins},
                  {"dof", f.pearson.dof},
                  {"defined", f.pearson.defined}};
  j["converged"] = f.converged;
  j["restarts_used"] = f.restarts_used;
  j["best_restart"] = f.best_restart;
  j["best_restart_seed"] = f.best_restart_seed;
  Json scores = Json::array();
  for (double s : f.restart_scores) scores.push_back(detail::number_or_null(s));
  j["restart_scores"] = scores;
  j["worse_restarts"] = f.worse_restarts;
  j["restarts_disagree"] = f.restarts_disagree;
  j["evaluations"] = f.evaluations;
  Json params = Json::array();
  for (std::size_t k = 0; k < f.params.size(); ++k) {
    const auto& e = f.params.entries[k];
    params.push_back({{"role", std::string(to_string(e.role))},
                      {"mode", e.mode},
                      {"value", e.value},
                      {"std_error", detail::number_or_null(k < f.std_errors.size() ? f.std_errors[k]
                                                                                    : std::numeric_limits<double>::quiet_NaN())}});
  }
  j["parameters"] = params;
  j["notes"] = f.notes;
  return j;
}

inline Json config_to_json(const PipelineConfig& c) {
  const SelectionConfig& s = c.selection;
  Json j;
  j["seed"] = c.seed;
  j["optimizer"] = detail::optimizer_to_json(s.fit.optimizer);
  j["weighting"] = std::string(to_string(s.fit.weighting));
  j["penalty_weight"] = s.fit.penalty_weight;
  j["shared_losses"] = s.fit.shared_losses;
  j["nominal_n_tot"] = s.fit.nominal_n_tot;
  j["prune_threshold"] = s.prune_threshold;
  j["assignment_cap"] = s.assignment_cap;
  Json types = Json::array();
  for (ModeType t : s.candidate_types) types.push_back(std::string(to_string(t)));
  j["candidate_types"] = types;
  j["max_modes"] = s.max_modes;
  j["min_improvement"] = s.min_improvement;
  j["sigma_threshold"] = s.sigma_threshold;
  j["ambiguity_tol"] = s.ambiguity_tol;
  j["equal_population_tol"] = s.equal_population_tol;
  j["max_correction_passes"] = c.max_correction_passes;
  j["correction_tol"] = c.correction_tol;
  j["correction_noise_fraction"] = c.correction_noise_fraction;
  j["bootstrap_resamples"] = c.bootstrap_resamples;
  return j;
}

/// Missing fields keep their defaults; unknown fields are errors.
inline PipelineConfig config_from_json(const Json& j, const std::string& source = "config") {
  const detail::JsonReader r(source);
  r.only_keys(j,
              {"seed", "optimizer", "weighting", "penalty_weight", "shared_losses", "nominal_n_tot", "prune_threshold",
               "assignment_cap", "candidate_types", "max_modes", "min_improvement", "sigma_threshold", "ambiguity_tol",
               "equal_population_tol", "max_correction_passes", "correction_tol", "correction_noise_fraction",
               "bootstrap_resamples"},
              "");
  PipelineConfig c;
  SelectionConfig& s = c.selection;
  auto num = [&](const char* key, double& dst, double lo, double hi) {
    if (!j.contains(key)) return;
    const double v = r.number(j[key], key);
    if (!(v >= lo && v <= hi)) r.fail(key, "out of range [" + format_double(lo) + ", " + format_double(hi) + "]");
    dst = v;
  };
  auto integer = [&](const Json& obj, const char* key, const std::string& path, auto& dst, long long lo, long long hi) {
    if (!obj.contains(key)) return;
    const long long v = r.integer(obj[key], path);
    if (v < lo || v > hi) r.fail(path, "out of range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    dst = static_cast<std::remove_reference_t<decltype(dst)>>(v);
  };
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned() && !(j["seed"].is_number_integer() && j["seed"].get<long long>() >= 0))
      r.fail("seed", "expected a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("optimizer")) {
    const Json& o = j["optimizer"];
    r.only_keys(o, {"diameter_tol", "score_tol", "max_evaluations", "restarts", "initial_step", "lhs_half_width", "threads"},
                "optimizer");
    auto onum = [&](const char* key, double& dst) {
      if (!o.contains(key)) return;
      const double v = r.number(o[key], std::string("optimizer.") + key);
      if (!(v > 0.0)) r.fail(std::string("optimizer.") + key, "must be positive");
      dst = v;
    };
    onum("diameter_tol", s.fit.optimizer.diameter_tol);
    onum("score_tol", s.fit.optimizer.score_tol);
    onum("initial_step", s.fit.optimizer.initial_step);
    onum("lhs_half_width", s.fit.optimizer.lhs_half_width);
    integer(o, "max_evaluations", "optimizer.max_evaluations", s.fit.optimizer.max_evaluations, 1, 1000000000);
    integer(o, "restarts", "optimizer.restarts", s.fit.optimizer.restarts, 1, 100000);
    integer(o, "threads", "optimizer.threads", s.fit.optimizer.threads, 1, 4096);
  }
  if (j.contains("weighting")) {
    try {
      s.fit.weighting = weighting_from_string(r.string(j["weighting"], "weighting"));
    } catch (const std::invalid_argument& e) {
      r.fail("weighting", e.what());
    }
  }
  num("penalty_weight", s.fit.penalty_weight, 0.0, 1e12);
  if (j.contains("shared_losses")) s.fit.shared_losses = r.boolean(j["shared_losses"], "shared_losses");
  num("nominal_n_tot", s.fit.nominal_n_tot, 1.0, 1e18);
  num("prune_threshold", s.prune_threshold, 1e-12, 1.0 - 1e-12);
  integer(j, "assignment_cap", "assignment_cap", s.assignment_cap, 1, 1000000);
  if (j.contains("candidate_types")) {
    const Json& a = j["candidate_types"];
    if (!a.is_array() || a.empty()) r.fail("candidate_types", "expected a non-empty array of mode types");
    s.candidate_types.clear();
    for (std::size_t k = 0; k < a.size(); ++k) {
      const std::string path = "candidate_types[" + std::to_string(k) + "]";
      try {
        s.candidate_types.push_back(mode_type_from_string(r.string(a[k], path)));
      } catch (const DomainError& e) {
        r.fail(path, e.what());
      }
    }
  }
  integer(j, "max_modes", "max_modes", s.max_modes, 1, 64);
  num("min_improvement", s.min_improvement, 0.0, 1e12);
  num("sigma_threshold", s.sigma_threshold, 0.0, 1e6);
  num("ambiguity_tol", s.ambiguity_tol, 0.0, 1e12);
  num("equal_population_tol", s.equal_population_tol, 0.0, 1.0);
  integer(j, "max_correction_passes", "max_correction_passes", c.max_correction_passes, 0, 100);
  num("correction_tol", c.correction_tol, 0.0, 1.0);
  num("correction_noise_fraction", c.correction_noise_fraction, 0.0, 1e6);
  integer(j, "bootstrap_resamples", "bootstrap_resamples", c.bootstrap_resamples, 0, 1000000);
  return c;
}

inline PipelineConfig read_config_json(const std::string& path) { return config_from_json(read_json(path), path); }

inline Json report_to_json(const ReconstructionReport& r) {
  Json j;
  j["status"] = r.complete() ? "complete" : "partial";
  j["input"] = {{"n_max", r.n_max},
                {"n_tot", r.n_tot},
                {"in_range", r.in_range},
                {"overflow_fraction", r.overflow_fraction}};
  Json stages = Json::array();
  for (const auto& s : r.stages) stages.push_back({{"name", s.name}, {"ok", s.ok}, {"message", s.message}});
  j["stages"] = stages;
  j["warnings"] = r.warnings;
  Json passes = Json::array();
  for (const auto& p : r.passes) {
    Json pj;
    pj["pass"] = p.pass;
    pj["rpd_source"] = p.pass == 0 ? "measured" : "truncation corrected";
    for (const auto* st : {&p.signal, &p.idler}) {
      Json sj;
      sj["modes"] = detail::reduced_to_json(st->modes);
      sj["ambiguous"] = st->ambiguous;
      sj["notes"] = st->notes;
      Json tried = Json::array();
      for (const auto& c : st->tried)
        tried.push_back({{"move", c.move},
                         {"structure", describe(c.types)},
                         {"modes", detail::reduced_to_json(c.modes)},
                         {"score", detail::number_or_null(c.score)},
                         {"p_value", detail::number_or_null(c.p_value)},
                         {"converged", c.converged},
                         {"accepted", c.accepted}});
      sj["candidates"] = tried;
      pj[st == &p.signal ? "signal_structure" : "idler_structure"] = sj;
    }
    pj["kept_signal"] = detail::reduced_to_json(p.kept_signal);
    pj["kept_idler"] = detail::reduced_to_json(p.kept_idler);
    pj["pruned_signal"] = detail::reduced_to_json(p.dropped_signal);
    pj["pruned_idler"] = detail::reduced_to_json(p.dropped_idler);
    Json ranking = Json::array();
    for (const auto& a : p.ranking)
      ranking.push_back({{"label", a.label},
                         {"pairs", detail::pairs_to_json(a.pairs)},
                         {"p_value", detail::number_or_null(a.p_value)},
                         {"score", detail::number_or_null(a.score)},
                         {"converged", a.converged},
                         {"model", model_to_json(a.model)}});
    pj["assignment_ranking"] = ranking;
    pj["ranking_truncated"] = p.ranking_truncated;
    pj["refit_only"] = p.refit_only;
    pj["chosen"] = p.chosen;
    pj["fit"] = fit_to_json(p.fit);
    pj["model_change"] = detail::number_or_null(p.change);
    pj["model_change_sigmas"] = detail::number_or_null(p.change_sigmas);
    passes.push_back(pj);
  }
  j["passes"] = passes;
  j["assignment"] = r.assignment;
  j["model"] = model_to_json(r.model);
  j["fit"] = fit_to_json(r.fit);
  j["hillery_measured"] = detail::hillery_to_json(r.hillery_measured);
  j["hillery_lossless"] = detail::hillery_to_json(r.hillery_lossless);
  j["lossless_projection"] = {{"eta_s", r.lossless.eta_s},
                              {"eta_i", r.lossless.eta_i},
                              {"model", model_to_json(r.lossless.model)},
                              {"notes", r.lossless.notes}};
  j["config"] = config_to_json(r.config);
  return j;
}

// ---------------------------------------------------------------- tables

inline Table rpd_table(const std::vector<PassRecord>& passes) {
  Table t;
  t.columns = {"pass", "arm", "n", "probability", "uncertainty", "count"};
  for (const auto& p : passes)
    for (const Rpd* r : {&p.signal_rpd, &p.idler_rpd})
      for (std::size_t n = 0; n < r->probs.size(); ++n)
        t.add({std::int64_t{p.pass}, std::string(to_string(r->arm)), static_cast<std::int64_t>(n), r->probs[n],
               n < r->uncertainties.size() ? r->uncertainties[n] : 0.0,
               static_cast<std::int64_t>(n < r->counts.size() ? r->counts[n] : 0)});
  return t;
}

inline Table candidates_table(const std::vector<PassRecord>& passes) {
  Table t;
  t.columns = {"pass", "arm", "step", "move", "structure", "score", "p_value", "accepted"};
  for (const auto& p : passes)
    for (const StructureResult* s : {&p.signal, &p.idler})
      for (std::size_t k = 0; k < s->tried.size(); ++k) {
        const auto& c = s->tried[k];
        t.add({std::int64_t{p.pass}, std::string(to_string(s->arm)), static_cast<std::int64_t>(k), c.move,
               describe(c.types), c.score, c.p_value, std::int64_t{c.accepted ? 1 : 0}});
      }
  return t;
}

inline Table assignments_table(const std::vector<PassRecord>& passes) {
  Table t;
  t.columns = {"pass", "rank", "label", "p_value", "score", "converged"};
  for (const auto& p : passes)
    for (std::size_t k = 0; k < p.ranking.size(); ++k)
      t.add({std::int64_t{p.pass}, static_cast<std::int64_t>(k), p.ranking[k].label, p.ranking[k].p_value,
             p.ranking[k].score, std::int64_t{p.ranking[k].converged ? 1 : 0}});
  return t;
}

/// Observed and fitted JPD side by side, one row per cell.
inline Table jpd_table(const CountMatrix& observed, const SourceModel& model) {
  Table t;
  t.columns = {"n_s", "n_i", "observed_count", "observed_probability", "model_probability"};
  const ProbMatrix f = full_jpd([&] {
    SourceModel m = model;
    m.n_max = observed.n_max();
    return m;
  }());
  const double n = static_cast<double>(observed.n_tot);
  for (int s = 0; s <= observed.n_max(); ++s)
    for (int i = 0; i <= observed.n_max(); ++i)
      t.add({std::int64_t{s}, std::int64_t{i}, static_cast<std::int64_t>(observed(s, i)),
             static_cast<double>(observed(s, i)) / n, f(s, i)});
  return t;
}

inline Table model_table(const SourceModel& model) {
  Table t;
  t.columns = {"mode", "type", "occupancy", "mu", "eta_s", "eta_i"};
  for (std::size_t k = 0; k < model.modes.size(); ++k) {
    const auto& m = model.modes[k];
    t.add({static_cast<std::int64_t>(k), std::string(to_string(m.type)), std::string(to_string(m.occupancy)), m.mu,
           m.eta_s, m.eta_i});
  }
  return t;
}

// ---------------------------------------------------------------- reconstruct

namespace detail {

inline std::vector<AssignmentSummary> summarize(const AssignmentResult& a) {
  std::vector<AssignmentSummary> out;
  for (const auto& x : a.ranking)
    out.push_back({x.label, x.pairs, x.fit.p_value, x.fit.score, x.fit.converged, x.fit.model});
  return out;
}

inline void write_run_dir(const std::string& dir, const CountMatrix& observed, const ReconstructionReport& r) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  write_table_csv((d / "rpd.csv").string(), rpd_table(r.passes));
  write_table_csv((d / "structure_candidates.csv").string(), candidates_table(r.passes));
  write_table_csv((d / "assignments.csv").string(), assignments_table(r.passes));
  write_table_csv((d / "model.csv").string(), model_table(r.model));
  write_table_csv((d / "jpd.csv").string(), jpd_table(observed, r.model));
  write_json((d / "model.json").string(), model_to_json(r.model));
  write_json((d / "report.json").string(), report_to_json(r));
}

} // namespace detail

inline ReconstructionReport reconstruct(const CountMatrix& observed, const PipelineConfig& cfg,
                                        const std::string& run_dir) {
  if (observed.n_tot < 1) throw std::invalid_argument("reconstruct needs n_tot >= 1");
  if (observed.in_range() > observed.n_tot) throw std::invalid_argument("counts exceed n_tot");
  ReconstructionReport rep;
  rep.config = cfg;
  rep.n_max = observed.n_max();
  rep.n_tot = observed.n_tot;
  rep.in_range = observed.in_range();
  rep.overflow_fraction = static_cast<double>(observed.overflow()) / static_cast<double>(observed.n_tot);
  rep.model.n_max = observed.n_max();
  rep.fit.model = rep.model;

  auto stage = [&](const std::string& name, auto&& body) {
    StageRecord s{name, true, ""};
    try {
      body(s);
    } catch (const std::exception& e) {
      s.ok = false;
      s.message = e.what();
    }
    rep.stages.push_back(s);
    return s.ok;
  };

  if (!stage("input", [&](StageRecord& s) {
        if (rep.in_range == 0) throw std::runtime_error("no events inside the detection square");
        s.message = "overflow fraction " + format_double(rep.overflow_fraction);
      })) {
    if (!run_dir.empty()) detail::write_run_dir(run_dir, observed, rep);
    return rep;
  }

  if (detail::vacuum_counts(observed)) {
    stage("vacuum", [&](StageRecord& s) { s.message = "all in-range events in the vacuum cell: empty mode list"; });
    rep.hillery_measured = hillery(observed);
    rep.hillery_lossless = hillery(lossless_jpd(rep.model));
    rep.lossless = lossless_projection(rep.model);
    rep.fit.converged = true;
    if (!run_dir.empty()) detail::write_run_dir(run_dir, observed, rep);
    return rep;
  }

  const Rpd raw_s = marginalize(observed, Arm::Signal);
  const Rpd raw_i = marginalize(observed, Arm::Idler);
  SelectionConfig sel = cfg.selection;
  bool have_fit = false;
  std::vector<std::pair<int, int>> chosen_pairs;

  for (int pass = 0; pass <= cfg.max_correction_passes; ++pass) {
    PassRecord pr;
    pr.pass = pass;
    const std::string tag = "pass " + std::to_string(pass);
    const bool step1_ok = stage(tag + " step 1", [&](StageRecord& s) {
      if (pass == 0) {
        pr.signal_rpd = raw_s;
        pr.idler_rpd = raw_i;
      } else {
        pr.signal_rpd = correct_truncation(raw_s, truncation_keep_fraction(rep.fit.model, Arm::Signal));
        pr.idler_rpd = correct_truncation(raw_i, truncation_keep_fraction(rep.fit.model, Arm::Idler));
      }
      sel.fit.seed = derive_seed(cfg.seed, 100 + 10 * static_cast<std::uint64_t>(pass));
      pr.signal = detect_structure(pr.signal_rpd, sel);
      sel.fit.seed = derive_seed(cfg.seed, 101 + 10 * static_cast<std::uint64_t>(pass));
      pr.idler = detect_structure(pr.idler_rpd, sel);
      pr.kept_signal = prune_modes(pr.signal.modes, sel.prune_threshold, &pr.dropped_signal);
      pr.kept_idler = prune_modes(pr.idler.modes, sel.prune_threshold, &pr.dropped_idler);
      for (const auto* st : {&pr.signal, &pr.idler})
        if (st->ambiguous)
          rep.warnings.push_back(tag + ": " + std::string(to_string(st->arm)) + " structure ambiguous");
      s.message = "signal " + describe(detail::sorted_types(pr.kept_signal)) + ", idler " +
                  describe(detail::sorted_types(pr.kept_idler)) + " after pruning";
    });
    if (!step1_ok) break;

    const bool same_structure = have_fit && !rep.passes.empty() &&
                                detail::sorted_types(pr.kept_signal) == detail::sorted_types(rep.passes.back().kept_signal) &&
                                detail::sorted_types(pr.kept_idler) == detail::sorted_types(rep.passes.back().kept_idler);
    const bool step2_ok = stage(tag + " step 2", [&](StageRecord& s) {
      sel.fit.seed = derive_seed(cfg.seed, 102 + 10 * static_cast<std::uint64_t>(pass));
      const ArmStructure target{pr.kept_signal, pr.kept_idler};
      if (pr.kept_signal.empty() && pr.kept_idler.empty()) {
        pr.fit = FitResult{};
        pr.fit.model.n_max = observed.n_max();
        pr.fit.converged = true;
        pr.chosen = "no modes";
      } else if (same_structure) {
        pr.refit_only = true;
        pr.fit = fit_jpd(observed, rep.fit.model, &target, sel.fit);
        pr.chosen = rep.assignment;
        pr.ranking.push_back({pr.chosen, chosen_pairs, pr.fit.p_value, pr.fit.score, pr.fit.converged, pr.fit.model});
      } else {
        const AssignmentResult a = assign_conjugation(pr.kept_signal, pr.kept_idler, observed, sel);
        pr.ranking = detail::summarize(a);
        pr.ranking_truncated = a.truncated;
        for (const auto& n : a.notes) rep.warnings.push_back(tag + ": " + n);
        pr.fit = a.best().fit;
        pr.chosen = a.best().label;
        chosen_pairs = a.best().pairs;
        if (a.ranking.size() > 1) {
          const double p0 = a.ranking[0].fit.p_value, p1 = a.ranking[1].fit.p_value;
          if (std::isfinite(p0) && std::isfinite(p1) && p0 > 0.01 && p1 > 0.01)
            rep.warnings.push_back(tag + ": assignments '" + a.ranking[0].label + "' and '" + a.ranking[1].label +
                                   "' both acceptable (P > 0.01)");
        }
      }
      s.message = pr.chosen + ", P = " + format_double(pr.fit.p_value);
    });
    if (!step2_ok) break;
    if (have_fit) {
      pr.change = model_change(pr.fit.model, rep.fit.model);
      pr.change_sigmas = change_in_sigmas(pr.fit, rep.fit.model);
    }
    rep.fit = pr.fit;
    rep.assignment = pr.chosen;
    have_fit = true;
    const bool settled = pr.change < cfg.correction_tol || pr.change_sigmas < cfg.correction_noise_fraction;
    rep.passes.push_back(std::move(pr));
    if (pass > 0 && settled) break;
    if (rep.fit.model.modes.empty()) break;
  }
  rep.model = rep.fit.model;

  stage("final fit", [&](StageRecord& s) {
    if (!have_fit) throw std::runtime_error("no JPD fit available");
    if (!rep.fit.converged && !rep.fit.model.modes.empty()) throw std::runtime_error("final fit did not converge");
    if (rep.fit.restarts_disagree)
      rep.warnings.push_back("final fit: " + std::to_string(rep.fit.worse_restarts) +
                             " converged restarts ended at worse stationary points");
    s.message = "P = " + format_double(rep.fit.p_value);
  });
  stage("hillery", [&](StageRecord& s) {
    rep.hillery_measured = hillery(observed);
    rep.lossless = lossless_projection(rep.model);
    rep.hillery_lossless = hillery_bootstrap(rep.fit, cfg.bootstrap_resamples, derive_seed(cfg.seed, 900));
    s.message = "lossless even " + format_double(rep.hillery_lossless.even_normalized) + ", odd " +
                format_double(rep.hillery_lossless.odd_normalized) + " (normalized)";
  });
  if (!run_dir.empty()) detail::write_run_dir(run_dir, observed, rep);
  return rep;
}

} // namespace modestruct
