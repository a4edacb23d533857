// modestruct: simulate, reconstruct and diagnose two-arm photon-number data.
//
// Exit status: 0 success, 2 partial reconstruction (report written, some
// stage failed), 1 error.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "modestruct/pipeline.hpp"

using namespace modestruct;

namespace {

constexpr const char* kSeedEnv = "MODESTRUCT_SEED";

/// Flag, then config file, then MODESTRUCT_SEED, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const std::optional<std::uint64_t>& from_config) {
  if (flag) return *flag;
  if (from_config) return *from_config;
  if (const char* env = std::getenv(kSeedEnv)) {
    std::uint64_t v = 0;
    if (!detail::parse_uint(env, v)) throw std::invalid_argument(std::string(kSeedEnv) + " is not a non-negative integer");
    return v;
  }
  return 0;
}

struct Loaded {
  PipelineConfig config;
  std::optional<std::uint64_t> seed;
};

Loaded load_config(const std::string& path) {
  Loaded l;
  if (path.empty()) return l;
  const Json j = read_json(path);
  l.config = config_from_json(j, path);
  if (j.contains("seed")) l.seed = l.config.seed;
  return l;
}

int default_param_count(const SourceModel& m) {
  int k = static_cast<int>(m.modes.size());
  for (const auto& mode : m.modes)
    if (mode.occupancy == Occupancy::Conjugated) return k + 2;
  return k;
}

void print_reduced(std::ostream& out, const char* arm, const std::vector<ReducedMode>& modes) {
  out << "  " << arm << ":";
  if (modes.empty()) out << " none";
  for (const auto& m : modes) out << ' ' << to_string(m.type) << '(' << format_double(m.mu) << ')';
  out << '\n';
}

void print_summary(std::ostream& out, const ReconstructionReport& r) {
  out << "status: " << (r.complete() ? "complete" : "partial") << '\n';
  for (const auto& s : r.stages)
    out << "  [" << (s.ok ? "ok" : "FAILED") << "] " << s.name << (s.message.empty() ? "" : ": ") << s.message << '\n';
  if (!r.passes.empty()) {
    out << "structure after pruning (last pass):\n";
    print_reduced(out, "signal", r.passes.back().kept_signal);
    print_reduced(out, "idler", r.passes.back().kept_idler);
  }
  out << "model:\n";
  for (const auto& m : r.model.modes) {
    out << "  " << to_string(m.type) << ' ' << to_string(m.occupancy) << " mu=" << format_double(m.mu);
    if (m.occupancy == Occupancy::Conjugated) out << " eta_s=" << format_double(m.eta_s) << " eta_i=" << format_double(m.eta_i);
    out << '\n';
  }
  out << "Pearson P-value: " << format_double(r.fit.p_value) << '\n';
  out << "Hillery lossless (normalized): even " << format_double(r.hillery_lossless.even_normalized) << " +- "
      << format_double(r.hillery_lossless.even_normalized_sigma) << ", odd "
      << format_double(r.hillery_lossless.odd_normalized) << " +- "
      << format_double(r.hillery_lossless.odd_normalized_sigma) << '\n';
  for (const auto& w : r.warnings) out << "warning: " << w << '\n';
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mode-structure reconstruction of two-arm photon-number distributions"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed_flag;
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed_flag, std::string("Random seed (overrides config and ") + kSeedEnv + ")");
  };

  // simulate
  auto* sim = app.add_subcommand("simulate", "Sample a count matrix from a model file");
  std::string sim_model, sim_out, sim_exact;
  std::uint64_t sim_n = 1000000;
  sim->add_option("--model", sim_model, "Model JSON")->required()->check(CLI::ExistingFile);
  sim->add_option("--n-tot", sim_n, "Number of trials")->check(CLI::PositiveNumber);
  sim->add_option("--out", sim_out, "Counts CSV to write")->required();
  sim->add_option("--exact-out", sim_exact, "Also write the exact JPD as a tidy CSV");
  add_seed(sim);

  // reconstruct
  auto* rec = app.add_subcommand("reconstruct", "Reconstruct the mode structure from a count matrix");
  std::string rec_counts, rec_config, rec_dir;
  rec->add_option("--counts", rec_counts, "Counts CSV")->required()->check(CLI::ExistingFile);
  rec->add_option("--config", rec_config, "Config JSON")->check(CLI::ExistingFile);
  rec->add_option("--out-dir", rec_dir, "Run directory for report.json, model.json and plot tables")->required();
  add_seed(rec);

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Stand-alone diagnostics");
  diag->require_subcommand(1);
  auto* hil = diag->add_subcommand("hillery", "Hillery parity sums of counts or of a model");
  std::string hil_counts, hil_model;
  bool hil_lossless = false;
  double hil_nominal = 0.0;
  auto* hil_c = hil->add_option("--counts", hil_counts, "Counts CSV")->check(CLI::ExistingFile);
  auto* hil_m = hil->add_option("--model", hil_model, "Model JSON")->check(CLI::ExistingFile);
  hil_c->excludes(hil_m);
  hil->add_flag("--lossless", hil_lossless, "Use the lossless back-projection of the model");
  hil->add_option("--nominal-n-tot", hil_nominal, "Binomial sigmas for a measurement of this size (model input)");

  auto* pv = diag->add_subcommand("pvalue", "Pearson chi-squared P-value of counts against a model");
  std::string pv_counts, pv_model;
  std::optional<int> pv_params;
  pv->add_option("--counts", pv_counts, "Counts CSV")->required()->check(CLI::ExistingFile);
  pv->add_option("--model", pv_model, "Model JSON")->required()->check(CLI::ExistingFile);
  pv->add_option("--n-params", pv_params,
                 "Fitted parameter count (default: one per mode, plus two arm losses if any mode is conjugated)");

  auto* marg = diag->add_subcommand("marginals", "Reduced (single-arm) distributions of a count matrix");
  std::string marg_counts, marg_out;
  marg->add_option("--counts", marg_counts, "Counts CSV")->required()->check(CLI::ExistingFile);
  marg->add_option("--out", marg_out, "Tidy CSV to write (stdout if omitted)");

  // uncertainty
  auto* unc = app.add_subcommand("uncertainty", "Monte-Carlo reconstruction error versus number of trials");
  std::string unc_model, unc_config, unc_out, unc_errors;
  std::vector<std::uint64_t> unc_n{10000, 100000, 1000000};
  int unc_repeats = 20;
  unsigned unc_threads = 1;
  unc->add_option("--model", unc_model, "Model JSON")->required()->check(CLI::ExistingFile);
  unc->add_option("--n-tot", unc_n, "Trial counts (0 = noiseless)")->delimiter(',');
  unc->add_option("--repeats", unc_repeats, "Simulations per trial count")->check(CLI::Range(2, 1000000));
  unc->add_option("--threads", unc_threads, "Worker threads")->check(CLI::Range(1u, 4096u));
  unc->add_option("--config", unc_config, "Config JSON (fit settings)")->check(CLI::ExistingFile);
  unc->add_option("--out", unc_out, "Summary CSV to write")->required();
  unc->add_option("--errors-out", unc_errors, "Per-repeat error CSV");
  add_seed(unc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*sim) {
      SourceModel m = read_model_json(sim_model);
      const std::uint64_t seed = resolve_seed(seed_flag, std::nullopt);
      const ProbMatrix jpd = full_jpd(m);
      write_counts_csv(sim_out, sample_counts(jpd, sim_n, seed));
      if (!sim_exact.empty()) {
        Table t;
        t.columns = {"n_s", "n_i", "probability"};
        for (int s = 0; s <= jpd.n_max(); ++s)
          for (int i = 0; i <= jpd.n_max(); ++i) t.add({std::int64_t{s}, std::int64_t{i}, jpd(s, i)});
        write_table_csv(sim_exact, t);
      }
      std::cout << "wrote " << sim_out << " (n_tot=" << sim_n << ", seed=" << seed
                << ", tail mass=" << format_double(jpd.tail_mass) << ")\n";
      return 0;
    }
    if (*rec) {
      Loaded l = load_config(rec_config);
      l.config.seed = resolve_seed(seed_flag, l.seed);
      const CountMatrix counts = read_counts_csv(rec_counts);
      const ReconstructionReport r = reconstruct(counts, l.config, rec_dir);
      print_summary(std::cout, r);
      std::cout << "report: " << (std::filesystem::path(rec_dir) / "report.json").string() << '\n';
      return r.complete() ? 0 : 2;
    }
    if (*hil) {
      HilleryResult h;
      if (!hil_counts.empty()) {
        if (hil_lossless) throw std::invalid_argument("--lossless needs --model");
        h = hillery(read_counts_csv(hil_counts));
      } else if (!hil_model.empty()) {
        const SourceModel m = read_model_json(hil_model);
        h = hillery(hil_lossless ? lossless_jpd(m) : full_jpd(m), hil_nominal);
      } else {
        throw std::invalid_argument("hillery needs --counts or --model");
      }
      write_json(std::cout, detail::hillery_to_json(h));
      return 0;
    }
    if (*pv) {
      const CountMatrix counts = read_counts_csv(pv_counts);
      SourceModel m = read_model_json(pv_model);
      m.n_max = counts.n_max();
      const int k = pv_params.value_or(default_param_count(m));
      const PearsonResult r = pearson_pvalue(counts, full_jpd(m), k);
      Json j;
      j["chi2"] = detail::number_or_null(r.chi2);
      j["bins"] = r.bins;
      j["dof"] = r.dof;
      j["n_params"] = k;
      j["p_value"] = detail::number_or_null(r.p_value);
      j["defined"] = r.defined;
      write_json(std::cout, j);
      return 0;
    }
    if (*marg) {
      const CountMatrix counts = read_counts_csv(marg_counts);
      PassRecord p;
      p.signal_rpd = marginalize(counts, Arm::Signal);
      p.idler_rpd = marginalize(counts, Arm::Idler);
      const Table t = rpd_table({p});
      if (marg_out.empty())
        write_table_csv(std::cout, t);
      else
        write_table_csv(marg_out, t);
      return 0;
    }
    if (*unc) {
      const SourceModel m = read_model_json(unc_model);
      Loaded l = load_config(unc_config);
      const std::uint64_t seed = resolve_seed(seed_flag, l.seed);
      UncertaintyConfig cfg;
      cfg.fit = l.config.selection.fit;
      cfg.max_correction_passes = l.config.max_correction_passes;
      cfg.correction_tol = l.config.correction_tol;
      cfg.correction_noise_fraction = l.config.correction_noise_fraction;
      cfg.threads = unc_threads;
      const auto pts = uncertainty_curve(m, unc_n, unc_repeats, seed, cfg);
      Table summary, errors;
      summary.columns = {"n_tot", "mean_relative_error", "std_error", "used", "excluded"};
      errors.columns = {"n_tot", "repeat", "relative_error"};
      for (const auto& p : pts) {
        summary.add({static_cast<std::int64_t>(p.n_tot), p.mean_error, p.std_error, std::int64_t{p.used},
                     std::int64_t{p.excluded}});
        for (std::size_t r = 0; r < p.errors.size(); ++r)
          errors.add({static_cast<std::int64_t>(p.n_tot), static_cast<std::int64_t>(r), p.errors[r]});
      }
      write_table_csv(unc_out, summary);
      if (!unc_errors.empty()) write_table_csv(unc_errors, errors);
      write_table_csv(std::cout, summary);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
