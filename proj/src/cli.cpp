#include "cvlab/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>

#include "cvlab/config.hpp"
#include "cvlab/csv.hpp"
#include "cvlab/ldp_lab.hpp"
#include "cvlab/parallel.hpp"

namespace cvlab {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "1.0.0";

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::optional<std::int64_t> n;
  bool exact = false, mc = false, both = false;
  int figure = 0;
};

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Manifests echo numbers through the same 17-digit formatter as the CSVs.
json num(double x) {
  if (!std::isfinite(x)) return format_double(x);
  return x;
}

void write_manifest(const fs::path& dir, const std::string& command, json body) {
  body["artifact"] = "cvlab";
  body["version"] = kVersion;
  body["command"] = command;
  body["timestamp"] = utc_timestamp();
  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::ConfigError, "cannot write manifest in " + dir.string());
  out << body.dump(2) << '\n';
}

fs::path output_dir(const Flags& flags, const RunConfig* cfg) {
  fs::path dir = !flags.out.empty() ? fs::path(flags.out) : fs::path(cfg ? cfg->output.directory : "out");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::ConfigError, "cannot create output directory " + dir.string());
  return dir;
}

RunConfig load(const Flags& flags) {
  if (flags.config.empty()) fail(ErrorKind::ConfigError, "--config is required");
  RunConfig cfg = load_config(flags.config);
  if (flags.seed) cfg.run.master_seed = *flags.seed;
  if (flags.n) {
    if (*flags.n < 1) fail(ErrorKind::ConfigError, "--n must be >= 1");
    cfg.run.n = *flags.n;
  }
  return cfg;
}

int cmd_simulate(const Flags& flags) {
  RunConfig cfg = load(flags);
  if (cfg.finite_model()) fail(ErrorKind::ConfigError, "simulate needs a reflected-walk model");
  const fs::path dir = output_dir(flags, &cfg);
  const ChainSpec spec = cfg.chain().with_x0(cfg.x0_index());
  const Observable F = cfg.effective_observable();
  const LyapunovData lyap = cfg.lyapunov();
  const std::int64_t n = cfg.run.n;
  std::vector<std::int64_t> grid = cfg.run.n_grid;
  if (flags.n || grid.empty()) grid = uniform_n_grid(n, cfg.run.grid_points);
  for (std::size_t k = 0; k < grid.size(); ++k) {
    if (grid[k] < 1 || grid[k] > n || (k > 0 && grid[k] <= grid[k - 1])) {
      fail(ErrorKind::ConfigError, "run.n_grid must be increasing within [1, run.n]");
    }
  }
  const double h = spec.law().step();
  const auto& est = cfg.estimator;
  PathStream stream(spec, cfg.run.master_seed, 0);
  const EstimatorSeries series = running_estimates(stream, h, F, lyap, est.theta_minus, est.theta_plus, grid);
  write_trajectory(dir / "trajectory.csv", series, est.epsilon, cfg.output.precision);
  json outputs = json::array({"trajectory.csv"});
  if (cfg.run.replications > 1) {
    std::vector<SeedSummary> seeds(static_cast<std::size_t>(cfg.run.replications));
    parallel_for(seeds.size(), flags.threads, [&](std::size_t r) {
      seeds[r] = summarize_seed(spec, F, lyap, est.theta_minus, est.theta_plus, n, cfg.run.master_seed, r);
    });
    CsvWriter csv((dir / "replications.csv").string(),
                  {"replication", "seed", "phi_T", "phi_minus_T", "phi_plus_T", "delta_T", "ordered_fraction"},
                  cfg.output.precision);
    for (const SeedSummary& s : seeds) {
      csv.row({static_cast<std::int64_t>(s.replication), std::to_string(s.seed), s.phi_T, s.phi_minus_T, s.phi_plus_T,
               s.delta_T, s.ordered_fraction});
    }
    outputs.push_back("replications.csv");
  }
  json body;
  body["config"] = cfg.raw;
  body["seeds"] = {{"master_seed", cfg.run.master_seed}, {"replications", cfg.run.replications}};
  body["outputs"] = outputs;
  body["metadata"] = {{"centering_value", num(F.center_value())},
                      {"norm_F_W", num(weighted_norm(F, lyap, std::min<std::int64_t>(n, 100000)))},
                      {"ordered_fraction", "share of steps n in [T/10, T] with phi_minus < phi_plus"}};
  write_manifest(dir, "simulate", body);
  return 0;
}

std::vector<double> dual_c_values(const RunConfig& cfg, const RateProfile& profile, double mean) {
  if (!cfg.spectral.c_list.empty()) return cfg.spectral.c_list;
  const double lo = profile.dual_range().first;
  std::vector<double> cs;
  const int m = cfg.spectral.c_points;
  for (int i = 0; i < m; ++i) cs.push_back(i == m - 1 ? mean : lo + (mean - lo) * i / (m - 1));
  return cs;
}

int cmd_spectral(const Flags& flags) {
  RunConfig cfg = load(flags);
  const fs::path dir = output_dir(flags, &cfg);
  const TruncatedKernel K = cfg.kernel();
  const Observable F = cfg.effective_observable();
  const std::vector<double> Fv = F.tabulate(K.size(), K.step());
  const auto grid = make_a_grid(cfg.spectral.a_min, cfg.spectral.a_max, cfg.spectral.a_points);
  const RateProfile profile =
      lambda_profile(K, Fv, grid, SmallPair::atom(K.size()), cfg.gpe_options(), flags.threads);
  const auto available = std::count_if(profile.points.begin(), profile.points.end(),
                                       [](const ProfilePoint& p) { return p.ok() && p.a != 0.0; });
  if (available == 0) fail(ErrorKind::NonConvergence, "no tilt on the grid could be evaluated");
  {
    CsvWriter csv((dir / "rate.csv").string(), {"a", "Lambda", "dLambda_twisted", "dLambda_fd", "d2Lambda", "status"},
                  cfg.output.precision);
    for (const ProfilePoint& p : profile.points) csv.row({p.a, p.Lambda, p.dLambda, p.dLambda_fd, p.d2Lambda, p.status});
  }
  const std::int64_t x0 = cfg.x0_index();
  if (x0 >= static_cast<std::int64_t>(K.size())) fail(ErrorKind::ConfigError, "run.x0 outside the truncation");
  const double mean = cfg.observable.centered ? 0.0 : cfg.reference_mean();
  {
    CsvWriter csv((dir / "dual.csv").string(), {"c", "I", "a_star", "sigma_a_star", "g_c_at_x0"}, cfg.output.precision);
    for (double c : dual_c_values(cfg, profile, mean)) {
      const DualPoint d = rate_function(profile, c);
      double g = std::numeric_limits<double>::quiet_NaN();
      if (d.a_star < 0.0) g = std::exp(d.point.log_f_pair(x0)) / (std::abs(d.a_star) * d.sigma_a_star);
      csv.row({c, d.I, d.a_star, d.sigma_a_star, g});
    }
  }
  json body;
  body["config"] = cfg.raw;
  body["seeds"] = json::object();
  body["outputs"] = {"rate.csv", "dual.csv"};
  body["metadata"] = {{"centering_value", num(F.center_value())},
                      {"x0_index", x0},
                      {"g_c_normalization", "eigenvector scaled so that mu(f) = mu(1) = 1"},
                      {"g_c_sign", "magnitude 1/(|a*| sigma_a*) used; the literal 1/(a* sigma_a*) is negative for a* < 0"},
                      {"dLambda_canonical", "stationary mean of F under the twisted kernel"},
                      {"unavailable_points", profile.points.size() - static_cast<std::size_t>(std::count_if(
                                                 profile.points.begin(), profile.points.end(),
                                                 [](const ProfilePoint& p) { return p.ok(); }))}};
  write_manifest(dir, "spectral", body);
  return 0;
}

int cmd_tail(const Flags& flags) {
  RunConfig cfg = load(flags);
  const fs::path dir = output_dir(flags, &cfg);
  const bool want_exact = flags.exact || flags.both || (!flags.mc);
  const bool want_mc = flags.mc || flags.both || (!flags.exact);
  if (want_mc && cfg.tail.replications < 1) fail(ErrorKind::ConfigError, "tail.replications must be >= 1 for Monte Carlo");
  std::vector<std::int64_t> ns = cfg.tail.n_list;
  if (flags.n) ns = {*flags.n};
  if (ns.empty()) ns = {cfg.run.n};
  const TruncatedKernel K = cfg.kernel();
  const Observable F = cfg.effective_observable();
  const TailSide side = cfg.tail.side == "lower" ? TailSide::Lower : TailSide::Upper;
  const std::int64_t x0 = cfg.x0_index();
  if (x0 >= static_cast<std::int64_t>(K.size())) fail(ErrorKind::ConfigError, "run.x0 outside the truncation");

  std::optional<RateProfile> profile;
  if (side == TailSide::Lower) {
    const auto Fv = F.tabulate(K.size(), K.step());
    const auto grid = make_a_grid(cfg.spectral.a_min, cfg.spectral.a_max, cfg.spectral.a_points);
    profile = lambda_profile(K, Fv, grid, SmallPair::atom(K.size()), cfg.gpe_options(), flags.threads);
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CsvWriter csv((dir / "tail.csv").string(),
                {"n", "c", "p_exact", "p_mc", "mc_stderr", "bahadur_rao", "ratio_exact_over_br"}, cfg.output.precision);
  std::string br_note = side == TailSide::Lower ? "" : "prefactor is implemented for the lower tail only";
  for (std::int64_t n : ns) {
    TailQuery q{F, x0, n, cfg.tail.c, side};
    double p_exact = nan, p_mc = nan, se = nan, br = nan;
    if (want_exact) p_exact = exact_tail_dp(K, q, cfg.tail.budget);
    if (want_mc) {
      const TailEstimate est = cfg.finite_model()
                                   ? mc_tail(K, q, cfg.tail.replications, cfg.run.master_seed, flags.threads)
                                   : mc_tail(cfg.chain(), q, cfg.tail.replications, cfg.run.master_seed, flags.threads);
      p_mc = est.p_hat;
      se = est.std_err;
    }
    if (profile) {
      try {
        br = bahadur_rao(*profile, static_cast<int>(x0), cfg.tail.c, static_cast<long>(n)).value;
      } catch (const Error& err) {
        if (err.kind() != ErrorKind::OutOfDualRange) throw;
        br_note = err.what();
      }
    }
    csv.row({n, cfg.tail.c, p_exact, p_mc, se, br, p_exact / br});
  }
  json body;
  body["config"] = cfg.raw;
  body["seeds"] = {{"master_seed", cfg.run.master_seed}, {"replications", cfg.tail.replications}};
  body["outputs"] = {"tail.csv"};
  body["metadata"] = {{"side", to_string(side)},
                      {"event", "L_n(F) = (1/n) sum_{k<n} F(Phi(k)) compared with c"},
                      {"centering_value", num(F.center_value())},
                      {"exact_on_truncation_N", static_cast<std::int64_t>(K.size()) - 1},
                      {"g_c_normalization", "eigenvector scaled so that mu(f) = mu(1) = 1"},
                      {"bahadur_rao_note", br_note}};
  write_manifest(dir, "tail", body);
  return 0;
}

int cmd_reproduce(const Flags& flags) {
  if (flags.figure < 1 || flags.figure > 3) {
    fail(ErrorKind::ConfigError, "--figure must be 1, 2 or 3, got " + std::to_string(flags.figure));
  }
  const fs::path dir = output_dir(flags, nullptr);
  FigureOptions opt;
  if (flags.seed) opt.master_seed = *flags.seed;
  opt.threads = flags.threads;
  if (flags.n) {
    if (*flags.n < 1) fail(ErrorKind::ConfigError, "--n must be >= 1");
    opt.horizon = *flags.n;
  }
  const FigureReport report = reproduce_figure(flags.figure, dir, opt);
  json runs = json::array();
  json outputs = json::array();
  for (const FigureRun& r : report.runs) {
    json run = {{"label", r.label},
                {"model", r.model},
                {"T", r.T},
                {"x0", r.x0},
                {"variance_D", num(r.variance)},
                {"delta", num(r.delta)},
                {"theta_minus", num(r.theta_minus)},
                {"theta_plus", num(r.theta_plus)},
                {"phi", num(r.phi)},
                {"phi_source", r.phi_source},
                {"seeds", r.seeds.size()},
                {"share_within_5pct", num(r.share_within(0.05))},
                {"share_ordered_99pct", num(r.share_ordered(0.99))},
                {"std_phi_T", num(r.std_phi())},
                {"std_phi_minus_T", num(r.std_phi_minus())},
                {"std_phi_plus_T", num(r.std_phi_plus())},
                {"files", r.files}};
    if (r.model == "mm1") {
      run["alpha"] = num(r.alpha);
      run["alpha_fraction"] = "9/19";
      run["beta"] = num(r.beta);
    } else {
      run["mu"] = num(r.mu);
      run["alpha"] = num(r.alpha);
      run["kappa"] = num(r.kappa);
    }
    runs.push_back(run);
    for (const auto& f : r.files) outputs.push_back(f);
  }
  json body;
  body["figure"] = report.figure;
  body["config"] = {{"figure", report.figure}, {"seeds", opt.seeds}, {"epsilon", opt.epsilon},
                    {"trajectory_points", opt.trajectory_points}};
  body["seeds"] = {{"master_seed", opt.master_seed}, {"replications", opt.seeds}};
  body["runs"] = runs;
  body["outputs"] = outputs;
  body["metadata"] = {{"ordered_fraction",
                       "artifact operationalization: share of steps n in [T/10, T] with phi_minus < phi_plus"},
                      {"trajectory_replication", 0}};
  write_manifest(dir, "reproduce", body);
  return 0;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::InvalidArgument: return 1;
    case ErrorKind::InvalidModel:
    case ErrorKind::NonLatticeIncrements:
    case ErrorKind::BetaOutOfRange:
    case ErrorKind::TruncationTooSmall:
    case ErrorKind::NotIrreducible: return 3;
    default: return 2;
  }
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Steady-state simulation with Lyapunov control variates and large-deviation diagnostics", "cvlab"};
  app.require_subcommand(1);
  Flags flags;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("--config", flags.config, "JSON run configuration");
    if (needs_config) c->required();
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--seed", flags.seed, "master seed override");
    sub->add_option("--threads", flags.threads, "worker cap (output does not depend on it)")->check(CLI::PositiveNumber);
    sub->add_option("--n", flags.n, "horizon override");
  };
  CLI::App* simulate = app.add_subcommand("simulate", "run the estimator pair and write trajectory.csv");
  add_common(simulate, true);
  CLI::App* spectral = app.add_subcommand("spectral", "tabulate Lambda and the rate function");
  add_common(spectral, true);
  CLI::App* tail = app.add_subcommand("tail", "exact, Monte Carlo and Bahadur-Rao tail probabilities");
  add_common(tail, true);
  auto* fe = tail->add_flag("--exact", flags.exact, "exact DP only");
  auto* fm = tail->add_flag("--mc", flags.mc, "Monte Carlo only");
  auto* fb = tail->add_flag("--both", flags.both, "exact and Monte Carlo (default)");
  fe->excludes(fm)->excludes(fb);
  fm->excludes(fb);
  CLI::App* reproduce = app.add_subcommand("reproduce", "regenerate the data behind figure 1, 2 or 3");
  add_common(reproduce, false);
  reproduce->add_option("--figure", flags.figure, "figure id (1, 2 or 3)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  try {
    if (*simulate) return cmd_simulate(flags);
    if (*spectral) return cmd_spectral(flags);
    if (*tail) return cmd_tail(flags);
    return cmd_reproduce(flags);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace cvlab
