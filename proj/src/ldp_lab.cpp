#include "cvlab/ldp_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cvlab/csv.hpp"
#include "cvlab/error.hpp"
#include "cvlab/parallel.hpp"

namespace cvlab {
namespace {

// Neumaier-compensated accumulator.
struct Compensated {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x)) comp += (sum - t) + x;
    else comp += (x - t) + sum;
    sum = t;
  }
  double value() const { return sum + comp; }
};

struct Kahan {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

double event_tolerance(double nc, double scale) { return 1e-9 * std::max({1.0, std::abs(nc), scale}); }

bool in_event(double sum, double abs_sum, const TailQuery& q) {
  const double nc = static_cast<double>(q.n) * q.c;
  const double tol = event_tolerance(nc, abs_sum);
  return q.side == TailSide::Lower ? sum <= nc + tol : sum >= nc - tol;
}

void check_query(const TailQuery& q) {
  if (q.n < 1) fail(ErrorKind::InvalidArgument, "tail horizon n must be >= 1");
  if (q.x0 < 0) fail(ErrorKind::InvalidArgument, "x0 must be nonnegative");
}

TailEstimate finish_estimate(const std::vector<char>& hits) {
  TailEstimate est;
  est.replications = static_cast<std::int64_t>(hits.size());
  const auto count = std::count(hits.begin(), hits.end(), char{1});
  est.p_hat = static_cast<double>(count) / static_cast<double>(hits.size());
  est.std_err = std::sqrt(est.p_hat * (1.0 - est.p_hat) / static_cast<double>(hits.size()));
  return est;
}

double sample_std(const std::vector<SeedSummary>& seeds, double SeedSummary::*field) {
  if (seeds.size() < 2) return 0.0;
  double mean = 0.0;
  for (const auto& s : seeds) mean += s.*field;
  mean /= static_cast<double>(seeds.size());
  double ss = 0.0;
  for (const auto& s : seeds) ss += (s.*field - mean) * (s.*field - mean);
  return std::sqrt(ss / static_cast<double>(seeds.size() - 1));
}

}  // namespace

const char* to_string(TailSide side) { return side == TailSide::Lower ? "lower (<=)" : "upper (>=)"; }

Vector SumDistribution::state_marginal() const {
  Vector out(mass.rows());
  for (int x = 0; x < mass.rows(); ++x) {
    Compensated acc;
    for (int k = 0; k < mass.cols(); ++k) acc.add(mass(x, k));
    out(x) = acc.value();
  }
  return out;
}

SumDistribution exact_sum_distribution(const TruncatedKernel& P, const Observable& F, std::int64_t x0,
                                       std::int64_t n, double budget) {
  if (n < 1) fail(ErrorKind::InvalidArgument, "tail horizon n must be >= 1");
  const auto S = static_cast<std::int64_t>(P.size());
  if (x0 < 0 || x0 >= S) fail(ErrorKind::InvalidArgument, "x0 outside the truncation");
  const std::vector<double> values = F.tabulate(P.size(), P.step());
  SumDistribution dist;
  dist.n = n;
  dist.offset = *std::min_element(values.begin(), values.end());
  std::vector<double> diffs;
  for (double v : values) diffs.push_back(v - dist.offset);
  if (std::all_of(diffs.begin(), diffs.end(), [](double d) { return d == 0.0; })) {
    dist.span = 1.0;
  } else {
    auto span = lattice_step(diffs);
    if (!span) fail(ErrorKind::NonLatticeObservable, "observable values do not lie on a common lattice");
    dist.span = *span;
  }
  std::vector<std::int64_t> k(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) k[i] = std::llround(diffs[i] / dist.span);
  const std::int64_t kmax = *std::max_element(k.begin(), k.end());

  std::int64_t nnz = 0;
  for (std::int64_t x = 0; x < S; ++x) nnz += static_cast<std::int64_t>(P.row(static_cast<int>(x)).size());
  const double nd = static_cast<double>(n);
  const double cells = static_cast<double>(nnz) * (static_cast<double>(kmax) * nd * (nd - 1.0) / 2.0 + nd);
  if (cells > budget) {
    std::ostringstream msg;
    msg << "exact DP needs about " << cells << " cell updates, above the budget of " << budget
        << "; reduce n or the truncation N";
    fail(ErrorKind::BudgetExceeded, msg.str());
  }
  const std::int64_t cols = n * kmax + 1;
  std::vector<double> cur(static_cast<std::size_t>(S * cols), 0.0);
  std::vector<double> next(cur.size()), comp(cur.size());
  cur[static_cast<std::size_t>(x0 * cols)] = 1.0;
  for (std::int64_t step = 0; step < n; ++step) {
    std::fill(next.begin(), next.end(), 0.0);
    std::fill(comp.begin(), comp.end(), 0.0);
    const std::int64_t reach = step * kmax;
    for (std::int64_t x = 0; x < S; ++x) {
      const std::int64_t shift = k[static_cast<std::size_t>(x)];
      for (std::int64_t K = 0; K <= reach; ++K) {
        const double m = cur[static_cast<std::size_t>(x * cols + K)];
        if (m == 0.0) continue;
        for (const KernelEntry& e : P.row(static_cast<int>(x))) {
          const auto idx = static_cast<std::size_t>(e.col * cols + K + shift);
          const double add = e.prob * m;
          const double t = next[idx] + add;
          if (std::abs(next[idx]) >= std::abs(add)) comp[idx] += (next[idx] - t) + add;
          else comp[idx] += (add - t) + next[idx];
          next[idx] = t;
        }
      }
    }
    for (std::size_t i = 0; i < next.size(); ++i) cur[i] = next[i] + comp[i];
  }
  dist.mass.resize(S, cols);
  for (std::int64_t x = 0; x < S; ++x) {
    for (std::int64_t K = 0; K < cols; ++K) dist.mass(x, K) = cur[static_cast<std::size_t>(x * cols + K)];
  }
  return dist;
}

std::int64_t scaled_threshold(const SumDistribution& dist, double c, TailSide side) {
  const double t = static_cast<double>(dist.n) * (c - dist.offset) / dist.span;
  const double snap = 1e-9 * std::max(1.0, std::abs(t));
  const double bound = side == TailSide::Lower ? std::floor(t + snap) : std::ceil(t - snap);
  const double limit = static_cast<double>(dist.mass.cols()) + 1.0;
  return static_cast<std::int64_t>(std::clamp(bound, -1.0, limit));
}

double exact_tail_dp(const TruncatedKernel& P, const TailQuery& query, double budget) {
  check_query(query);
  const SumDistribution dist = exact_sum_distribution(P, query.F, query.x0, query.n, budget);
  const std::int64_t bound = scaled_threshold(dist, query.c, query.side);
  Compensated acc;
  for (int x = 0; x < dist.mass.rows(); ++x) {
    for (std::int64_t K = 0; K < dist.mass.cols(); ++K) {
      const bool hit = query.side == TailSide::Lower ? K <= bound : K >= bound;
      if (hit) acc.add(dist.mass(x, K));
    }
  }
  return std::clamp(acc.value(), 0.0, 1.0);
}

TailEstimate mc_tail(const ChainSpec& spec, const TailQuery& query, std::int64_t M, std::uint64_t master_seed,
                     unsigned threads) {
  check_query(query);
  if (M < 1) fail(ErrorKind::InvalidArgument, "replication count M must be >= 1");
  const double h = spec.law().step();
  std::vector<char> hits(static_cast<std::size_t>(M), 0);
  parallel_for(hits.size(), threads, [&](std::size_t r) {
    PathStream stream(spec, query.x0, master_seed, r);
    double sum = 0.0, abs_sum = 0.0;
    for (std::int64_t k = 0; k < query.n; ++k) {
      const double f = query.F(k == 0 ? stream.state() : stream.advance(), h);
      sum += f;
      abs_sum += std::abs(f);
    }
    hits[r] = in_event(sum, abs_sum, query) ? 1 : 0;
  });
  return finish_estimate(hits);
}

TailEstimate mc_tail(const TruncatedKernel& P, const TailQuery& query, std::int64_t M, std::uint64_t master_seed,
                     unsigned threads) {
  check_query(query);
  if (M < 1) fail(ErrorKind::InvalidArgument, "replication count M must be >= 1");
  if (query.x0 >= static_cast<std::int64_t>(P.size())) fail(ErrorKind::InvalidArgument, "x0 outside the truncation");
  const std::vector<double> values = query.F.tabulate(P.size(), P.step());
  std::vector<std::vector<double>> cdf(P.size());
  for (std::size_t x = 0; x < P.size(); ++x) {
    double acc = 0.0;
    for (const KernelEntry& e : P.row(static_cast<int>(x))) cdf[x].push_back(acc += e.prob);
    cdf[x].back() = 1.0;
  }
  std::vector<char> hits(static_cast<std::size_t>(M), 0);
  parallel_for(hits.size(), threads, [&](std::size_t r) {
    ReplicationStream rng(master_seed, r);
    auto x = static_cast<std::size_t>(query.x0);
    double sum = 0.0, abs_sum = 0.0;
    for (std::int64_t k = 0; k < query.n; ++k) {
      if (k > 0) {
        const double u = rng.uniform();
        const auto& c = cdf[x];
        std::size_t j = 0;
        while (j + 1 < c.size() && u >= c[j]) ++j;
        x = static_cast<std::size_t>(P.row(static_cast<int>(x))[j].col);
      }
      sum += values[x];
      abs_sum += std::abs(values[x]);
    }
    hits[r] = in_event(sum, abs_sum, query) ? 1 : 0;
  });
  return finish_estimate(hits);
}

SlopeFit ldp_slope(const std::vector<std::pair<std::int64_t, double>>& estimates) {
  if (estimates.size() < 3) fail(ErrorKind::InvalidArgument, "slope fit needs at least 3 horizons");
  for (auto [n, p] : estimates) {
    if (!(p > 0.0)) {
      std::ostringstream msg;
      msg << "probability at n = " << n << " is zero";
      fail(ErrorKind::ZeroProbability, msg.str());
    }
  }
  auto fit = [&](bool corrected) {
    double mx = 0.0, my = 0.0;
    for (auto [n, p] : estimates) {
      mx += static_cast<double>(n);
      my += std::log(p) + (corrected ? 0.5 * std::log(static_cast<double>(n)) : 0.0);
    }
    const double m = static_cast<double>(estimates.size());
    mx /= m;
    my /= m;
    double sxy = 0.0, sxx = 0.0;
    for (auto [n, p] : estimates) {
      const double x = static_cast<double>(n) - mx;
      const double y = std::log(p) + (corrected ? 0.5 * std::log(static_cast<double>(n)) : 0.0) - my;
      sxy += x * y;
      sxx += x * x;
    }
    if (!(sxx > 0.0)) fail(ErrorKind::InvalidArgument, "slope fit needs distinct horizons");
    const double slope = sxy / sxx;
    return std::pair{slope, my - slope * mx};
  };
  SlopeFit out;
  std::tie(out.slope, out.intercept) = fit(false);
  std::tie(out.corrected_slope, out.corrected_intercept) = fit(true);
  return out;
}

double FigureRun::share_within(double rel) const {
  if (seeds.empty()) return 0.0;
  auto n = std::count_if(seeds.begin(), seeds.end(),
                         [&](const SeedSummary& s) { return std::abs(s.phi_T - phi) <= rel * std::abs(phi); });
  return static_cast<double>(n) / static_cast<double>(seeds.size());
}

double FigureRun::share_ordered(double level) const {
  if (seeds.empty()) return 0.0;
  auto n = std::count_if(seeds.begin(), seeds.end(), [&](const SeedSummary& s) { return s.ordered_fraction >= level; });
  return static_cast<double>(n) / static_cast<double>(seeds.size());
}

double FigureRun::std_phi() const { return sample_std(seeds, &SeedSummary::phi_T); }
double FigureRun::std_phi_minus() const { return sample_std(seeds, &SeedSummary::phi_minus_T); }
double FigureRun::std_phi_plus() const { return sample_std(seeds, &SeedSummary::phi_plus_T); }

SeedSummary summarize_seed(const ChainSpec& spec, const Observable& F, const LyapunovData& lyap, double theta_minus,
                           double theta_plus, std::int64_t T, std::uint64_t master_seed, std::uint64_t replication) {
  validate_thetas(theta_minus, theta_plus);
  if (T < 1) fail(ErrorKind::InvalidArgument, "horizon T must be >= 1");
  const double h = spec.law().step();
  std::vector<double> f_cache, h_cache;
  auto grow = [&](std::int64_t i) {
    while (static_cast<std::int64_t>(f_cache.size()) <= i) {
      const auto j = static_cast<std::int64_t>(f_cache.size());
      f_cache.push_back(F(j, h));
      h_cache.push_back(lyap.H(static_cast<double>(j) * h));
    }
  };
  PathStream stream(spec, master_seed, replication);
  Kahan sf, sh;
  const std::int64_t window_start = (T + 9) / 10;
  std::int64_t ordered = 0;
  std::int64_t x = stream.state();
  SeedSummary out;
  out.replication = replication;
  out.seed = stream_seed(master_seed, replication);
  for (std::int64_t n = 1; n <= T; ++n) {
    if (n > 1) x = stream.advance();
    grow(x);
    sf.add(f_cache[static_cast<std::size_t>(x)]);
    sh.add(h_cache[static_cast<std::size_t>(x)]);
    if (n >= window_start) {
      const double phi = sf.sum / static_cast<double>(n);
      const double delta = sh.sum / static_cast<double>(n);
      if (phi - theta_minus * delta < phi - theta_plus * delta) ++ordered;
    }
  }
  out.phi_T = sf.sum / static_cast<double>(T);
  out.delta_T = sh.sum / static_cast<double>(T);
  out.phi_minus_T = out.phi_T - theta_minus * out.delta_T;
  out.phi_plus_T = out.phi_T - theta_plus * out.delta_T;
  out.ordered_fraction = static_cast<double>(ordered) / static_cast<double>(T - window_start + 1);
  return out;
}

const std::vector<std::string>& trajectory_header() {
  static const std::vector<std::string> header{"n", "phi_n", "phi_minus", "phi_plus", "delta_n", "band_lo", "band_hi"};
  return header;
}

void write_trajectory(const std::filesystem::path& file, const EstimatorSeries& series, double epsilon,
                      int precision) {
  CsvWriter csv(file.string(), trajectory_header(), precision);
  const auto band = confidence_band(series, epsilon);
  for (std::size_t k = 0; k < series.n_grid.size(); ++k) {
    csv.row({series.n_grid[k], series.phi_n[k], series.phi_minus[k], series.phi_plus[k], series.delta_n[k], band[k].lo,
             band[k].hi});
  }
}

namespace {

FigureRun simulate_run(FigureRun run, const ChainSpec& spec, const Observable& F, const LyapunovData& lyap,
                       const std::filesystem::path& out_dir, const std::string& stem, const FigureOptions& opt) {
  run.seeds.resize(static_cast<std::size_t>(opt.seeds));
  parallel_for(run.seeds.size(), opt.threads, [&](std::size_t r) {
    run.seeds[r] = summarize_seed(spec, F, lyap, run.theta_minus, run.theta_plus, run.T, opt.master_seed, r);
  });
  PathStream stream(spec, opt.master_seed, 0);
  const auto grid = uniform_n_grid(run.T, opt.trajectory_points);
  const EstimatorSeries series =
      running_estimates(stream, spec.law().step(), F, lyap, run.theta_minus, run.theta_plus, grid);
  const auto traj = out_dir / (stem + "_trajectory.csv");
  write_trajectory(traj, series, opt.epsilon);
  const auto seeds_file = out_dir / (stem + "_seeds.csv");
  CsvWriter csv(seeds_file.string(), {"replication", "seed", "phi_T", "phi_minus_T", "phi_plus_T", "delta_T",
                                      "ordered_fraction"});
  for (const SeedSummary& s : run.seeds) {
    csv.row({static_cast<std::int64_t>(s.replication), std::to_string(s.seed), s.phi_T, s.phi_minus_T, s.phi_plus_T,
             s.delta_T, s.ordered_fraction});
  }
  run.files = {traj.filename().string(), seeds_file.filename().string()};
  return run;
}

FigureRun queue_run(const std::string& label, double kappa, std::int64_t T, const std::filesystem::path& out_dir,
                    const std::string& stem, const FigureOptions& opt) {
  const ChainSpec spec = ChainSpec::reflected(make_queue_increments(4.0, 3.0, kappa));
  const LyapunovData lyap = fluid_lyapunov(spec.law());
  const Observable F = Observable::identity();
  constexpr int kReferenceN = 400;
  const TruncatedKernel K = truncate_kernel(spec, kReferenceN);
  const Vector pi = stationary(K);
  double phi = 0.0;
  for (int i = 0; i <= kReferenceN; ++i) phi += pi(i) * i * K.step();
  FigureRun run;
  run.label = label;
  run.model = "queue";
  run.mu = 4.0;
  run.alpha = 3.0;
  run.kappa = kappa;
  run.variance = spec.law().variance();
  run.delta = spec.law().drift();
  run.theta_minus = 1.05;
  run.theta_plus = 1.0;
  run.T = opt.horizon.value_or(T);
  run.phi = phi;
  run.phi_source = "truncated stationary mean, N = 400 lattice steps";
  return simulate_run(std::move(run), spec, F, lyap, out_dir, stem, opt);
}

}  // namespace

FigureReport reproduce_figure(int figure_id, const std::filesystem::path& out_dir, const FigureOptions& options) {
  if (figure_id < 1 || figure_id > 3) {
    std::ostringstream msg;
    msg << "unknown figure id " << figure_id << " (expected 1, 2 or 3)";
    fail(ErrorKind::InvalidArgument, msg.str());
  }
  if (options.seeds < 1) fail(ErrorKind::InvalidArgument, "figure runs need at least one seed");
  std::filesystem::create_directories(out_dir);
  FigureReport report;
  report.figure = figure_id;
  if (figure_id == 1) {
    const double alpha = 9.0 / 19.0, beta = 0.1;
    const ChainSpec spec = ChainSpec::mm1(alpha);
    const Observable F = Observable::exponential(beta);
    const LyapunovData lyap = mm1_exponential_lyapunov(alpha, beta);
    FigureRun run;
    run.label = "mm1";
    run.model = "mm1";
    run.alpha = alpha;
    run.beta = beta;
    run.variance = spec.law().variance();
    run.delta = spec.law().drift();
    run.T = options.horizon.value_or(5'000'000);
    run.phi = analytic_mean_mm1(alpha, F);
    run.phi_source = "geometric stationary law";
    report.runs.push_back(simulate_run(std::move(run), spec, F, lyap, out_dir, "figure1", options));
  } else if (figure_id == 2) {
    report.runs.push_back(queue_run("kappa2", 2.0, 5'000, out_dir, "figure2_kappa2", options));
    report.runs.push_back(queue_run("kappa1", 1.0, 5'000, out_dir, "figure2_kappa1", options));
  } else {
    report.runs.push_back(queue_run("kappa2", 2.0, 20'000, out_dir, "figure3_kappa2", options));
    report.runs.push_back(queue_run("kappa5", 5.0, 20'000, out_dir, "figure3_kappa5", options));
  }
  return report;
}

}  // namespace cvlab
