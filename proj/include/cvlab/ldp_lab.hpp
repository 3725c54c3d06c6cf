#pragma once

// Validation laboratory: exact tail probabilities of additive functionals by
// dynamic programming, Monte Carlo tail estimates, decay-rate regression and
// the figure reproductions.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cvlab/chain.hpp"
#include "cvlab/lyapunov.hpp"
#include "cvlab/spectral.hpp"

namespace cvlab {

/// Lower: L_n(F) <= c. Upper: L_n(F) >= c. L_n averages F(Phi(0..n-1)).
enum class TailSide { Lower, Upper };

const char* to_string(TailSide side);

struct TailQuery {
  Observable F;
  std::int64_t x0 = 0;  // lattice index
  std::int64_t n = 1;
  double c = 0.0;
  TailSide side = TailSide::Lower;
};

struct TailEstimate {
  double p_hat = 0.0;
  double std_err = 0.0;
  std::int64_t replications = 0;
  std::optional<double> exact;
  std::optional<double> bahadur_rao;
};

inline constexpr double kDefaultDpBudget = 1e9;

/// Joint law of (Phi(n), sum_{k<n} F(Phi(k))) with the sum written as
/// n * offset + span * K for an integer K.
struct SumDistribution {
  double offset = 0.0;
  double span = 1.0;
  std::int64_t n = 0;
  Matrix mass;  // states x (K = 0..cols-1)

  /// Marginal law of Phi(n).
  Vector state_marginal() const;
};

SumDistribution exact_sum_distribution(const TruncatedKernel& P, const Observable& F, std::int64_t x0,
                                       std::int64_t n, double budget = kDefaultDpBudget);

/// Exact P_{x0}{L_n(F) <= c} (or >= c) on the truncated chain. Throws
/// NonLatticeObservable when F does not live on a lattice and BudgetExceeded
/// when the DP would need more than `budget` cell updates.
double exact_tail_dp(const TruncatedKernel& P, const TailQuery& query, double budget = kDefaultDpBudget);

/// Integer threshold for the scaled sum: the event is K <= bound (Lower) or
/// K >= bound (Upper).
std::int64_t scaled_threshold(const SumDistribution& dist, double c, TailSide side);

/// Fraction of M replications of the reflected walk started at query.x0
/// whose path satisfies the event; replication r uses stream r of the seed.
TailEstimate mc_tail(const ChainSpec& spec, const TailQuery& query, std::int64_t M, std::uint64_t master_seed,
                     unsigned threads = 1);

/// Same on a finite kernel, sampling rows by inversion.
TailEstimate mc_tail(const TruncatedKernel& P, const TailQuery& query, std::int64_t M, std::uint64_t master_seed,
                     unsigned threads = 1);

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  /// Fit of log p + (1/2) log n, the Bahadur-Rao corrected form.
  double corrected_slope = 0.0;
  double corrected_intercept = 0.0;
};

/// Least squares of log p against n. Needs >= 3 horizons and p > 0.
SlopeFit ldp_slope(const std::vector<std::pair<std::int64_t, double>>& estimates);

struct FigureOptions {
  std::uint64_t master_seed = 1;
  unsigned threads = 1;
  int seeds = 100;
  std::int64_t trajectory_points = 1000;
  double epsilon = 1.0;
  /// Overrides the horizon of every run when set.
  std::optional<std::int64_t> horizon;
};

struct SeedSummary {
  std::uint64_t replication = 0;
  std::uint64_t seed = 0;
  double phi_T = 0.0;
  double phi_minus_T = 0.0;
  double phi_plus_T = 0.0;
  double delta_T = 0.0;
  /// Share of steps n in [T/10, T] with phi_minus < phi_plus.
  double ordered_fraction = 0.0;
};

/// One simulated configuration: per-seed summaries plus aggregates.
struct FigureRun {
  std::string label;
  std::string model;  // human-readable model description
  double mu = 0.0, alpha = 0.0, kappa = 0.0, beta = 0.0;
  double variance = 0.0;  // Var(D) computed from the law
  double delta = 0.0;
  double theta_minus = 0.0, theta_plus = 0.0;
  std::int64_t T = 0;
  std::int64_t x0 = 0;
  double phi = 0.0;  // reference steady-state mean
  std::string phi_source;
  std::vector<SeedSummary> seeds;
  std::vector<std::string> files;

  double share_within(double rel) const;        // seeds with |phi_T - phi| <= rel phi
  double share_ordered(double level) const;     // seeds with ordered_fraction >= level
  double std_phi() const;
  double std_phi_minus() const;
  double std_phi_plus() const;
};

struct FigureReport {
  int figure = 0;
  std::vector<FigureRun> runs;
};

/// Per-seed summary of one replication run over [0, T].
SeedSummary summarize_seed(const ChainSpec& spec, const Observable& F, const LyapunovData& lyap, double theta_minus,
                           double theta_plus, std::int64_t T, std::uint64_t master_seed, std::uint64_t replication);

/// Writes the trajectory (replication 0) and per-seed CSVs of figure 1, 2 or
/// 3 into out_dir. Unknown ids throw InvalidArgument.
FigureReport reproduce_figure(int figure_id, const std::filesystem::path& out_dir, const FigureOptions& options = {});

/// Trajectory CSV header shared with the simulate subcommand.
const std::vector<std::string>& trajectory_header();

void write_trajectory(const std::filesystem::path& file, const EstimatorSeries& series, double epsilon,
                      int precision = 17);

}  // namespace cvlab
