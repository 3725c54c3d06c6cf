#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "cvlab/csv.hpp"
#include "cvlab/ldp_lab.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cvlab;

namespace {

TruncatedKernel toy() { return TruncatedKernel::from_matrix(oracle::uniform_toy()); }
const Observable kToyF = Observable::tabulated({0.0, 1.0});

}  // namespace

TEST_CASE("exact tails on the two-state toy") {
  CHECK(exact_tail_dp(toy(), {kToyF, 0, 4, 0.25, TailSide::Lower}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(exact_tail_dp(toy(), {kToyF, 0, 7, 1.0, TailSide::Lower}) == 1.0);
  CHECK(exact_tail_dp(toy(), {kToyF, 0, 7, -0.01, TailSide::Lower}) == 0.0);
  CHECK(exact_tail_dp(toy(), {kToyF, 0, 7, 1.01, TailSide::Upper}) == 0.0);
  // From state 0 the sum is Binomial(n - 1, 1/2).
  for (int n : {5, 20, 101}) {
    for (double c : {0.1, 0.3, 0.45}) {
      const int k = static_cast<int>(std::floor(n * c + 1e-9));
      CHECK(exact_tail_dp(toy(), {kToyF, 0, n, c, TailSide::Lower}) ==
            doctest::Approx(oracle::binomial_cdf_half(n - 1, k)).epsilon(1e-12));
    }
  }
}

TEST_CASE("exact tails against path enumeration") {
  const TruncatedKernel K = truncate_kernel(ChainSpec::mm1(0.4), 5);
  const Observable F = Observable::identity().centered(0.7);
  const auto Fv = F.tabulate(K.size(), 1.0);
  for (int x0 : {0, 2}) {
    for (int n : {1, 3, 8}) {
      for (double c : {-0.7, 0.0, 0.55, 1.3}) {
        for (TailSide side : {TailSide::Lower, TailSide::Upper}) {
          const double dp = exact_tail_dp(K, {F, x0, n, c, side});
          const double brute = oracle::enumerate_tail(K.dense(), Fv, x0, n, n * c, side == TailSide::Lower);
          CHECK(dp == doctest::Approx(brute).epsilon(1e-12));
        }
      }
    }
  }
  // A non-identity lattice: steps of 3 on the queue walk.
  const TruncatedKernel Q = truncate_kernel(ChainSpec::reflected(make_queue_increments(4, 3, 2)), 6);
  const Observable G = Observable::identity();
  const auto Gv = G.tabulate(Q.size(), Q.step());
  for (double c : {0.0, 3.0, 4.5, 9.0}) {
    const double dp = exact_tail_dp(Q, {G, 1, 6, c, TailSide::Lower});
    CHECK(dp == doctest::Approx(oracle::enumerate_tail(Q.dense(), Gv, 1, 6, 6 * c, true)).epsilon(1e-12));
  }
}

TEST_CASE("DP invariants") {
  const TruncatedKernel K = truncate_kernel(ChainSpec::mm1(1.0 / 3), 30);
  const Observable F = Observable::identity().centered(1.0);
  SUBCASE("marginal is the row of P^n") {
    for (int n : {1, 7, 40}) {
      const SumDistribution d = exact_sum_distribution(K, F, 2, n);
      Matrix Pn = Matrix::Identity(K.size(), K.size());
      for (int k = 0; k < n; ++k) Pn = Pn * K.dense();
      CHECK((d.state_marginal() - Pn.row(2).transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }
  SUBCASE("lower and strict upper tails are complementary") {
    for (int n : {10, 33}) {
      const SumDistribution d = exact_sum_distribution(K, F, 0, n);
      for (double c : {-0.9, -0.3, 0.0, 0.4, 2.0}) {
        const double lower = exact_tail_dp(K, {F, 0, n, c, TailSide::Lower});
        // The sum is n offset + span K; its first lattice value above n c is at K = b + 1.
        const auto b = scaled_threshold(d, c, TailSide::Lower);
        const double next = d.offset + d.span * static_cast<double>(b + 1) / n;
        const double strict = exact_tail_dp(K, {F, 0, n, next, TailSide::Upper});
        CHECK(std::abs(lower + strict - 1.0) <= 1e-12);
      }
    }
  }
  SUBCASE("eventually decreasing in n below the mean") {
    std::vector<double> p;
    for (int n = 5; n <= 120; n += 5) p.push_back(exact_tail_dp(K, {F, 0, n, -0.5, TailSide::Lower}));
    std::size_t n0 = p.size() - 1;
    while (n0 > 0 && p[n0 - 1] > p[n0]) --n0;
    CHECK(n0 < p.size() / 2);  // the monotone stretch covers most of the scan
    for (std::size_t i = n0 + 1; i < p.size(); ++i) CHECK(p[i] < p[i - 1]);
  }
  SUBCASE("failures") {
    const Observable irrational = Observable::tabulated({0.0, 1.0, std::sqrt(2.0), 3.0});
    const TruncatedKernel K3 = truncate_kernel(ChainSpec::mm1(0.3), 3);
    CHECK_KIND(exact_tail_dp(K3, {irrational, 0, 5, 1.0, TailSide::Lower}), ErrorKind::NonLatticeObservable);
    try {
      exact_tail_dp(K, {F, 0, 500, 0.0, TailSide::Lower}, 1e4);
      FAIL("expected BudgetExceeded");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::BudgetExceeded);
      CHECK(std::string(e.what()).find("budget") != std::string::npos);
    }
  }
}

TEST_CASE("Monte Carlo tails") {
  SUBCASE("sure and impossible events") {
    const ChainSpec s = ChainSpec::mm1(0.3);
    CHECK(mc_tail(s, {Observable::identity(), 0, 10, 100.0, TailSide::Lower}, 1, 5).p_hat == 1.0);
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      CHECK(mc_tail(s, {Observable::identity(), 0, 10, -1.0, TailSide::Lower}, 50, seed).p_hat == 0.0);
      CHECK(mc_tail(s, {Observable::identity(), 0, 10, 11.0, TailSide::Lower}, 50, seed).p_hat == 1.0);
    }
    CHECK_KIND(mc_tail(s, {Observable::identity(), 0, 10, 1.0, TailSide::Lower}, 0, 1), ErrorKind::InvalidArgument);
  }
  SUBCASE("toy") {
    const TailEstimate e = mc_tail(toy(), {kToyF, 0, 4, 0.25, TailSide::Lower}, 100000, 7);
    CHECK(e.std_err == doctest::Approx(std::sqrt(e.p_hat * (1 - e.p_hat) / 100000)));
    CHECK(std::abs(e.p_hat - 0.5) <= 4 * e.std_err);
  }
  SUBCASE("MM1 against the exact DP") {
    const ChainSpec s = ChainSpec::mm1(1.0 / 3);
    const TailQuery q{Observable::identity().centered(1.0), 0, 60, -0.5, TailSide::Lower};
    const double exact = exact_tail_dp(truncate_kernel(s, 60), q);
    const TailEstimate e = mc_tail(s, q, 100000, 11, 2);
    CHECK(std::abs(e.p_hat - exact) <= 4 * std::sqrt(exact * (1 - exact) / 100000));
    // Same answer for any worker count.
    CHECK(mc_tail(s, q, 20000, 11, 1).p_hat == mc_tail(s, q, 20000, 11, 3).p_hat);
  }
}

TEST_CASE("decay slope fits") {
  std::vector<std::pair<std::int64_t, double>> pure, corrected;
  for (std::int64_t n : {10, 20, 40, 80}) {
    pure.push_back({n, std::exp(-2.0 * n)});
    corrected.push_back({n, std::exp(-2.0 * n) / std::sqrt(2 * M_PI * n)});
  }
  CHECK(ldp_slope(pure).slope == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(ldp_slope(corrected).corrected_slope == doctest::Approx(-2.0).epsilon(1e-6));
  CHECK(ldp_slope(corrected).corrected_intercept == doctest::Approx(-0.5 * std::log(2 * M_PI)).epsilon(1e-6));
  pure[2].second = 0.0;
  try {
    ldp_slope(pure);
    FAIL("expected ZeroProbability");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ZeroProbability);
    CHECK(std::string(e.what()).find("40") != std::string::npos);
  }
  pure.resize(2);
  CHECK_KIND(ldp_slope(pure), ErrorKind::InvalidArgument);
}

TEST_CASE("seed summaries") {
  const ChainSpec s = ChainSpec::reflected(make_queue_increments(4, 3, 2));
  const LyapunovData lyap = fluid_lyapunov(s.law());
  const Observable F = Observable::identity();
  const SeedSummary sum = summarize_seed(s, F, lyap, 1.05, 1.0, 2000, 4, 9);
  // Matches the stored-path estimator at T.
  const PathSample path = simulate_path(s, 2000, 4, 9);
  const std::vector<std::int64_t> g{2000};
  const EstimatorSeries es = running_estimates(path, 3.0, F, lyap, 1.05, 1.0, g);
  CHECK(sum.phi_T == doctest::Approx(es.phi_n[0]).epsilon(1e-12));
  CHECK(sum.phi_minus_T == doctest::Approx(es.phi_minus[0]).epsilon(1e-12));
  CHECK(sum.phi_plus_T == doctest::Approx(es.phi_plus[0]).epsilon(1e-12));
  CHECK(sum.seed == stream_seed(4, 9));
  CHECK(sum.ordered_fraction >= 0.0);
  CHECK(sum.ordered_fraction <= 1.0);
}

TEST_CASE("figure reproduction plumbing") {
  const auto dir = testing::scratch_dir("fig");
  FigureOptions opt;
  opt.seeds = 4;
  opt.horizon = 3000;
  opt.trajectory_points = 50;
  const FigureReport r = reproduce_figure(2, dir, opt);
  CHECK(r.figure == 2);
  REQUIRE(r.runs.size() == 2);
  CHECK(r.runs[0].theta_minus == 1.05);
  CHECK(r.runs[0].theta_plus == 1.0);
  CHECK(r.runs[0].variance == doctest::Approx(50.0));
  CHECK(r.runs[1].variance == doctest::Approx(25.0));
  CHECK(r.runs[0].seeds.size() == 4);
  for (const FigureRun& run : r.runs) {
    for (const std::string& f : run.files) CHECK(std::filesystem::exists(dir / f));
  }
  const std::string text = testing::slurp(dir / r.runs[0].files.front());
  CHECK(text.rfind("n,phi_n,phi_minus,phi_plus,delta_n,band_lo,band_hi\n", 0) == 0);

  opt.threads = 3;
  const auto dir2 = testing::scratch_dir("fig");
  const FigureReport r2 = reproduce_figure(2, dir2, opt);
  for (const std::string& f : r.runs[0].files) CHECK(testing::slurp(dir / f) == testing::slurp(dir2 / f));
  CHECK_KIND(reproduce_figure(4, dir, opt), ErrorKind::InvalidArgument);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("CSV number formatting round-trips") {
  for (double x : {0.1, 1.0 / 3, 18.704966395497564, -2.5e-300, 6.02e23}) CHECK(std::stod(format_double(x)) == x);
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(std::nan("")) == "nan");
  CHECK(format_cell(CsvCell{std::int64_t{42}}) == "42");
}
