#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cvlab/chain.hpp"
#include "cvlab/parallel.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace cvlab;

TEST_CASE("reflection at the origin") {
  CHECK(reflect_step(5, -12) == 0);
  CHECK(reflect_step(0, 9) == 9);
  CHECK(reflect_step(3, -3) == 0);
  CHECK(reflect_step(7, -3) == 4);
}

TEST_CASE("queue increments for mu=4, alpha=3, kappa=2") {
  const IncrementLaw law = make_queue_increments(4, 3, 2);
  // Product law of A in {0, 9} and S in {0, 12}, each nonzero w.p. 1/3.
  const std::vector<Atom> expected{{-12, 2.0 / 9}, {-3, 1.0 / 9}, {0, 4.0 / 9}, {9, 2.0 / 9}};
  REQUIRE(law.atoms().size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) {
    CHECK(law.atoms()[i].value == doctest::Approx(expected[i].value));
    CHECK(law.atoms()[i].prob == doctest::Approx(expected[i].prob).epsilon(1e-14));
  }
  CHECK(law.step() == doctest::Approx(3.0));
  CHECK(law.drift() == doctest::Approx(1.0).epsilon(1e-14));
  // E[D^2] = (144*2 + 9 + 81*2) / 9 = 51.
  CHECK(law.variance() == doctest::Approx(50.0).epsilon(1e-13));
  CHECK(law.min_step() == -4);
  CHECK(law.max_step() == 3);
}

TEST_CASE("queue variance follows (mu^2 + alpha^2) kappa") {
  CHECK(make_queue_increments(4, 3, 1).variance() == doctest::Approx(25.0).epsilon(1e-13));
  CHECK(make_queue_increments(4, 3, 5).variance() == doctest::Approx(125.0).epsilon(1e-13));
  CHECK(make_queue_increments(4, 3, 5).drift() == doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("increment law validation") {
  CHECK_KIND(IncrementLaw({{1, 0.5}, {-1, 0.4}}), ErrorKind::InvalidModel);
  CHECK_KIND(IncrementLaw({{-1, 0.5}, {-2, 0.5}}), ErrorKind::InvalidModel);
  CHECK_KIND(IncrementLaw({{1, 0.5}, {-1, 0.5}}), ErrorKind::InvalidModel);  // zero drift
  CHECK_KIND(IncrementLaw({{1, 0.3}, {-1, 0.7}}, 0.4), ErrorKind::NonLatticeIncrements);
  CHECK_KIND(make_queue_increments(4, std::sqrt(2.0), 2), ErrorKind::NonLatticeIncrements);
  CHECK_KIND(mm1_increments(0.5), ErrorKind::InvalidModel);
  CHECK_KIND(make_queue_increments(3, 4, 2), ErrorKind::InvalidModel);
}

TEST_CASE("MM1 is the +-1 walk") {
  const ChainSpec s = ChainSpec::mm1(0.3);
  REQUIRE(s.law().atoms().size() == 2);
  CHECK(s.law().atoms()[0].value == -1.0);
  CHECK(s.law().atoms()[0].prob == doctest::Approx(0.7));
  CHECK(s.law().atoms()[1].value == 1.0);
  CHECK(s.law().step() == 1.0);
  CHECK(s.load() == doctest::Approx(0.3 / 0.7));
}

TEST_CASE("lattice step inference") {
  const std::vector<double> a{9, -12, -3, 0};
  REQUIRE(lattice_step(a));
  CHECK(*lattice_step(a) == doctest::Approx(3.0));
  const std::vector<double> b{0.5, -1.5};
  CHECK(*lattice_step(b) == doctest::Approx(0.5));
  const std::vector<double> c{1.0, std::sqrt(2.0)};
  CHECK_FALSE(lattice_step(c).has_value());
}

TEST_CASE("seed mixing is fixed") {
  // splitmix64 finalizer of 0 is a published constant.
  CHECK(mix64(0) == 0xE220A8397B1DCDAFULL);
  CHECK(stream_seed(1, 0) == mix64(1 ^ mix64(0)));
  std::set<std::uint64_t> seen;
  for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(stream_seed(7, i));
  CHECK(seen.size() == 1000);
}

TEST_CASE("paths move by atoms of the law") {
  const ChainSpec s = ChainSpec::reflected(make_queue_increments(4, 3, 2), 5);
  const PathSample p = simulate_path(s, 20000, 11, 3);
  REQUIRE(p.states.size() == 20001);
  CHECK(p.states.front() == 5);
  for (std::size_t k = 0; k + 1 < p.states.size(); ++k) {
    bool ok = false;
    for (auto d : s.law().steps()) ok = ok || reflect_step(p.states[k], d) == p.states[k + 1];
    REQUIRE(ok);
  }
}

TEST_CASE("one MM1 step") {
  const ChainSpec s = ChainSpec::mm1(0.4);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const PathSample p = simulate_path(s, 1, seed, 0);
    REQUIRE(p.states.size() == 2);
    CHECK((p.states[1] == 0 || p.states[1] == 1));
    const PathSample q = simulate_path(s.with_x0(4), 1, seed, 0);
    CHECK((q.states[1] == 3 || q.states[1] == 5));
  }
}

TEST_CASE("paths are reproducible and independent of scheduling") {
  const ChainSpec s = ChainSpec::mm1(9.0 / 19);
  const PathSample a = simulate_path(s, 5000, 42, 17);
  const PathSample b = simulate_path(s, 5000, 42, 17);
  CHECK(a.states == b.states);
  CHECK(a.seed == stream_seed(42, 17));
  const PathSample c = simulate_path(s, 5000, 42, 18);
  CHECK(a.states != c.states);

  // Streamed and stored paths agree.
  PathStream stream(s, 42, 17);
  bool same = true;
  for (std::size_t k = 1; k < a.states.size(); ++k) same = same && stream.advance() == a.states[k];
  CHECK(same);

  // Replication totals do not depend on the worker count.
  auto totals = [&](unsigned threads) {
    std::vector<std::int64_t> out(64);
    parallel_for(out.size(), threads, [&](std::size_t r) { out[r] = simulate_path(s, 2000, 9, r).states.back(); });
    return out;
  };
  CHECK(totals(1) == totals(4));
}

TEST_CASE("up-move frequency and occupation law of MM1") {
  const double alpha = 1.0 / 3.0, rho = 0.5;
  const std::int64_t n = 1'000'000;
  const PathSample p = simulate_path(ChainSpec::mm1(alpha), n, 2024, 0);

  std::int64_t ups = 0;
  for (std::int64_t k = 0; k < n; ++k) ups += p.states[k + 1] > p.states[k];
  // An up-coin always moves the walk up, also at 0, so the up-moves are
  // exactly the successes of n Bernoulli(alpha) trials.
  std::int64_t coin_up = 0;
  {
    ReplicationStream rng(2024, 0);
    const ChainSpec spec = ChainSpec::mm1(alpha);
    const IncrementLaw& law = spec.law();
    for (std::int64_t k = 0; k < n; ++k) coin_up += law.steps()[law.sample_index(rng.uniform())] > 0;
  }
  CHECK(coin_up == ups);
  const double freq = static_cast<double>(ups) / n;
  CHECK(std::abs(freq - alpha) <= 4.0 * std::sqrt(alpha * (1 - alpha) / n));

  // Occupation frequencies with batch-means standard errors (the samples
  // are correlated, so the binomial error would be too small).
  const int batches = 100;
  const std::int64_t per = n / batches;
  for (int i = 0; i < 4; ++i) {
    std::vector<double> means(batches, 0.0);
    for (int b = 0; b < batches; ++b) {
      std::int64_t hits = 0;
      for (std::int64_t k = b * per; k < (b + 1) * per; ++k) hits += p.states[k] == i;
      means[b] = static_cast<double>(hits) / per;
    }
    double m = 0.0, v = 0.0;
    for (double x : means) m += x / batches;
    for (double x : means) v += (x - m) * (x - m) / (batches - 1);
    const double se = std::sqrt(v / batches);
    CHECK_MESSAGE(std::abs(m - oracle::geometric_pi(rho, i)) <= 4.0 * se, "state ", i, " freq ", m);
  }
}

TEST_CASE("first passage") {
  const ChainSpec s = ChainSpec::mm1(0.3);
  // Find a stream whose first increment is negative; from 0 it returns at once.
  for (std::uint64_t r = 0; r < 20; ++r) {
    ReplicationStream rng(5, r);
    const bool down = s.law().steps()[s.law().sample_index(rng.uniform())] < 0;
    if (!down) continue;
    const FirstPassageResult fp = first_passage(s, 0, 5, r);
    CHECK(fp.tau0 == 1);
    CHECK(fp.area == 0.0);
    break;
  }
  CHECK_KIND(first_passage(s, 1000, 5, 0, 10), ErrorKind::HorizonExceeded);

  // For MM1 started at x >= 1, tau0 is a sum of x independent ladder times
  // of mean 1/delta, so E tau0 = x/delta exactly.
  const int reps = 4000;
  const std::int64_t x0 = 20;
  const double delta = 0.4;
  double m = 0.0, m2 = 0.0;
  for (int r = 0; r < reps; ++r) {
    const double t = static_cast<double>(first_passage(s, x0, 77, r).tau0);
    m += t / reps;
    m2 += t * t / reps;
  }
  const double se = std::sqrt((m2 - m * m) / reps);
  CHECK(std::abs(m - x0 / delta) <= 4.0 * se);
}
