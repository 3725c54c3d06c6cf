#include "cvlab/chain.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "cvlab/error.hpp"

namespace cvlab {
namespace {

constexpr double kLatticeTol = 1e-9;
constexpr std::int64_t kMaxDenominator = 1'000'000;

// Best rational approximation p/q of x with q <= kMaxDenominator, by
// continued fractions; nullopt if none is within tol.
std::optional<std::pair<std::int64_t, std::int64_t>> rationalize(double x, double tol) {
  std::int64_t p0 = 0, q0 = 1, p1 = 1, q1 = 0;
  double r = x;
  for (int iter = 0; iter < 64; ++iter) {
    double a = std::floor(r);
    if (std::abs(a) > 1e15) break;
    auto ai = static_cast<std::int64_t>(a);
    std::int64_t p2 = ai * p1 + p0;
    std::int64_t q2 = ai * q1 + q0;
    if (q2 > kMaxDenominator) break;
    if (std::abs(static_cast<double>(p2) / static_cast<double>(q2) - x) <= tol) return std::pair{p2, q2};
    p0 = p1;
    q0 = q1;
    p1 = p2;
    q1 = q2;
    double frac = r - a;
    if (frac <= 0.0) break;
    r = 1.0 / frac;
  }
  return std::nullopt;
}

bool on_lattice(double value, double step) {
  double k = value / step;
  return std::abs(k - std::round(k)) <= kLatticeTol;
}

}  // namespace

std::optional<double> lattice_step(std::span<const double> values) {
  double smallest = 0.0;
  for (double v : values) {
    if (v != 0.0 && (smallest == 0.0 || std::abs(v) < smallest)) smallest = std::abs(v);
  }
  if (smallest == 0.0) return std::nullopt;

  std::vector<std::pair<std::int64_t, std::int64_t>> ratios;
  std::int64_t denominators = 1;
  for (double v : values) {
    double r = v / smallest;
    auto pq = rationalize(r, kLatticeTol * std::max(1.0, std::abs(r)));
    if (!pq) return std::nullopt;
    denominators = std::lcm(denominators, pq->second);
    if (denominators > kMaxDenominator) return std::nullopt;
    ratios.push_back(*pq);
  }
  std::int64_t g = 0;
  for (auto [p, q] : ratios) g = std::gcd(g, p * (denominators / q));
  double step = smallest * static_cast<double>(g) / static_cast<double>(denominators);
  for (double v : values) {
    if (!on_lattice(v, step)) return std::nullopt;
  }
  return step;
}

IncrementLaw::IncrementLaw(std::vector<Atom> atoms) { init(std::move(atoms), std::nullopt); }

IncrementLaw::IncrementLaw(std::vector<Atom> atoms, double step) { init(std::move(atoms), step); }

void IncrementLaw::init(std::vector<Atom> atoms, std::optional<double> step) {
  if (atoms.empty()) fail(ErrorKind::InvalidModel, "increment law has no atoms");
  std::map<double, double> merged;
  double total = 0.0;
  for (const Atom& a : atoms) {
    if (!std::isfinite(a.value) || !(a.prob > 0.0) || a.prob > 1.0) {
      std::ostringstream msg;
      msg << "atom (" << a.value << ", " << a.prob << ") needs a finite value and prob in (0, 1]";
      fail(ErrorKind::InvalidModel, msg.str());
    }
    merged[a.value] += a.prob;
    total += a.prob;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "atom probabilities sum to " << total;
    fail(ErrorKind::InvalidModel, msg.str());
  }
  atoms_.clear();
  for (auto [v, p] : merged) atoms_.push_back({v, p});
  if (atoms_.back().value <= 0.0) fail(ErrorKind::InvalidModel, "increment law needs a positive atom");

  std::vector<double> values;
  for (const Atom& a : atoms_) values.push_back(a.value);
  if (step) {
    if (!(*step > 0.0)) fail(ErrorKind::InvalidModel, "lattice step must be positive");
    for (double v : values) {
      if (!on_lattice(v, *step)) {
        std::ostringstream msg;
        msg << "atom value " << v << " is not a multiple of step " << *step;
        fail(ErrorKind::NonLatticeIncrements, msg.str());
      }
    }
    step_ = *step;
  } else {
    auto inferred = lattice_step(values);
    if (!inferred) fail(ErrorKind::NonLatticeIncrements, "atom values do not share a lattice");
    step_ = *inferred;
  }

  steps_.clear();
  cdf_.clear();
  double mean = 0.0, acc = 0.0;
  for (const Atom& a : atoms_) {
    steps_.push_back(static_cast<std::int64_t>(std::llround(a.value / step_)));
    mean += a.value * a.prob;
    acc += a.prob;
    cdf_.push_back(acc);
  }
  cdf_.back() = 1.0;
  mean_ = mean;
  double var = 0.0;
  for (const Atom& a : atoms_) var += (a.value - mean) * (a.value - mean) * a.prob;
  variance_ = var;
  if (!(mean_ < 0.0)) {
    std::ostringstream msg;
    msg << "mean increment " << mean_ << " must be strictly negative";
    fail(ErrorKind::InvalidModel, msg.str());
  }
}

IncrementLaw mm1_increments(double alpha) {
  if (!(alpha > 0.0 && alpha < 0.5)) fail(ErrorKind::InvalidModel, "MM1 needs alpha in (0, 1/2)");
  return IncrementLaw({{-1.0, 1.0 - alpha}, {1.0, alpha}}, 1.0);
}

IncrementLaw make_queue_increments(double mu, double alpha, double kappa) {
  if (!(mu > alpha && alpha > 0.0 && kappa > 0.0)) {
    fail(ErrorKind::InvalidModel, "queue increments need mu > alpha > 0 and kappa > 0");
  }
  const double p = 1.0 / (1.0 + kappa);
  const double arrival = (1.0 + kappa) * alpha;
  const double service = (1.0 + kappa) * mu;
  std::vector<Atom> atoms{
      {0.0, (1.0 - p) * (1.0 - p)},
      {arrival, p * (1.0 - p)},
      {-service, (1.0 - p) * p},
      {arrival - service, p * p},
  };
  return IncrementLaw(std::move(atoms));
}

ChainSpec::ChainSpec(IncrementLaw law, std::optional<double> alpha, std::int64_t x0)
    : law_(std::move(law)), mm1_alpha_(alpha), x0_(x0) {
  if (x0 < 0) fail(ErrorKind::InvalidModel, "initial state must be nonnegative");
}

ChainSpec ChainSpec::mm1(double alpha, std::int64_t x0) { return ChainSpec(mm1_increments(alpha), alpha, x0); }

ChainSpec ChainSpec::reflected(IncrementLaw law, std::int64_t x0) {
  return ChainSpec(std::move(law), std::nullopt, x0);
}

double ChainSpec::load() const {
  if (!mm1_alpha_) fail(ErrorKind::InvalidArgument, "load is defined for MM1 only");
  return *mm1_alpha_ / (1.0 - *mm1_alpha_);
}

ChainSpec ChainSpec::with_x0(std::int64_t x0) const { return ChainSpec(law_, mm1_alpha_, x0); }

PathSample simulate_path(const ChainSpec& spec, std::int64_t n, std::uint64_t master_seed,
                         std::uint64_t replication_index) {
  if (n < 1) fail(ErrorKind::InvalidArgument, "horizon n must be >= 1");
  PathSample out;
  out.seed = stream_seed(master_seed, replication_index);
  out.replication_index = replication_index;
  out.states.reserve(static_cast<std::size_t>(n) + 1);
  PathStream stream(spec, master_seed, replication_index);
  out.states.push_back(stream.state());
  for (std::int64_t k = 0; k < n; ++k) out.states.push_back(stream.advance());
  return out;
}

FirstPassageResult first_passage(const ChainSpec& spec, std::int64_t x0, std::uint64_t master_seed,
                                 std::uint64_t replication_index, std::int64_t cap) {
  if (x0 < 0) fail(ErrorKind::InvalidArgument, "x0 must be nonnegative");
  PathStream stream(spec, x0, master_seed, replication_index);
  std::int64_t index_sum = x0;
  for (std::int64_t k = 1; k <= cap; ++k) {
    if (stream.advance() == 0) {
      return {k, static_cast<double>(index_sum) * spec.law().step()};
    }
    index_sum += stream.state();
  }
  std::ostringstream msg;
  msg << "no return to 0 within " << cap << " steps from x0 = " << x0;
  fail(ErrorKind::HorizonExceeded, msg.str());
}

}  // namespace cvlab
