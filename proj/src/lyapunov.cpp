#include "cvlab/lyapunov.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cvlab/error.hpp"

namespace cvlab {

Observable Observable::identity() { return Observable{}; }

Observable Observable::exponential(double beta) {
  if (!(beta > 0.0)) fail(ErrorKind::InvalidArgument, "exponential observable needs beta > 0");
  Observable F;
  F.kind_ = Kind::Exponential;
  F.beta_ = beta;
  return F;
}

Observable Observable::tabulated(std::vector<double> values) {
  if (values.empty()) fail(ErrorKind::InvalidArgument, "tabulated observable needs values");
  Observable F;
  F.kind_ = Kind::Tabulated;
  F.values_ = std::move(values);
  return F;
}

Observable Observable::centered(double phi) const {
  Observable F = *this;
  F.centered_ = true;
  F.center_ = phi;
  return F;
}

Observable Observable::uncentered() const {
  Observable F = *this;
  F.centered_ = false;
  F.center_ = 0.0;
  return F;
}

double Observable::table_at(std::int64_t index) const {
  if (index < 0 || static_cast<std::size_t>(index) >= values_.size()) {
    std::ostringstream msg;
    msg << "tabulated observable has no value at index " << index;
    fail(ErrorKind::InvalidArgument, msg.str());
  }
  return values_[static_cast<std::size_t>(index)];
}

std::vector<double> Observable::tabulate(std::size_t count, double step) const {
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = (*this)(static_cast<std::int64_t>(i), step);
  return out;
}

double fluid_V(double x, double delta) { return 1.0 + (x * x + delta * x) / (2.0 * delta); }

double remainder_R(double x, const IncrementLaw& law) {
  const double delta = law.drift();
  double tail = 0.0;
  for (const Atom& a : law.atoms()) {
    if (x < -a.value) {
      const double y = x + a.value;
      tail += a.prob * (y * y + delta * y);
    }
  }
  return (law.variance() - tail) / (2.0 * delta);
}

double LyapunovData::V(double x) const {
  return kind_ == Kind::Fluid ? fluid_V(x, drift()) : k_ * std::exp(beta_ * x);
}

double LyapunovData::W(double x) const { return kind_ == Kind::Fluid ? 1.0 + 0.5 * x : std::exp(beta_ * x); }

double LyapunovData::H(double x) const {
  if (kind_ == Kind::Fluid) return x - remainder_R(x, law_);
  return x == 0.0 ? h0_ : std::exp(beta_ * x);
}

double LyapunovData::R(double x) const { return kind_ == Kind::Fluid ? remainder_R(x, law_) : x - H(x); }

bool LyapunovData::in_small_set(std::int64_t index) const {
  return std::find(small_set_.begin(), small_set_.end(), index) != small_set_.end();
}

LyapunovData fluid_lyapunov(const IncrementLaw& law) {
  LyapunovData lyap(law);
  lyap.kind_ = LyapunovData::Kind::Fluid;
  const double h = law.step();
  // Beyond the reflection zone R is the constant sigma^2 / (2 delta), so the
  // excess R + 1 - x/2 is eventually decreasing and the scan terminates.
  const double r_const = law.variance() / (2.0 * law.drift());
  const auto reflection_zone = -law.min_step();
  double b = 0.0;
  for (std::int64_t i = 0;; ++i) {
    const double x = static_cast<double>(i) * h;
    const double excess = remainder_R(x, law) + 1.0 - 0.5 * x;
    if (excess > 0.0) {
      lyap.small_set_.push_back(i);
      b = std::max(b, excess);
    }
    if (i >= reflection_zone && 0.5 * x >= r_const + 1.0) break;
  }
  lyap.b_ = b;
  return lyap;
}

LyapunovData mm1_exponential_lyapunov(double alpha, double beta) {
  IncrementLaw law = mm1_increments(alpha);
  const double m = alpha * std::exp(beta) + (1.0 - alpha) * std::exp(-beta);
  const double rho = alpha / (1.0 - alpha);
  if (!(beta > 0.0) || !(m < 1.0) || !(beta < std::abs(std::log(rho)))) {
    std::ostringstream msg;
    msg << "beta = " << beta << " outside (0, |log rho|) = (0, " << std::abs(std::log(rho)) << ")";
    fail(ErrorKind::BetaOutOfRange, msg.str());
  }
  LyapunovData lyap(law);
  lyap.kind_ = LyapunovData::Kind::Exponential;
  lyap.beta_ = beta;
  lyap.k_ = 1.0 / (1.0 - m);
  lyap.small_set_ = {0};
  // PV(0) = k (alpha e^beta + 1 - alpha).
  const double pv0 = lyap.k_ * (alpha * std::exp(beta) + (1.0 - alpha));
  lyap.h0_ = lyap.k_ - pv0;
  lyap.b_ = std::max(0.0, pv0 - lyap.k_ + 1.0);
  return lyap;
}

double control_variate_H(double x, const LyapunovData& lyap) { return lyap.H(x); }

double analytic_mean_mm1(double alpha, const Observable& F) {
  if (!(alpha > 0.0 && alpha < 0.5)) fail(ErrorKind::InvalidModel, "MM1 needs alpha in (0, 1/2)");
  const double rho = alpha / (1.0 - alpha);
  switch (F.kind()) {
    case Observable::Kind::Identity: return rho / (1.0 - rho);
    case Observable::Kind::Exponential: {
      if (!(F.beta() < std::abs(std::log(rho)))) {
        fail(ErrorKind::BetaOutOfRange, "pi(e^{beta x}) is infinite for beta >= |log rho|");
      }
      return (1.0 - rho) / (1.0 - rho * std::exp(F.beta()));
    }
    case Observable::Kind::Tabulated: break;
  }
  fail(ErrorKind::InvalidArgument, "no closed-form MM1 mean for tabulated observables");
}

double weighted_norm(const Observable& F, const LyapunovData& lyap, std::int64_t max_index) {
  double norm = 0.0;
  const double h = lyap.law().step();
  for (std::int64_t i = 0; i <= max_index; ++i) {
    norm = std::max(norm, std::abs(F(i, h)) / lyap.W(static_cast<double>(i) * h));
  }
  return norm;
}

void validate_thetas(double theta_minus, double theta_plus) {
  if (theta_minus == 0.0 && theta_plus == 0.0) return;
  if (!(theta_minus > 1.0) || !(theta_plus <= 1.0)) {
    std::ostringstream msg;
    msg << "need theta_minus > 1 and theta_plus <= 1 (or both 0), got " << theta_minus << ", " << theta_plus;
    fail(ErrorKind::InvalidArgument, msg.str());
  }
}

namespace {

template <class Next>
EstimatorSeries run_estimator(std::int64_t available, Next&& next_state, double step, const Observable& F,
                              const LyapunovData& lyap, double theta_minus, double theta_plus,
                              std::span<const std::int64_t> n_grid) {
  validate_thetas(theta_minus, theta_plus);
  if (available < 1) fail(ErrorKind::EmptyPath, "path has no states");
  EstimatorSeries out;
  out.theta_minus = theta_minus;
  out.theta_plus = theta_plus;
  EstimatorAccumulator acc(F, lyap, step);
  std::int64_t previous = 0;
  for (std::int64_t n : n_grid) {
    if (n <= previous || n > available) {
      std::ostringstream msg;
      msg << "n_grid must be increasing within [1, " << available << "], got " << n;
      fail(ErrorKind::InvalidArgument, msg.str());
    }
    while (acc.count() < n) acc.push(next_state());
    const double phi = acc.mean_f();
    const double delta = acc.mean_h();
    out.n_grid.push_back(n);
    out.phi_n.push_back(phi);
    out.delta_n.push_back(delta);
    out.phi_minus.push_back(phi - theta_minus * delta);
    out.phi_plus.push_back(phi - theta_plus * delta);
    previous = n;
  }
  return out;
}

}  // namespace

EstimatorSeries running_estimates(const PathSample& path, double step, const Observable& F,
                                  const LyapunovData& lyap, double theta_minus, double theta_plus,
                                  std::span<const std::int64_t> n_grid) {
  std::size_t k = 0;
  return run_estimator(
      static_cast<std::int64_t>(path.states.size()), [&] { return path.states[k++]; }, step, F, lyap,
      theta_minus, theta_plus, n_grid);
}

EstimatorSeries running_estimates(PathStream& stream, double step, const Observable& F,
                                  const LyapunovData& lyap, double theta_minus, double theta_plus,
                                  std::span<const std::int64_t> n_grid) {
  bool first = true;
  const std::int64_t unbounded = n_grid.empty() ? 1 : n_grid.back();
  return run_estimator(
      unbounded,
      [&] {
        if (first) {
          first = false;
          return stream.state();
        }
        return stream.advance();
      },
      step, F, lyap, theta_minus, theta_plus, n_grid);
}

std::vector<Interval> confidence_band(const EstimatorSeries& series, double epsilon) {
  if (!(epsilon >= 0.0)) fail(ErrorKind::InvalidArgument, "epsilon must be nonnegative");
  std::vector<Interval> band;
  band.reserve(series.n_grid.size());
  for (std::size_t k = 0; k < series.n_grid.size(); ++k) {
    band.push_back({series.phi_minus[k] - epsilon, series.phi_plus[k] + epsilon});
  }
  return band;
}

std::vector<std::int64_t> uniform_n_grid(std::int64_t n, std::int64_t points) {
  if (n < 1 || points < 1) fail(ErrorKind::InvalidArgument, "grid needs n >= 1 and points >= 1");
  std::vector<std::int64_t> grid;
  for (std::int64_t k = 1; k <= points; ++k) {
    std::int64_t v = (n * k) / points;
    if (v >= 1 && (grid.empty() || v > grid.back())) grid.push_back(v);
  }
  if (grid.empty() || grid.back() != n) grid.push_back(n);
  return grid;
}

}  // namespace cvlab
