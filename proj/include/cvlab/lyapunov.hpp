#pragma once

// Observables, Lyapunov data for the drift condition PV <= V - W + b 1_C,
// the control variate H = V - PV, and the running estimator pair
//   phi_n^- = L_n(F) - theta_minus * Delta_n,
//   phi_n^+ = L_n(F) - theta_plus  * Delta_n,
// where Delta_n is the running average of H.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "cvlab/chain.hpp"

namespace cvlab {

class Observable {
 public:
  enum class Kind { Identity, Exponential, Tabulated };

  static Observable identity();
  static Observable exponential(double beta);
  /// values[i] is F at lattice index i.
  static Observable tabulated(std::vector<double> values);

  /// Copy whose evaluation subtracts phi.
  Observable centered(double phi) const;
  /// Copy without centering.
  Observable uncentered() const;

  Kind kind() const { return kind_; }
  double beta() const { return beta_; }
  bool is_centered() const { return centered_; }
  double center_value() const { return center_; }
  std::span<const double> table() const { return values_; }

  /// F at lattice index i of a lattice with the given step (value i * step).
  double operator()(std::int64_t index, double step) const {
    double raw = 0.0;
    switch (kind_) {
      case Kind::Identity: raw = static_cast<double>(index) * step; break;
      case Kind::Exponential: raw = std::exp(beta_ * static_cast<double>(index) * step); break;
      case Kind::Tabulated: raw = table_at(index); break;
    }
    return centered_ ? raw - center_ : raw;
  }

  /// F on indices 0..count-1.
  std::vector<double> tabulate(std::size_t count, double step) const;

 private:
  double table_at(std::int64_t index) const;

  Kind kind_ = Kind::Identity;
  double beta_ = 0.0;
  std::vector<double> values_;
  bool centered_ = false;
  double center_ = 0.0;
};

/// V(x) = 1 + (x^2 + delta x) / (2 delta).
double fluid_V(double x, double delta);

/// R(x) = PV(x) - V(x) + x for the fluid V, as the exact finite sum
/// sigma^2/(2 delta) - E[((x+D)^2 + delta (x+D)) 1(x < -D)] / (2 delta).
double remainder_R(double x, const IncrementLaw& law);

/// Exact one-step expectation (Pg)(x) = sum_d p_d g([x + d]_+) at lattice index x.
template <class Fn>
double one_step_expectation(const IncrementLaw& law, std::int64_t index, Fn&& g) {
  double acc = 0.0;
  const double h = law.step();
  auto steps = law.steps();
  auto atoms = law.atoms();
  for (std::size_t j = 0; j < atoms.size(); ++j) {
    acc += atoms[j].prob * g(static_cast<double>(reflect_step(index, steps[j])) * h);
  }
  return acc;
}

/// Lyapunov quadruple (V, W, b, C) together with H = V - PV and
/// R = PV - V + x. Functions take physical state values.
class LyapunovData {
 public:
  enum class Kind { Fluid, Exponential };

  Kind kind() const { return kind_; }
  const IncrementLaw& law() const { return law_; }
  double drift() const { return law_.drift(); }

  double V(double x) const;
  double W(double x) const;
  double PV(std::int64_t index) const { return one_step_expectation(law_, index, [this](double y) { return V(y); }); }
  /// Closed form: x - R(x) for the fluid function, W(x) - b 1_C(x) for the
  /// exponential one. Agrees with V - PV on the lattice.
  double H(double x) const;
  double R(double x) const;
  /// Fluid value function x^2 / (2 delta).
  double J(double x) const { return 0.5 * x * x / drift(); }

  double b() const { return b_; }
  /// Small set as lattice indices.
  std::span<const std::int64_t> small_set() const { return small_set_; }
  bool in_small_set(std::int64_t index) const;

  /// Exponential case only.
  double scale_k() const { return k_; }
  double beta() const { return beta_; }

  friend LyapunovData fluid_lyapunov(const IncrementLaw& law);
  friend LyapunovData mm1_exponential_lyapunov(double alpha, double beta);

 private:
  explicit LyapunovData(IncrementLaw law) : law_(std::move(law)) {}

  Kind kind_ = Kind::Fluid;
  IncrementLaw law_;
  double b_ = 0.0;
  std::vector<std::int64_t> small_set_;
  double k_ = 0.0;
  double beta_ = 0.0;
  double h0_ = 0.0;  // H(0) for the exponential case
};

/// V = 1 + (x^2 + delta x)/(2 delta), W = 1 + x/2 for a reflected walk.
/// C collects the lattice points where R(x) + 1 > x/2, and b is the smallest
/// constant that makes the drift inequality hold on C.
LyapunovData fluid_lyapunov(const IncrementLaw& law);

/// V = k e^{beta x}, W = e^{beta x}, C = {0} for MM1(alpha), with
/// k = 1 / (1 - (alpha e^beta + (1 - alpha) e^{-beta})). Throws
/// BetaOutOfRange unless k > 0.
LyapunovData mm1_exponential_lyapunov(double alpha, double beta);

double control_variate_H(double x, const LyapunovData& lyap);

/// pi(F) for MM1(alpha): rho/(1-rho) for Identity, (1-rho)/(1-rho e^beta)
/// for Exponential(beta). Ignores the centering of F.
double analytic_mean_mm1(double alpha, const Observable& F);

/// sup_x |F(x)| / W(x) over lattice indices 0..max_index.
double weighted_norm(const Observable& F, const LyapunovData& lyap, std::int64_t max_index);

struct EstimatorSeries {
  std::vector<std::int64_t> n_grid;
  std::vector<double> phi_n;
  std::vector<double> phi_minus;
  std::vector<double> phi_plus;
  std::vector<double> delta_n;
  double theta_minus = 0.0;
  double theta_plus = 0.0;
};

/// Streaming form of running_estimates: feed states in order and take
/// snapshots. Kahan-compensated sums keep long runs accurate.
class EstimatorAccumulator {
 public:
  EstimatorAccumulator(const Observable& F, const LyapunovData& lyap, double step)
      : F_(&F), lyap_(&lyap), step_(step) {}

  void push(std::int64_t index) {
    add(sum_f_, comp_f_, (*F_)(index, step_));
    add(sum_h_, comp_h_, lyap_->H(static_cast<double>(index) * step_));
    ++count_;
  }
  std::int64_t count() const { return count_; }
  double mean_f() const { return sum_f_ / static_cast<double>(count_); }
  double mean_h() const { return sum_h_ / static_cast<double>(count_); }

 private:
  static void add(double& sum, double& comp, double x) {
    double y = x - comp;
    double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }

  const Observable* F_;
  const LyapunovData* lyap_;
  double step_;
  double sum_f_ = 0.0, comp_f_ = 0.0;
  double sum_h_ = 0.0, comp_h_ = 0.0;
  std::int64_t count_ = 0;
};

/// L_n averages use Phi(0), ..., Phi(n-1). Requires theta_minus > 1 and
/// theta_plus <= 1, unless both are zero (control switched off); a negative
/// theta_plus gives the opposite sign convention F + |theta| H.
EstimatorSeries running_estimates(const PathSample& path, double step, const Observable& F,
                                  const LyapunovData& lyap, double theta_minus, double theta_plus,
                                  std::span<const std::int64_t> n_grid);

/// Same estimator driven directly by a stream, without storing the path.
EstimatorSeries running_estimates(PathStream& stream, double step, const Observable& F,
                                  const LyapunovData& lyap, double theta_minus, double theta_plus,
                                  std::span<const std::int64_t> n_grid);

void validate_thetas(double theta_minus, double theta_plus);

struct Interval {
  double lo;
  double hi;
  bool contains(double x) const { return lo <= x && x <= hi; }
};

/// [phi_minus - eps, phi_plus + eps] per grid point.
std::vector<Interval> confidence_band(const EstimatorSeries& series, double epsilon);

/// n_grid of `points` values k * n / points (deduplicated, always ending at n).
std::vector<std::int64_t> uniform_n_grid(std::int64_t n, std::int64_t points);

}  // namespace cvlab
