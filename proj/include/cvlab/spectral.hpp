#pragma once

// Finite-truncation spectral theory of an additive functional sum_k F(Phi(k)):
// tilted kernels P_a = diag(e^{aF}) P, their principal eigenvalue lambda_a
// and eigenvectors, twisted (Doob-transformed) kernels, resolvent and
// potential-kernel identities, the log-moment generating function
// Lambda(a) = log lambda_a with its convex dual I(c), Poisson's equation,
// asymptotic variance, the optimal control coefficient and the
// Bahadur-Rao prefactor.
//
// Eigenvectors of tilted kernels routinely span thousands of orders of
// magnitude, so they are carried as logarithms.

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvlab/chain.hpp"
#include "cvlab/lyapunov.hpp"

namespace cvlab {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct KernelEntry {
  int col;
  double prob;
};

/// Row-stochastic kernel on lattice states {0, h, ..., N h}.
class TruncatedKernel {
 public:
  /// Validates nonnegativity, unit row sums (1e-12) and, unless disabled,
  /// irreducibility and aperiodicity.
  static TruncatedKernel from_matrix(Matrix P, double step = 1.0, bool check_ergodic = true);

  /// Empty kernel; only useful as a placeholder before assignment.
  TruncatedKernel() = default;

  std::size_t size() const { return static_cast<std::size_t>(P_.rows()); }
  int N() const { return static_cast<int>(P_.rows()) - 1; }
  double step() const { return step_; }
  const Matrix& dense() const { return P_; }
  double operator()(int i, int j) const { return P_(i, j); }
  std::span<const KernelEntry> row(int i) const { return rows_[static_cast<std::size_t>(i)]; }

 private:
  Matrix P_;
  double step_ = 1.0;
  std::vector<std::vector<KernelEntry>> rows_;
};

/// Kernel of the reflected walk on {0..N}; mass that would land at or above
/// N h is lumped onto N. Requires N > largest positive increment / h.
TruncatedKernel truncate_kernel(const ChainSpec& spec, int N);

/// True when every state reaches every other and the period is 1.
bool is_ergodic(const Matrix& P);

/// Invariant distribution by Grassmann-Taksar-Heyman state reduction
/// (subtraction-free, so small probabilities keep full relative accuracy).
Vector stationary(const TruncatedKernel& P);
Vector stationary(const Matrix& P);

/// Dense P_a[i][j] = e^{a F(i)} P[i][j]. Throws TiltOverflow when some
/// e^{a F(i)} is not representable.
Matrix scale_kernel(const TruncatedKernel& P, std::span<const double> F, double a);

/// Small function s and small measure nu; default s = 1_{0}, nu = delta_0.
struct SmallPair {
  Vector s;
  Vector nu;

  static SmallPair atom(std::size_t size, int state = 0);
  /// True if P(x, .) >= s(x) nu(.) entrywise.
  bool minorizes(const Matrix& P) const;
};

enum class Normalization { NuOne, PairNormalized };

struct GpeOptions {
  double tol = 1e-12;
  long max_iterations = 1'000'000;
  /// On power-iteration failure, accept a dense eigensolve instead.
  bool dense_fallback = true;
};

struct SpectralPoint {
  double a = 0.0;
  double lambda = 1.0;
  double log_lambda = 0.0;  // Lambda(a)
  Vector log_f_nu;          // nu(f) = 1
  Vector log_f_pair;        // mu(f) = 1, with mu(1) = 1
  Vector log_mu_pair;       // mu(1) = 1
  double right_residual = 0.0;  // ||P_a f - lambda f||_sup / (lambda ||f||_sup)
  double left_residual = 0.0;
  long iterations = 0;
  bool dense_fallback = false;

  Vector f_check(Normalization norm = Normalization::NuOne) const;
  Vector mu_check() const;
};

/// Principal eigen-triple of P_a = diag(e^{a F}) P by balanced power
/// iteration normalized with nu(f) = 1, plus the pair normalization
/// mu(f) = mu(1) = 1. For a == 0 the exact answer (1, 1, pi) is returned.
SpectralPoint gpe(const TruncatedKernel& P, std::span<const double> F, double a, const SmallPair& small,
                  const GpeOptions& options = {});

/// Same for an arbitrary nonnegative primitive matrix (no tilt parameter).
SpectralPoint gpe(const Matrix& P_a, const SmallPair& small, const GpeOptions& options = {});

/// Largest-real-part eigenvalue of a dense matrix (Hessenberg QR).
double dense_perron_eigenvalue(const Matrix& A);

/// P_h(x, y) = P(x, y) h(y) / sum_z P(x, z) h(z). Throws ZeroDenominator if
/// h is not strictly positive or a row normalizer vanishes.
Matrix twisted_kernel(const Matrix& P, const Vector& h);

/// Twist of P_a by the eigenvector of `point`, formed in log space so that
/// rows stay well defined where the eigenvector underflows.
Matrix twisted_kernel(const TruncatedKernel& P, std::span<const double> F, const SpectralPoint& point);

/// (2I - P_a)^{-1}, the closed form of sum_k 2^{-k-1} P_a^k. Throws
/// ResolventDivergent if lambda_a >= 2.
Matrix resolvent(const Matrix& P_a, double lambda_a);

/// G_a s, the solution of [gamma I - (R_a - s nu)] x = s with
/// gamma = 1/(2 - lambda_a), divided by nu(x).
Vector potential_eigenfunction(const Matrix& P_a, double lambda_a, const SmallPair& small);

/// Tilt evaluation used by the profile and the dual inversion.
struct TiltEvaluation {
  SpectralPoint point;
  Vector twisted_pi;       // stationary law of the twisted kernel
  double dLambda = 0.0;    // twisted stationary mean of F
  double dLambda_pair = 0.0;  // sum mu f F with the pair normalization (cross-check)
};

TiltEvaluation evaluate_tilt(const TruncatedKernel& P, std::span<const double> F, double a,
                             const SmallPair& small, const GpeOptions& options = {});

/// Lambda''(a) as the asymptotic variance of F under the twisted kernel.
double twisted_variance(const TruncatedKernel& P, std::span<const double> F, const TiltEvaluation& eval);

struct ProfilePoint {
  double a = 0.0;
  double Lambda = 0.0;
  double dLambda = 0.0;     // twisted stationary mean (canonical)
  double dLambda_fd = 0.0;  // central difference of Lambda
  double d2Lambda = 0.0;    // local central difference of dLambda
  std::string status = "ok";
  bool ok() const { return status == "ok"; }
};

struct DualPoint {
  double c = 0.0;
  double I = 0.0;
  double a_star = 0.0;
  double sigma_a_star = 0.0;
  SpectralPoint point;  // at a_star
};

/// Tabulated Lambda, its derivatives and the data needed to evaluate off the
/// grid (the kernel, F on the states, the small pair).
struct RateProfile {
  std::vector<ProfilePoint> points;
  TruncatedKernel kernel;
  std::vector<double> F;
  SmallPair small;
  GpeOptions options;

  /// dLambda at the left-most available grid point.
  double c_bar0() const;
  /// dLambda range over available points.
  std::pair<double, double> dual_range() const;
};

/// Evaluates every grid point (increasing, must contain 0); failures are
/// recorded in the point's status instead of aborting the sweep. Grid points
/// are independent and are computed on up to `threads` workers.
RateProfile lambda_profile(const TruncatedKernel& P, std::span<const double> F, std::span<const double> a_grid,
                           const SmallPair& small, const GpeOptions& options = {}, unsigned threads = 1);

/// n uniform points on [lo, hi]; 0 is inserted if missing and inside.
std::vector<double> make_a_grid(double lo, double hi, int points);

/// I(c) = c a* - Lambda(a*) with dLambda(a*) = c, found by bisection on the
/// grid bracket and Newton polish (|dLambda(a*) - c| <= 1e-10).
DualPoint rate_function(const RateProfile& profile, double c);

struct BahadurRao {
  double value = 0.0;
  double log_value = 0.0;
  double g_c = 0.0;  // |1/(a* sigma)| f(x0), pair-normalized f
  DualPoint dual;
  /// The literal prefactor 1/(a* sigma) is negative for a* < 0; the
  /// magnitude is used and this flag records it.
  bool sign_flipped = true;
};

/// g_c(x0) / sqrt(2 pi n) e^{-n I(c)} for the lower tail P{L_n(F) <= c}.
BahadurRao bahadur_rao(const RateProfile& profile, int x0, double c, long n);

/// F-hat with (I - P) F-hat = F - pi(F) and pi(F-hat) = 0.
Vector poisson_solve(const TruncatedKernel& P, std::span<const double> F);
Vector poisson_solve(const Matrix& P, const Vector& pi, const Vector& F);

/// pi(P(F-hat^2) - (P F-hat)^2).
double asymptotic_variance(const TruncatedKernel& P, std::span<const double> F);

/// pi(<<F-hat, H-hat>>) / pi(<<H-hat, H-hat>>).
double optimal_theta(const TruncatedKernel& P, std::span<const double> F, std::span<const double> H);

/// Variance form sigma^2(F - theta H) from the same bilinear forms.
double controlled_variance(const TruncatedKernel& P, std::span<const double> F, std::span<const double> H,
                           double theta);

struct ErgodicReport {
  std::vector<double> errors;  // e_n = ||lambda^{-n} P_a^n 1 - f_pair||_sup, n = 1..n_max
  std::vector<double> ratios;  // e_{n+1} / e_n where defined
  double fitted_ratio = 0.0;   // geometric fit over the second half
};

ErgodicReport multiplicative_ergodic_check(const Matrix& P_a, const SpectralPoint& point, int n_max);

struct SweepEntry {
  int N = 0;
  std::optional<double> lambda;
  std::optional<double> relative_change;  // vs the previous available N
  std::string status = "ok";
};

/// lambda_a at a fixed tilt across truncations (F evaluated on each).
std::vector<SweepEntry> one_sidedness_sweep(const ChainSpec& spec, const Observable& F, double a,
                                            std::span<const int> N_list, const GpeOptions& options = {});

}  // namespace cvlab
