#include "cvlab/spectral.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>

#include "cvlab/error.hpp"
#include "cvlab/parallel.hpp"

namespace cvlab {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLogMax = 709.78;  // log(DBL_MAX)
constexpr double kEps = std::numeric_limits<double>::epsilon();

// Rows of a nonnegative matrix as (column, log entry) pairs.
struct LogSparse {
  std::vector<std::vector<std::pair<int, double>>> rows;
  int size() const { return static_cast<int>(rows.size()); }
};

LogSparse log_sparse(const Matrix& A) {
  LogSparse out;
  out.rows.resize(static_cast<std::size_t>(A.rows()));
  for (int i = 0; i < A.rows(); ++i) {
    for (int j = 0; j < A.cols(); ++j) {
      if (A(i, j) > 0.0) out.rows[static_cast<std::size_t>(i)].emplace_back(j, std::log(A(i, j)));
    }
  }
  return out;
}

LogSparse transpose(const LogSparse& A) {
  LogSparse out;
  out.rows.resize(A.rows.size());
  for (int i = 0; i < A.size(); ++i) {
    for (auto [j, v] : A.rows[static_cast<std::size_t>(i)]) out.rows[static_cast<std::size_t>(j)].emplace_back(i, v);
  }
  return out;
}

double log_sum_exp(const Vector& v) {
  double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// log of sum_x w(x) e^{t(x)} with log-weights lw (-inf where w = 0).
double log_dot(const Vector& lw, const Vector& t) {
  Vector s = lw + t;
  for (double& x : s) {
    if (std::isnan(x)) x = kNegInf;
  }
  return log_sum_exp(s);
}

Vector log_apply(const LogSparse& A, const Vector& t) {
  Vector out(A.size());
  for (int x = 0; x < A.size(); ++x) {
    double m = kNegInf;
    for (auto [y, v] : A.rows[static_cast<std::size_t>(x)]) m = std::max(m, v + t(y));
    if (!std::isfinite(m)) {
      out(x) = kNegInf;
      continue;
    }
    double s = 0.0;
    for (auto [y, v] : A.rows[static_cast<std::size_t>(x)]) s += std::exp(v + t(y) - m);
    out(x) = m + std::log(s);
  }
  return out;
}

// sup_x |(A e^t)(x) - lambda e^{t(x)}| / (lambda sup e^t), all in log space.
double log_residual(const LogSparse& A, const Vector& t, double log_lambda) {
  const double top = t.maxCoeff();
  double worst = 0.0;
  for (int x = 0; x < A.size(); ++x) {
    double s = 0.0;
    for (auto [y, v] : A.rows[static_cast<std::size_t>(x)]) s += std::exp(v + t(y) - top - log_lambda);
    worst = std::max(worst, std::abs(s - std::exp(t(x) - top)));
  }
  return worst;
}

struct PowerResult {
  Vector log_vec;  // normalized so that w . e^{log_vec} = 1
  double log_lambda = 0.0;
  long iterations = 0;
  bool converged = false;
};

// Power iteration on A with the normalization functional w (log weights).
// The iterate is kept as e^{ell} * u with a balancing log-vector ell that is
// refreshed periodically; whenever some entry of u leaves the normal range
// an exact log-space step rebuilds the iterate.
PowerResult balanced_power(const LogSparse& A, const Vector& lw, const GpeOptions& opt) {
  const int n = A.size();
  PowerResult out;
  Vector t = Vector::Zero(n);
  t.array() -= log_dot(lw, t);
  double c = 0.0;
  long it = 0;
  auto log_step = [&] {
    Vector next = log_apply(A, t);
    const double norm = log_dot(lw, next);
    c = norm - log_dot(lw, t);
    t = next.array() - norm;
    ++it;
  };
  for (int k = 0; k < 3; ++k) log_step();

  std::vector<std::vector<std::pair<int, double>>> M(static_cast<std::size_t>(n));
  Vector u(n), v(n);
  while (it < opt.max_iterations) {
    const Vector ell = t;
    double shift = kNegInf;
    for (int x = 0; x < n; ++x) {
      if (std::isfinite(lw(x))) shift = std::max(shift, lw(x) + ell(x));
    }
    Vector wl(n);  // balanced normalization weights
    for (int x = 0; x < n; ++x) wl(x) = std::isfinite(lw(x)) ? std::exp(lw(x) + ell(x) - shift) : 0.0;
    for (int x = 0; x < n; ++x) {
      auto& row = M[static_cast<std::size_t>(x)];
      row.clear();
      for (auto [y, val] : A.rows[static_cast<std::size_t>(x)]) row.emplace_back(y, std::exp(val + ell(y) - ell(x) - c));
    }
    u.setOnes();
    double lam = 1.0;
    bool rebuild = false;
    for (int inner = 0; inner < 64 && it < opt.max_iterations; ++inner) {
      ++it;
      for (int x = 0; x < n; ++x) {
        double s = 0.0;
        for (auto [y, m] : M[static_cast<std::size_t>(x)]) s += m * u(y);
        v(x) = s;
      }
      bool normal = true;
      for (int x = 0; x < n && normal; ++x) normal = std::isfinite(v(x)) && v(x) > 1e-250 && v(x) < 1e250;
      if (!normal) {
        rebuild = true;
        break;
      }
      lam = wl.dot(v) / wl.dot(u);
      // Componentwise in the balanced coordinates, so that entries where the
      // eigenvector is tiny are as accurate as the large ones. A log entry of
      // size L only carries L * eps absolute precision, hence the floor.
      double res = 0.0;
      for (int x = 0; x < n; ++x) {
        const double floor = 1.0 + 16.0 * kEps * std::abs(ell(x)) / opt.tol;
        res = std::max(res, std::abs(v(x) - lam * u(x)) / (lam * u(x)) / floor);
      }
      u = v / lam;
      if (res <= opt.tol) {
        out.log_vec = ell.array() + u.array().log();
        out.log_vec.array() -= log_dot(lw, out.log_vec);
        out.log_lambda = c + std::log(lam);
        out.iterations = it;
        out.converged = true;
        return out;
      }
      if (u.maxCoeff() > 1e100 || u.minCoeff() < 1e-100) break;
    }
    t = ell.array() + u.array().log();
    t.array() -= log_dot(lw, t);
    if (rebuild) {
      log_step();
    } else {
      c += std::log(lam);
    }
  }
  out.log_vec = t;
  out.log_lambda = c;
  out.iterations = it;
  return out;
}

Vector safe_log(const Vector& v) {
  const double floor = v.cwiseAbs().maxCoeff() * 1e-300;
  Vector out(v.size());
  for (int i = 0; i < v.size(); ++i) out(i) = std::log(std::max(v(i), floor));
  return out;
}

// Perron vector of a dense matrix (positive orientation).
std::pair<double, Vector> dense_perron(const Matrix& A) {
  Eigen::EigenSolver<Matrix> es(A, true);
  if (es.info() != Eigen::Success) fail(ErrorKind::NonConvergence, "dense eigensolve failed");
  int best = 0;
  for (int i = 1; i < A.rows(); ++i) {
    if (es.eigenvalues()(i).real() > es.eigenvalues()(best).real()) best = i;
  }
  Vector vec = es.eigenvectors().col(best).real();
  if (vec.sum() < 0.0) vec = -vec;
  return {es.eigenvalues()(best).real(), vec};
}

SpectralPoint assemble(double a, const LogSparse& A, const Vector& lnu, const GpeOptions& opt) {
  const int n = A.size();
  SpectralPoint pt;
  pt.a = a;
  PowerResult right = balanced_power(A, lnu, opt);
  PowerResult left = balanced_power(transpose(A), Vector::Zero(n), opt);
  if (right.converged && left.converged) {
    pt.log_lambda = right.log_lambda;
    pt.log_f_nu = right.log_vec;
    pt.log_mu_pair = left.log_vec;
    pt.iterations = std::max(right.iterations, left.iterations);
  } else {
    if (!opt.dense_fallback) {
      std::ostringstream msg;
      msg << "power iteration did not converge at a = " << a << " within " << opt.max_iterations << " iterations";
      fail(ErrorKind::NonConvergence, msg.str());
    }
    Matrix D(n, n);
    D.setZero();
    for (int x = 0; x < n; ++x) {
      for (auto [y, v] : A.rows[static_cast<std::size_t>(x)]) D(x, y) = std::exp(v);
    }
    auto [lr, fr] = dense_perron(D);
    auto [ll, fl] = dense_perron(D.transpose());
    (void)ll;
    pt.log_lambda = std::log(lr);
    pt.log_f_nu = safe_log(fr);
    pt.log_f_nu.array() -= log_dot(lnu, pt.log_f_nu);
    pt.log_mu_pair = safe_log(fl);
    pt.log_mu_pair.array() -= log_sum_exp(pt.log_mu_pair);
    pt.iterations = std::max(right.iterations, left.iterations);
    pt.dense_fallback = true;
  }
  pt.lambda = std::exp(pt.log_lambda);
  // mu(f) = 1 with mu(1) = 1.
  pt.log_f_pair = pt.log_f_nu.array() - log_dot(pt.log_mu_pair, pt.log_f_nu);
  pt.right_residual = log_residual(A, pt.log_f_nu, pt.log_lambda);
  pt.left_residual = log_residual(transpose(A), pt.log_mu_pair, pt.log_lambda);
  return pt;
}

Vector log_weights(const Vector& nu) {
  Vector out(nu.size());
  for (int i = 0; i < nu.size(); ++i) out(i) = nu(i) > 0.0 ? std::log(nu(i)) : kNegInf;
  return out;
}

void check_sizes(const TruncatedKernel& P, std::span<const double> F) {
  if (F.size() != P.size()) {
    std::ostringstream msg;
    msg << "observable has " << F.size() << " values for " << P.size() << " states";
    fail(ErrorKind::InvalidArgument, msg.str());
  }
}

Vector to_vector(std::span<const double> F) {
  Vector v(static_cast<Eigen::Index>(F.size()));
  for (std::size_t i = 0; i < F.size(); ++i) v(static_cast<Eigen::Index>(i)) = F[i];
  return v;
}

// Asymptotic-variance bilinear form pi(<<F, G>>) = sum_i pi(i) sum_j
// P(i,j) (F(j) - PF(i)) (G(j) - PG(i)).
double bilinear(const Matrix& P, const Vector& pi, const Vector& F, const Vector& G) {
  const Vector PF = P * F;
  const Vector PG = P * G;
  double total = 0.0;
  for (int i = 0; i < P.rows(); ++i) {
    double row = 0.0;
    for (int j = 0; j < P.cols(); ++j) {
      if (P(i, j) != 0.0) row += P(i, j) * (F(j) - PF(i)) * (G(j) - PG(i));
    }
    total += pi(i) * row;
  }
  return total;
}

double variance_of(const Matrix& P, const Vector& pi, const Vector& F) {
  const Vector Fh = poisson_solve(P, pi, F);
  return bilinear(P, pi, Fh, Fh);
}

}  // namespace

TruncatedKernel TruncatedKernel::from_matrix(Matrix P, double step, bool check_ergodic) {
  if (P.rows() != P.cols() || P.rows() < 1) fail(ErrorKind::InvalidModel, "kernel must be a nonempty square matrix");
  if (!(step > 0.0)) fail(ErrorKind::InvalidModel, "lattice step must be positive");
  for (int i = 0; i < P.rows(); ++i) {
    double sum = 0.0;
    for (int j = 0; j < P.cols(); ++j) {
      if (!(P(i, j) >= 0.0)) fail(ErrorKind::InvalidModel, "kernel entries must be nonnegative");
      sum += P(i, j);
    }
    if (std::abs(sum - 1.0) > 1e-12) {
      std::ostringstream msg;
      msg.precision(17);
      msg << "row " << i << " sums to " << sum;
      fail(ErrorKind::InvalidModel, msg.str());
    }
  }
  if (check_ergodic && !is_ergodic(P)) fail(ErrorKind::NotIrreducible, "kernel is not irreducible and aperiodic");
  TruncatedKernel K;
  K.P_ = std::move(P);
  K.step_ = step;
  K.rows_.resize(static_cast<std::size_t>(K.P_.rows()));
  for (int i = 0; i < K.P_.rows(); ++i) {
    for (int j = 0; j < K.P_.cols(); ++j) {
      if (K.P_(i, j) > 0.0) K.rows_[static_cast<std::size_t>(i)].push_back({j, K.P_(i, j)});
    }
  }
  return K;
}

TruncatedKernel truncate_kernel(const ChainSpec& spec, int N) {
  const IncrementLaw& law = spec.law();
  if (N <= law.max_step()) {
    std::ostringstream msg;
    msg << "N = " << N << " must exceed the largest positive increment (" << law.max_step() << " lattice steps)";
    fail(ErrorKind::TruncationTooSmall, msg.str());
  }
  Matrix P = Matrix::Zero(N + 1, N + 1);
  auto steps = law.steps();
  auto atoms = law.atoms();
  for (int i = 0; i <= N; ++i) {
    for (std::size_t k = 0; k < atoms.size(); ++k) {
      auto j = std::min<std::int64_t>(reflect_step(i, steps[k]), N);
      P(i, static_cast<int>(j)) += atoms[k].prob;
    }
  }
  return TruncatedKernel::from_matrix(std::move(P), law.step());
}

bool is_ergodic(const Matrix& P) {
  const int n = static_cast<int>(P.rows());
  std::vector<int> level(static_cast<std::size_t>(n), -1);
  std::queue<int> q;
  level[0] = 0;
  q.push(0);
  while (!q.empty()) {
    int x = q.front();
    q.pop();
    for (int y = 0; y < n; ++y) {
      if (P(x, y) > 0.0 && level[static_cast<std::size_t>(y)] < 0) {
        level[static_cast<std::size_t>(y)] = level[static_cast<std::size_t>(x)] + 1;
        q.push(y);
      }
    }
  }
  if (std::any_of(level.begin(), level.end(), [](int l) { return l < 0; })) return false;
  std::vector<char> back(static_cast<std::size_t>(n), 0);
  back[0] = 1;
  q.push(0);
  while (!q.empty()) {
    int y = q.front();
    q.pop();
    for (int x = 0; x < n; ++x) {
      if (P(x, y) > 0.0 && !back[static_cast<std::size_t>(x)]) {
        back[static_cast<std::size_t>(x)] = 1;
        q.push(x);
      }
    }
  }
  if (std::any_of(back.begin(), back.end(), [](char b) { return !b; })) return false;
  int period = 0;
  for (int x = 0; x < n; ++x) {
    for (int y = 0; y < n; ++y) {
      if (P(x, y) > 0.0) period = std::gcd(period, std::abs(level[static_cast<std::size_t>(x)] + 1 - level[static_cast<std::size_t>(y)]));
    }
  }
  return period == 1;
}

Vector stationary(const TruncatedKernel& P) { return stationary(P.dense()); }

Vector stationary(const Matrix& P) {
  Matrix A = P;
  const int n = static_cast<int>(A.rows());
  for (int k = n - 1; k > 0; --k) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += A(k, j);
    if (!(s > 0.0)) fail(ErrorKind::NotIrreducible, "state reduction met a closed class");
    for (int i = 0; i < k; ++i) A(i, k) /= s;
    for (int j = 0; j < k; ++j) {
      const double akj = A(k, j);
      if (akj == 0.0) continue;
      for (int i = 0; i < k; ++i) A(i, j) += A(i, k) * akj;
    }
  }
  Vector pi(n);
  pi(0) = 1.0;
  for (int k = 1; k < n; ++k) {
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += pi(i) * A(i, k);
    pi(k) = s;
    // Strongly tilted chains put all mass at the far end; keep the prefix finite.
    if (s > 1e200) pi.head(k + 1) /= s;
  }
  return pi / pi.sum();
}

Matrix scale_kernel(const TruncatedKernel& P, std::span<const double> F, double a) {
  check_sizes(P, F);
  Matrix out = P.dense();
  for (int i = 0; i < out.rows(); ++i) {
    const double e = a * F[static_cast<std::size_t>(i)];
    if (e > kLogMax) {
      std::ostringstream msg;
      msg << "e^{aF} overflows at state " << i << " (a F = " << e << ")";
      fail(ErrorKind::TiltOverflow, msg.str());
    }
    out.row(i) *= std::exp(e);
  }
  return out;
}

SmallPair SmallPair::atom(std::size_t size, int state) {
  SmallPair sp;
  sp.s = Vector::Zero(static_cast<Eigen::Index>(size));
  sp.nu = Vector::Zero(static_cast<Eigen::Index>(size));
  sp.s(state) = 1.0;
  sp.nu(state) = 1.0;
  return sp;
}

bool SmallPair::minorizes(const Matrix& P) const {
  for (int i = 0; i < P.rows(); ++i) {
    for (int j = 0; j < P.cols(); ++j) {
      if (P(i, j) < s(i) * nu(j)) return false;
    }
  }
  return true;
}

Vector SpectralPoint::f_check(Normalization norm) const {
  return (norm == Normalization::NuOne ? log_f_nu : log_f_pair).array().exp();
}

Vector SpectralPoint::mu_check() const { return log_mu_pair.array().exp(); }

SpectralPoint gpe(const TruncatedKernel& P, std::span<const double> F, double a, const SmallPair& small,
                  const GpeOptions& options) {
  check_sizes(P, F);
  const int n = static_cast<int>(P.size());
  if (a == 0.0) {
    SpectralPoint pt;
    pt.a = 0.0;
    pt.log_f_nu = Vector::Zero(n);
    pt.log_f_pair = Vector::Zero(n);
    pt.log_mu_pair = stationary(P).array().log();
    return pt;
  }
  LogSparse A;
  A.rows.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double e = a * F[static_cast<std::size_t>(i)];
    if (e > kLogMax) {
      std::ostringstream msg;
      msg << "e^{aF} overflows at state " << i << " (a F = " << e << ")";
      fail(ErrorKind::TiltOverflow, msg.str());
    }
    for (const KernelEntry& k : P.row(i)) A.rows[static_cast<std::size_t>(i)].emplace_back(k.col, std::log(k.prob) + e);
  }
  SpectralPoint pt = assemble(a, A, log_weights(small.nu), options);
  if (pt.log_lambda > kLogMax) fail(ErrorKind::TiltOverflow, "lambda_a is not representable");
  return pt;
}

SpectralPoint gpe(const Matrix& P_a, const SmallPair& small, const GpeOptions& options) {
  if ((P_a.array() < 0.0).any()) fail(ErrorKind::InvalidArgument, "gpe needs a nonnegative matrix");
  return assemble(std::numeric_limits<double>::quiet_NaN(), log_sparse(P_a), log_weights(small.nu), options);
}

double dense_perron_eigenvalue(const Matrix& A) {
  Eigen::EigenSolver<Matrix> es(A, false);
  if (es.info() != Eigen::Success) fail(ErrorKind::NonConvergence, "dense eigensolve failed");
  double best = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < A.rows(); ++i) best = std::max(best, es.eigenvalues()(i).real());
  return best;
}

Matrix twisted_kernel(const Matrix& P, const Vector& h) {
  if (!(h.array() > 0.0).all()) fail(ErrorKind::ZeroDenominator, "twisting function must be strictly positive");
  Matrix out = P * h.asDiagonal();
  for (int i = 0; i < out.rows(); ++i) {
    const double s = out.row(i).sum();
    if (!(s > 0.0) || !std::isfinite(s)) {
      std::ostringstream msg;
      msg << "twist normalizer vanishes in row " << i;
      fail(ErrorKind::ZeroDenominator, msg.str());
    }
    out.row(i) /= s;
  }
  return out;
}

Matrix twisted_kernel(const TruncatedKernel& P, std::span<const double> F, const SpectralPoint& point) {
  check_sizes(P, F);
  const int n = static_cast<int>(P.size());
  Matrix out = Matrix::Zero(n, n);
  // e^{aF(x)} is common to the numerator and the normalizer of row x.
  for (int x = 0; x < n; ++x) {
    double m = kNegInf;
    for (const KernelEntry& k : P.row(x)) m = std::max(m, std::log(k.prob) + point.log_f_nu(k.col));
    if (!std::isfinite(m)) fail(ErrorKind::ZeroDenominator, "twist normalizer vanishes");
    double s = 0.0;
    for (const KernelEntry& k : P.row(x)) {
      const double w = std::exp(std::log(k.prob) + point.log_f_nu(k.col) - m);
      out(x, k.col) = w;
      s += w;
    }
    out.row(x) /= s;
  }
  return out;
}

Matrix resolvent(const Matrix& P_a, double lambda_a) {
  if (!(lambda_a < 2.0)) {
    std::ostringstream msg;
    msg << "resolvent series diverges: lambda_a = " << lambda_a << " >= 2";
    fail(ErrorKind::ResolventDivergent, msg.str());
  }
  const int n = static_cast<int>(P_a.rows());
  Matrix A = 2.0 * Matrix::Identity(n, n) - P_a;
  Eigen::PartialPivLU<Matrix> lu(A);
  return lu.solve(Matrix::Identity(n, n));
}

Vector potential_eigenfunction(const Matrix& P_a, double lambda_a, const SmallPair& small) {
  const Matrix R = resolvent(P_a, lambda_a);
  const double gamma = 1.0 / (2.0 - lambda_a);
  const int n = static_cast<int>(P_a.rows());
  Matrix A = gamma * Matrix::Identity(n, n) - (R - small.s * small.nu.transpose());
  Eigen::FullPivLU<Matrix> lu(A);
  if (lu.rcond() < 1e-14) fail(ErrorKind::SingularSystem, "potential kernel system is singular");
  Vector x = lu.solve(small.s);
  x += lu.solve(small.s - A * x);
  const double scale = small.nu.dot(x);
  if (!(scale > 0.0)) fail(ErrorKind::SingularSystem, "potential solution has nonpositive nu-mass");
  return x / scale;
}

TiltEvaluation evaluate_tilt(const TruncatedKernel& P, std::span<const double> F, double a,
                             const SmallPair& small, const GpeOptions& options) {
  TiltEvaluation ev;
  ev.point = gpe(P, F, a, small, options);
  const Vector Fv = to_vector(F);
  const Vector prod = (ev.point.log_mu_pair + ev.point.log_f_pair).array().exp();
  if (a == 0.0) {
    ev.twisted_pi = stationary(P);
  } else {
    try {
      ev.twisted_pi = stationary(twisted_kernel(P, F, ev.point));
    } catch (const Error& e) {
      // Strong tilts underflow some twisted transitions to 0 and state
      // reduction sees a closed class; mu f is the same law in exact arithmetic.
      if (e.kind() != ErrorKind::NotIrreducible) throw;
      ev.twisted_pi = prod / prod.sum();
    }
  }
  ev.dLambda = ev.twisted_pi.dot(Fv);
  ev.dLambda_pair = prod.dot(Fv);
  return ev;
}

double twisted_variance(const TruncatedKernel& P, std::span<const double> F, const TiltEvaluation& eval) {
  const Matrix Pt = eval.point.a == 0.0 ? P.dense() : twisted_kernel(P, F, eval.point);
  return variance_of(Pt, eval.twisted_pi, to_vector(F));
}

double RateProfile::c_bar0() const {
  for (const ProfilePoint& p : points) {
    if (p.ok()) return p.dLambda;
  }
  fail(ErrorKind::OutOfDualRange, "profile has no available points");
}

std::pair<double, double> RateProfile::dual_range() const {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const ProfilePoint& p : points) {
    if (!p.ok()) continue;
    lo = std::min(lo, p.dLambda);
    hi = std::max(hi, p.dLambda);
  }
  return {lo, hi};
}

constexpr double kCurvatureStep = 1e-7;

RateProfile lambda_profile(const TruncatedKernel& P, std::span<const double> F, std::span<const double> a_grid,
                           const SmallPair& small, const GpeOptions& options, unsigned threads) {
  check_sizes(P, F);
  if (a_grid.size() < 3) fail(ErrorKind::InvalidArgument, "a grid needs at least 3 points");
  for (std::size_t i = 1; i < a_grid.size(); ++i) {
    if (!(a_grid[i] > a_grid[i - 1])) fail(ErrorKind::InvalidArgument, "a grid must be strictly increasing");
  }
  if (std::find(a_grid.begin(), a_grid.end(), 0.0) == a_grid.end()) {
    fail(ErrorKind::InvalidArgument, "a grid must contain 0");
  }
  RateProfile prof;
  prof.kernel = P;
  prof.F.assign(F.begin(), F.end());
  prof.small = small;
  prof.options = options;
  const std::size_t m = a_grid.size();
  prof.points.resize(m);
  parallel_for(m, threads, [&](std::size_t i) {
    ProfilePoint& p = prof.points[i];
    p.a = a_grid[i];
    try {
      TiltEvaluation ev = evaluate_tilt(P, F, p.a, small, options);
      p.Lambda = ev.point.log_lambda;
      p.dLambda = ev.dLambda;
    } catch (const Error& e) {
      p.status = to_string(e.kind());
      return;
    }
    // Lambda'' from a local central difference of the twisted mean; the grid
    // step is far too coarse near a = 0, where Lambda has a branch point.
    try {
      const double up = evaluate_tilt(P, F, p.a + kCurvatureStep, small, options).dLambda;
      const double down = evaluate_tilt(P, F, p.a - kCurvatureStep, small, options).dLambda;
      p.d2Lambda = (up - down) / (2.0 * kCurvatureStep);
    } catch (const Error&) {
      p.d2Lambda = std::numeric_limits<double>::quiet_NaN();
    }
  });
  auto ok = [&](std::size_t i) { return prof.points[i].ok(); };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < m; ++i) {
    ProfilePoint& p = prof.points[i];
    if (!p.ok()) {
      p.Lambda = p.dLambda = p.dLambda_fd = p.d2Lambda = nan;
      continue;
    }
    const bool l = i > 0 && ok(i - 1);
    const bool r = i + 1 < m && ok(i + 1);
    auto diff = [&](auto field) {
      if (l && r) return (field(prof.points[i + 1]) - field(prof.points[i - 1])) / (prof.points[i + 1].a - prof.points[i - 1].a);
      if (r) return (field(prof.points[i + 1]) - field(p)) / (prof.points[i + 1].a - p.a);
      if (l) return (field(p) - field(prof.points[i - 1])) / (p.a - prof.points[i - 1].a);
      return nan;
    };
    p.dLambda_fd = diff([](const ProfilePoint& q) { return q.Lambda; });
    if (!std::isfinite(p.d2Lambda)) p.d2Lambda = diff([](const ProfilePoint& q) { return q.dLambda; });
  }
  return prof;
}

std::vector<double> make_a_grid(double lo, double hi, int points) {
  if (points < 2 || !(hi > lo)) fail(ErrorKind::InvalidArgument, "a grid needs hi > lo and at least 2 points");
  std::vector<double> grid;
  const double step = (hi - lo) / (points - 1);
  for (int i = 0; i < points; ++i) {
    double a = i == points - 1 ? hi : lo + i * step;
    if (std::abs(a) < 1e-12 * (hi - lo)) a = 0.0;
    grid.push_back(a);
  }
  if (lo < 0.0 && hi > 0.0 && std::find(grid.begin(), grid.end(), 0.0) == grid.end()) {
    grid.insert(std::upper_bound(grid.begin(), grid.end(), 0.0), 0.0);
  }
  return grid;
}

DualPoint rate_function(const RateProfile& profile, double c) {
  const auto [lo, hi] = profile.dual_range();
  if (!(c >= lo && c <= hi)) {
    std::ostringstream msg;
    msg.precision(10);
    msg << "c = " << c << " outside the dual range [" << lo << ", " << hi << "]; c_bar0 = " << profile.c_bar0();
    fail(ErrorKind::OutOfDualRange, msg.str());
  }
  const auto& pts = profile.points;
  std::size_t idx = pts.size();
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    if (pts[i].ok() && pts[i + 1].ok() && pts[i].dLambda <= c && c <= pts[i + 1].dLambda) {
      idx = i;
      break;
    }
  }
  double a_lo, a_hi;
  if (idx == pts.size()) {
    // Isolated available point equal to c.
    auto it = std::find_if(pts.begin(), pts.end(), [&](const ProfilePoint& p) { return p.ok() && p.dLambda == c; });
    if (it == pts.end()) fail(ErrorKind::OutOfDualRange, "no grid bracket for c");
    a_lo = a_hi = it->a;
  } else {
    a_lo = pts[idx].a;
    a_hi = pts[idx + 1].a;
  }
  std::span<const double> F = profile.F;
  auto eval = [&](double a) { return evaluate_tilt(profile.kernel, F, a, profile.small, profile.options); };

  double a = 0.5 * (a_lo + a_hi);
  if (idx != pts.size() && pts[idx].dLambda == c) a = a_lo;
  else if (idx != pts.size() && pts[idx + 1].dLambda == c) a = a_hi;
  else if (a_lo == a_hi) a = a_lo;
  TiltEvaluation ev = eval(a);
  for (int iter = 0; iter < 200; ++iter) {
    const double g = ev.dLambda - c;
    if (std::abs(g) <= 1e-12 * std::max(1.0, std::abs(c)) || a_hi - a_lo <= 1e-15 * std::max(1.0, std::abs(a))) break;
    if (g > 0.0) a_hi = a;
    else a_lo = a;
    const double var = twisted_variance(profile.kernel, F, ev);
    double next = var > 0.0 ? a - g / var : 0.5 * (a_lo + a_hi);
    if (!(next > a_lo && next < a_hi)) next = 0.5 * (a_lo + a_hi);
    a = next;
    ev = eval(a);
  }
  DualPoint d;
  d.c = c;
  d.a_star = a;
  d.I = c * a - ev.point.log_lambda;
  const double var = twisted_variance(profile.kernel, F, ev);
  if (!(var > 1e-14)) fail(ErrorKind::DegenerateControl, "second derivative of Lambda vanishes at a*");
  d.sigma_a_star = std::sqrt(var);
  d.point = ev.point;
  return d;
}

BahadurRao bahadur_rao(const RateProfile& profile, int x0, double c, long n) {
  if (n < 1) fail(ErrorKind::InvalidArgument, "n must be >= 1");
  if (x0 < 0 || static_cast<std::size_t>(x0) >= profile.kernel.size()) fail(ErrorKind::InvalidArgument, "x0 outside the truncation");
  BahadurRao br;
  br.dual = rate_function(profile, c);
  if (!(br.dual.a_star < 0.0)) {
    std::ostringstream msg;
    msg << "lower-tail prefactor needs a* < 0 (c below the mean), got a* = " << br.dual.a_star;
    fail(ErrorKind::OutOfDualRange, msg.str());
  }
  const double log_g = br.dual.point.log_f_pair(x0) - std::log(std::abs(br.dual.a_star) * br.dual.sigma_a_star);
  br.g_c = std::exp(log_g);
  br.log_value = log_g - 0.5 * std::log(2.0 * M_PI * static_cast<double>(n)) - static_cast<double>(n) * br.dual.I;
  br.value = std::exp(br.log_value);
  br.sign_flipped = true;
  return br;
}

Vector poisson_solve(const TruncatedKernel& P, std::span<const double> F) {
  check_sizes(P, F);
  return poisson_solve(P.dense(), stationary(P), to_vector(F));
}

Vector poisson_solve(const Matrix& P, const Vector& pi, const Vector& F) {
  const int n = static_cast<int>(P.rows());
  const double phi = pi.dot(F);
  const Vector g = F.array() - phi;
  Matrix A = Matrix::Identity(n, n) - P + Vector::Ones(n) * pi.transpose();
  Eigen::PartialPivLU<Matrix> lu(A);
  Vector x = lu.solve(g);
  for (int k = 0; k < 3; ++k) x += lu.solve(g - A * x);
  x.array() -= pi.dot(x);
  const Vector r = x - P * x - g;
  const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
  if (!(r.cwiseAbs().maxCoeff() <= 1e-10 * scale)) {
    std::ostringstream msg;
    msg << "Poisson residual " << r.cwiseAbs().maxCoeff() << " exceeds 1e-10 relative to " << scale;
    fail(ErrorKind::SingularSystem, msg.str());
  }
  return x;
}

double asymptotic_variance(const TruncatedKernel& P, std::span<const double> F) {
  check_sizes(P, F);
  return variance_of(P.dense(), stationary(P), to_vector(F));
}

double optimal_theta(const TruncatedKernel& P, std::span<const double> F, std::span<const double> H) {
  check_sizes(P, F);
  check_sizes(P, H);
  const Vector pi = stationary(P);
  const Vector Fh = poisson_solve(P.dense(), pi, to_vector(F));
  const Vector Hh = poisson_solve(P.dense(), pi, to_vector(H));
  const double den = bilinear(P.dense(), pi, Hh, Hh);
  if (!(den > 1e-12)) fail(ErrorKind::DegenerateControl, "control variate has zero asymptotic variance");
  return bilinear(P.dense(), pi, Fh, Hh) / den;
}

double controlled_variance(const TruncatedKernel& P, std::span<const double> F, std::span<const double> H,
                           double theta) {
  check_sizes(P, F);
  check_sizes(P, H);
  const Vector pi = stationary(P);
  const Vector Fh = poisson_solve(P.dense(), pi, to_vector(F));
  const Vector Hh = poisson_solve(P.dense(), pi, to_vector(H));
  return bilinear(P.dense(), pi, Fh, Fh) - 2.0 * theta * bilinear(P.dense(), pi, Fh, Hh) +
         theta * theta * bilinear(P.dense(), pi, Hh, Hh);
}

ErgodicReport multiplicative_ergodic_check(const Matrix& P_a, const SpectralPoint& point, int n_max) {
  ErgodicReport rep;
  const Vector f = point.f_check(Normalization::PairNormalized);
  Vector v = Vector::Ones(P_a.rows());
  for (int n = 1; n <= n_max; ++n) {
    v = P_a * v / point.lambda;
    rep.errors.push_back((v - f).cwiseAbs().maxCoeff());
  }
  for (std::size_t k = 0; k + 1 < rep.errors.size(); ++k) {
    if (rep.errors[k] > 0.0) rep.ratios.push_back(rep.errors[k + 1] / rep.errors[k]);
  }
  // Fit log e_n over the second half, above the rounding floor.
  const double floor = 1e-13 * std::max(1.0, f.cwiseAbs().maxCoeff());
  std::vector<std::pair<double, double>> pts;
  for (int n = n_max / 2; n <= n_max; ++n) {
    if (n >= 1 && rep.errors[static_cast<std::size_t>(n - 1)] > floor) {
      pts.emplace_back(n, std::log(rep.errors[static_cast<std::size_t>(n - 1)]));
    }
  }
  if (pts.size() < 2) {
    pts.clear();
    for (int n = 1; n <= n_max; ++n) {
      if (rep.errors[static_cast<std::size_t>(n - 1)] > floor) pts.emplace_back(n, std::log(rep.errors[static_cast<std::size_t>(n - 1)]));
    }
  }
  if (pts.size() >= 2) {
    double mx = 0, my = 0;
    for (auto [x, y] : pts) {
      mx += x;
      my += y;
    }
    mx /= static_cast<double>(pts.size());
    my /= static_cast<double>(pts.size());
    double sxy = 0, sxx = 0;
    for (auto [x, y] : pts) {
      sxy += (x - mx) * (y - my);
      sxx += (x - mx) * (x - mx);
    }
    rep.fitted_ratio = std::exp(sxy / sxx);
  }
  return rep;
}

std::vector<SweepEntry> one_sidedness_sweep(const ChainSpec& spec, const Observable& F, double a,
                                            std::span<const int> N_list, const GpeOptions& options) {
  std::vector<SweepEntry> out;
  std::optional<double> previous;
  for (int N : N_list) {
    SweepEntry e;
    e.N = N;
    try {
      TruncatedKernel K = truncate_kernel(spec, N);
      const auto Fv = F.tabulate(K.size(), K.step());
      e.lambda = gpe(K, Fv, a, SmallPair::atom(K.size()), options).lambda;
      if (previous) e.relative_change = std::abs(*e.lambda - *previous) / std::abs(*previous);
      previous = e.lambda;
    } catch (const Error& err) {
      e.status = to_string(err.kind());
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace cvlab
