#pragma once

// Reflected random walk models on a lattice {0, h, 2h, ...}: increment laws,
// the MM1 special case, seeded per-replication streams and path sampling.
//
// States are stored as integer lattice indices; the physical value of index
// i is i * step().

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

namespace cvlab {

struct Atom {
  double value;
  double prob;
};

/// Finite-support law of the i.i.d. increments D(k). Atoms are merged by
/// value and kept sorted ascending. The law is validated on construction:
/// probabilities sum to one, some atom is positive, the mean is strictly
/// negative and every value is an integer multiple of the lattice step.
class IncrementLaw {
 public:
  /// Infers the coarsest lattice step that carries all atom values.
  explicit IncrementLaw(std::vector<Atom> atoms);
  IncrementLaw(std::vector<Atom> atoms, double step);

  std::span<const Atom> atoms() const { return atoms_; }
  /// Atom values divided by the lattice step.
  std::span<const std::int64_t> steps() const { return steps_; }
  double step() const { return step_; }

  double mean() const { return mean_; }
  /// delta = -E[D] > 0.
  double drift() const { return -mean_; }
  double variance() const { return variance_; }
  std::int64_t max_step() const { return steps_.back(); }
  std::int64_t min_step() const { return steps_.front(); }

  /// Maps a uniform variate in [0, 1) onto an atom index.
  std::size_t sample_index(double u) const {
    std::size_t j = 0;
    while (j + 1 < cdf_.size() && u >= cdf_[j]) ++j;
    return j;
  }

 private:
  void init(std::vector<Atom> atoms, std::optional<double> step);

  std::vector<Atom> atoms_;
  std::vector<std::int64_t> steps_;
  std::vector<double> cdf_;
  double step_ = 1.0;
  double mean_ = 0.0;
  double variance_ = 0.0;
};

/// Coarsest h > 0 such that every value is an integer multiple of h (within
/// 1e-9 relative), or nullopt when no such h with a denominator up to 10^6
/// exists.
std::optional<double> lattice_step(std::span<const double> values);

/// +1 with probability alpha, -1 otherwise, on the integer lattice.
IncrementLaw mm1_increments(double alpha);

/// D = A - S with A in {0, (1+kappa)alpha} and S in {0, (1+kappa)mu}, each
/// nonzero with probability 1/(1+kappa), A and S independent.
IncrementLaw make_queue_increments(double mu, double alpha, double kappa);

class ChainSpec {
 public:
  static ChainSpec mm1(double alpha, std::int64_t x0 = 0);
  static ChainSpec reflected(IncrementLaw law, std::int64_t x0 = 0);

  const IncrementLaw& law() const { return law_; }
  /// Set only for the MM1 model.
  std::optional<double> mm1_alpha() const { return mm1_alpha_; }
  bool is_mm1() const { return mm1_alpha_.has_value(); }
  /// rho = alpha / (1 - alpha); only meaningful for MM1.
  double load() const;
  std::int64_t x0() const { return x0_; }
  ChainSpec with_x0(std::int64_t x0) const;

 private:
  ChainSpec(IncrementLaw law, std::optional<double> alpha, std::int64_t x0);

  IncrementLaw law_;
  std::optional<double> mm1_alpha_;
  std::int64_t x0_ = 0;
};

constexpr std::int64_t reflect_step(std::int64_t x, std::int64_t d) { return x + d > 0 ? x + d : 0; }

/// 64-bit avalanche (splitmix64 finalizer).
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Seed of replication `index` under `master`: mix64(master ^ mix64(index)).
/// Fixed forever; changing it changes every published output.
constexpr std::uint64_t stream_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(master ^ mix64(index));
}

/// mt19937_64 seeded per replication; uniforms are built from the top 53
/// bits so that the sequence is identical on every conforming platform.
class ReplicationStream {
 public:
  ReplicationStream(std::uint64_t master_seed, std::uint64_t replication_index)
      : engine_(stream_seed(master_seed, replication_index)) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

/// Incremental sampler of one replication of a reflected walk.
class PathStream {
 public:
  PathStream(const ChainSpec& spec, std::uint64_t master_seed, std::uint64_t replication_index)
      : PathStream(spec, spec.x0(), master_seed, replication_index) {}
  PathStream(const ChainSpec& spec, std::int64_t x0, std::uint64_t master_seed,
             std::uint64_t replication_index)
      : law_(&spec.law()), rng_(master_seed, replication_index), state_(x0) {}

  std::int64_t state() const { return state_; }
  std::int64_t advance() {
    state_ = reflect_step(state_, law_->steps()[law_->sample_index(rng_.uniform())]);
    return state_;
  }

 private:
  const IncrementLaw* law_;
  ReplicationStream rng_;
  std::int64_t state_;
};

struct PathSample {
  std::vector<std::int64_t> states;  // lattice indices, length n + 1
  std::uint64_t seed = 0;
  std::uint64_t replication_index = 0;
};

PathSample simulate_path(const ChainSpec& spec, std::int64_t n, std::uint64_t master_seed,
                         std::uint64_t replication_index);

struct FirstPassageResult {
  std::int64_t tau0 = 0;  // first k >= 1 with state 0
  double area = 0.0;      // sum of state values over k < tau0
};

inline constexpr std::int64_t kDefaultPassageCap = 100'000'000;

FirstPassageResult first_passage(const ChainSpec& spec, std::int64_t x0, std::uint64_t master_seed,
                                 std::uint64_t replication_index,
                                 std::int64_t cap = kDefaultPassageCap);

}  // namespace cvlab
