#pragma once

// Run configuration: one JSON document with the sections model, observable,
// estimator, run, spectral, tail and output. Unknown keys are rejected.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvlab/chain.hpp"
#include "cvlab/lyapunov.hpp"
#include "cvlab/spectral.hpp"

namespace cvlab {

struct ModelConfig {
  std::string type = "mm1";  // mm1 | queue | atoms | matrix
  double alpha = 0.0;
  double mu = 0.0;
  double kappa = 0.0;
  std::vector<Atom> atoms;
  std::optional<double> step;
  std::vector<std::vector<double>> matrix;
};

struct ObservableConfig {
  std::string type = "identity";  // identity | exponential | tabulated
  double beta = 0.0;
  bool centered = false;
  std::vector<double> values;
};

struct EstimatorConfig {
  double theta_minus = 0.0;
  double theta_plus = 0.0;
  double epsilon = 0.0;
  std::string lyapunov = "fluid";  // fluid | exponential
  double lyapunov_beta = 0.0;
};

struct RunSection {
  std::int64_t n = 10'000;
  std::int64_t replications = 1;
  std::uint64_t master_seed = 1;
  double x0 = 0.0;  // value units
  std::vector<std::int64_t> n_grid;
  std::int64_t grid_points = 1000;
};

struct SpectralConfig {
  int N = 200;
  double a_min = -1.0;
  double a_max = 0.25;
  int a_points = 201;
  double tol = 1e-12;
  std::vector<double> c_list;
  int c_points = 21;
};

struct TailConfig {
  std::vector<std::int64_t> n_list;
  double c = 0.0;
  std::string side = "lower";  // lower | upper
  std::int64_t replications = 10'000;
  double budget = 1e9;
};

struct OutputConfig {
  std::string directory = "out";
  int precision = 17;
};

struct RunConfig {
  ModelConfig model;
  ObservableConfig observable;
  EstimatorConfig estimator;
  RunSection run;
  SpectralConfig spectral;
  TailConfig tail;
  OutputConfig output;
  nlohmann::json raw;  // echo for the manifest

  bool finite_model() const { return model.type == "matrix"; }
  /// Reflected-walk model; throws for the matrix type.
  ChainSpec chain() const;
  /// Lattice step of the model (1 for matrices).
  double step() const;
  /// run.x0 converted to a lattice index.
  std::int64_t x0_index() const;
  /// Observable without centering.
  Observable observable_raw() const;
  /// Kernel used by the spectral and exact-tail computations.
  TruncatedKernel kernel() const;
  /// Reference mean: analytic when available, else the stationary mean on kernel().
  double reference_mean() const;
  /// Observable with centering applied when requested.
  Observable effective_observable() const;
  LyapunovData lyapunov() const;
  GpeOptions gpe_options() const;
};

/// Parses and validates; every problem is reported as ConfigError or, for
/// model preconditions, the model's own error kind.
RunConfig parse_config(const nlohmann::json& doc);
RunConfig load_config(const std::string& path);

}  // namespace cvlab
