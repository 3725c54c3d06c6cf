#include "cvlab/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "cvlab/error.hpp"

namespace cvlab {
namespace {

using nlohmann::json;

[[noreturn]] void config_error(const std::string& msg) { fail(ErrorKind::ConfigError, msg); }

const json* section(const json& doc, const std::string& name, const std::set<std::string>& allowed) {
  auto it = doc.find(name);
  if (it == doc.end()) return nullptr;
  if (!it->is_object()) config_error("section '" + name + "' must be an object");
  for (const auto& [key, value] : it->items()) {
    if (!allowed.count(key)) config_error("unknown key '" + name + "." + key + "'");
  }
  return &*it;
}

template <class T>
void read(const json* sec, const std::string& where, const std::string& key, T& out) {
  if (!sec) return;
  auto it = sec->find(key);
  if (it == sec->end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    config_error("key '" + where + "." + key + "' has the wrong type");
  }
}

void require_positive(std::int64_t v, const std::string& name) {
  if (v < 1) config_error(name + " must be >= 1");
}

}  // namespace

RunConfig parse_config(const json& doc) {
  if (!doc.is_object()) config_error("configuration must be a JSON object");
  static const std::set<std::string> sections{"model", "observable", "estimator", "run", "spectral", "tail", "output"};
  for (const auto& [key, value] : doc.items()) {
    if (!sections.count(key)) config_error("unknown section '" + key + "'");
  }
  RunConfig cfg;
  cfg.raw = doc;

  const json* m = section(doc, "model", {"type", "alpha", "mu", "kappa", "atoms", "step", "matrix"});
  if (!m) config_error("missing section 'model'");
  read(m, "model", "type", cfg.model.type);
  read(m, "model", "alpha", cfg.model.alpha);
  read(m, "model", "mu", cfg.model.mu);
  read(m, "model", "kappa", cfg.model.kappa);
  double step = 0.0;
  if (m->contains("step")) {
    read(m, "model", "step", step);
    cfg.model.step = step;
  }
  if (m->contains("atoms")) {
    const json& atoms = m->at("atoms");
    if (!atoms.is_array()) config_error("model.atoms must be an array of [value, prob] pairs");
    for (const json& a : atoms) {
      if (!a.is_array() || a.size() != 2 || !a[0].is_number() || !a[1].is_number()) {
        config_error("model.atoms entries must be [value, prob] pairs");
      }
      cfg.model.atoms.push_back({a[0].get<double>(), a[1].get<double>()});
    }
  }
  read(m, "model", "matrix", cfg.model.matrix);
  const std::string& type = cfg.model.type;
  if (type != "mm1" && type != "queue" && type != "atoms" && type != "matrix") {
    config_error("model.type must be mm1, queue, atoms or matrix");
  }
  if (type == "matrix") {
    if (cfg.model.matrix.empty()) config_error("model.matrix is required for the matrix model");
    for (const auto& row : cfg.model.matrix) {
      if (row.size() != cfg.model.matrix.size()) config_error("model.matrix must be square");
    }
  }
  if (type == "atoms" && cfg.model.atoms.empty()) config_error("model.atoms is required for the atoms model");

  const json* o = section(doc, "observable", {"type", "beta", "centered", "values"});
  read(o, "observable", "type", cfg.observable.type);
  read(o, "observable", "beta", cfg.observable.beta);
  read(o, "observable", "centered", cfg.observable.centered);
  read(o, "observable", "values", cfg.observable.values);
  const std::string& ot = cfg.observable.type;
  if (ot != "identity" && ot != "exponential" && ot != "tabulated") {
    config_error("observable.type must be identity, exponential or tabulated");
  }

  const json* e = section(doc, "estimator", {"theta_minus", "theta_plus", "epsilon", "lyapunov", "lyapunov_beta"});
  read(e, "estimator", "theta_minus", cfg.estimator.theta_minus);
  read(e, "estimator", "theta_plus", cfg.estimator.theta_plus);
  read(e, "estimator", "epsilon", cfg.estimator.epsilon);
  read(e, "estimator", "lyapunov", cfg.estimator.lyapunov);
  read(e, "estimator", "lyapunov_beta", cfg.estimator.lyapunov_beta);
  if (cfg.estimator.lyapunov != "fluid" && cfg.estimator.lyapunov != "exponential") {
    config_error("estimator.lyapunov must be fluid or exponential");
  }
  if (!(cfg.estimator.epsilon >= 0.0)) config_error("estimator.epsilon must be nonnegative");
  try {
    validate_thetas(cfg.estimator.theta_minus, cfg.estimator.theta_plus);
  } catch (const Error& err) {
    config_error(err.what());
  }

  const json* r = section(doc, "run", {"n", "replications", "master_seed", "x0", "n_grid", "grid_points"});
  read(r, "run", "n", cfg.run.n);
  read(r, "run", "replications", cfg.run.replications);
  read(r, "run", "master_seed", cfg.run.master_seed);
  read(r, "run", "x0", cfg.run.x0);
  read(r, "run", "n_grid", cfg.run.n_grid);
  read(r, "run", "grid_points", cfg.run.grid_points);
  require_positive(cfg.run.n, "run.n");
  require_positive(cfg.run.replications, "run.replications");
  require_positive(cfg.run.grid_points, "run.grid_points");
  if (!(cfg.run.x0 >= 0.0)) config_error("run.x0 must be nonnegative");

  const json* s = section(doc, "spectral", {"N", "a_min", "a_max", "a_points", "tol", "c_list", "c_points"});
  read(s, "spectral", "N", cfg.spectral.N);
  read(s, "spectral", "a_min", cfg.spectral.a_min);
  read(s, "spectral", "a_max", cfg.spectral.a_max);
  read(s, "spectral", "a_points", cfg.spectral.a_points);
  read(s, "spectral", "tol", cfg.spectral.tol);
  read(s, "spectral", "c_list", cfg.spectral.c_list);
  read(s, "spectral", "c_points", cfg.spectral.c_points);
  if (!(cfg.spectral.a_min < 0.0 && cfg.spectral.a_max >= 0.0)) config_error("spectral grid must satisfy a_min < 0 <= a_max");
  if (cfg.spectral.a_points < 3) config_error("spectral.a_points must be >= 3");
  if (!(cfg.spectral.tol > 0.0)) config_error("spectral.tol must be positive");
  if (cfg.spectral.c_points < 2) config_error("spectral.c_points must be >= 2");

  const json* t = section(doc, "tail", {"n_list", "c", "side", "replications", "budget"});
  read(t, "tail", "n_list", cfg.tail.n_list);
  read(t, "tail", "c", cfg.tail.c);
  read(t, "tail", "side", cfg.tail.side);
  read(t, "tail", "replications", cfg.tail.replications);
  read(t, "tail", "budget", cfg.tail.budget);
  if (cfg.tail.side != "lower" && cfg.tail.side != "upper") config_error("tail.side must be lower or upper");
  for (auto n : cfg.tail.n_list) require_positive(n, "tail.n_list entries");
  if (cfg.tail.replications < 0) config_error("tail.replications must be nonnegative");

  const json* out = section(doc, "output", {"directory", "precision"});
  read(out, "output", "directory", cfg.output.directory);
  read(out, "output", "precision", cfg.output.precision);
  if (cfg.output.precision < 1 || cfg.output.precision > 17) config_error("output.precision must be in [1, 17]");

  // Model preconditions surface with their own error kinds.
  if (!cfg.finite_model()) {
    const ChainSpec spec = cfg.chain();
    (void)spec;
    if (cfg.estimator.lyapunov == "exponential") (void)cfg.lyapunov();
  } else {
    (void)cfg.kernel();
  }
  (void)cfg.x0_index();
  (void)cfg.observable_raw();
  if (ot == "exponential" && cfg.model.type == "mm1") (void)analytic_mean_mm1(cfg.model.alpha, cfg.observable_raw());
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) config_error("cannot read config file " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& err) {
    config_error(std::string("invalid JSON in ") + path + ": " + err.what());
  }
  return parse_config(doc);
}

ChainSpec RunConfig::chain() const {
  if (model.type == "mm1") return ChainSpec::mm1(model.alpha);
  if (model.type == "queue") return ChainSpec::reflected(make_queue_increments(model.mu, model.alpha, model.kappa));
  if (model.type == "atoms") {
    return ChainSpec::reflected(model.step ? IncrementLaw(model.atoms, *model.step) : IncrementLaw(model.atoms));
  }
  fail(ErrorKind::ConfigError, "the matrix model is not a reflected walk");
}

double RunConfig::step() const { return finite_model() ? 1.0 : chain().law().step(); }

std::int64_t RunConfig::x0_index() const {
  const double h = step();
  const double k = run.x0 / h;
  if (std::abs(k - std::round(k)) > 1e-9 * std::max(1.0, std::abs(k))) {
    std::ostringstream msg;
    msg << "run.x0 = " << run.x0 << " is not on the lattice with step " << h;
    config_error(msg.str());
  }
  const auto idx = static_cast<std::int64_t>(std::llround(k));
  if (finite_model() && idx >= static_cast<std::int64_t>(model.matrix.size())) config_error("run.x0 outside the state space");
  return idx;
}

Observable RunConfig::observable_raw() const {
  if (observable.type == "identity") return Observable::identity();
  if (observable.type == "exponential") {
    if (!(observable.beta > 0.0)) config_error("observable.beta must be positive");
    return Observable::exponential(observable.beta);
  }
  if (observable.values.empty()) config_error("observable.values is required for tabulated observables");
  return Observable::tabulated(observable.values);
}

TruncatedKernel RunConfig::kernel() const {
  if (finite_model()) {
    const auto n = static_cast<Eigen::Index>(model.matrix.size());
    Matrix P(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) P(i, j) = model.matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return TruncatedKernel::from_matrix(std::move(P));
  }
  return truncate_kernel(chain(), spectral.N);
}

double RunConfig::reference_mean() const {
  const Observable F = observable_raw();
  if (model.type == "mm1" && F.kind() != Observable::Kind::Tabulated) return analytic_mean_mm1(model.alpha, F);
  const TruncatedKernel K = kernel();
  const Vector pi = stationary(K);
  const auto values = F.tabulate(K.size(), K.step());
  double phi = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) phi += pi(static_cast<Eigen::Index>(i)) * values[i];
  return phi;
}

Observable RunConfig::effective_observable() const {
  const Observable F = observable_raw();
  return observable.centered ? F.centered(reference_mean()) : F;
}

LyapunovData RunConfig::lyapunov() const {
  if (finite_model()) config_error("Lyapunov data needs a reflected-walk model");
  if (estimator.lyapunov == "exponential") {
    if (model.type != "mm1") config_error("the exponential Lyapunov function is defined for mm1 only");
    const double beta = estimator.lyapunov_beta > 0.0 ? estimator.lyapunov_beta : observable.beta;
    return mm1_exponential_lyapunov(model.alpha, beta);
  }
  return fluid_lyapunov(chain().law());
}

GpeOptions RunConfig::gpe_options() const {
  GpeOptions opt;
  opt.tol = spectral.tol;
  return opt;
}

}  // namespace cvlab
