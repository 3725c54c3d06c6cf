#include <doctest.h>

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvlab/cli.hpp"
#include "cvlab/config.hpp"
#include "support.hpp"

using namespace cvlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "cvlab");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

fs::path write_config(const fs::path& dir, const json& doc) {
  const fs::path p = dir / "config.json";
  testing::write_text(p, doc.dump(2));
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(testing::slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

json figure2_config() {
  return json{{"model", {{"type", "queue"}, {"mu", 4}, {"alpha", 3}, {"kappa", 2}}},
              {"observable", {{"type", "identity"}}},
              {"estimator", {{"theta_minus", 1.05}, {"theta_plus", 1.0}, {"epsilon", 1.0}}},
              {"run", {{"n", 5000}, {"master_seed", 3}, {"grid_points", 100}}}};
}

json mm1_half_config() {
  return json{{"model", {{"type", "mm1"}, {"alpha", 1.0 / 3}}},
              {"observable", {{"type", "identity"}, {"centered", true}}},
              {"spectral", {{"N", 120}, {"a_min", -1.0}, {"a_max", 0.1}, {"a_points", 45}}}};
}

json toy_config() {
  return json{{"model", {{"type", "matrix"}, {"matrix", {{0.5, 0.5}, {0.5, 0.5}}}}},
              {"observable", {{"type", "tabulated"}, {"values", {0.0, 1.0}}}},
              {"spectral", {{"a_min", -4.0}, {"a_max", 1.0}, {"a_points", 101}}},
              {"tail", {{"n_list", {4, 50, 100, 200}}, {"c", 0.25}, {"replications", 20000}}}};
}

}  // namespace

TEST_CASE("configuration validation") {
  CHECK_NOTHROW(parse_config(figure2_config()));
  json typo = figure2_config();
  typo["run"]["seeed"] = 1;
  CHECK_KIND(parse_config(typo), ErrorKind::ConfigError);
  json section = figure2_config();
  section["extra"] = json::object();
  CHECK_KIND(parse_config(section), ErrorKind::ConfigError);
  json wrong_type = figure2_config();
  wrong_type["run"]["n"] = "many";
  CHECK_KIND(parse_config(wrong_type), ErrorKind::ConfigError);
  json thetas = figure2_config();
  thetas["estimator"]["theta_minus"] = 0.9;
  CHECK_KIND(parse_config(thetas), ErrorKind::ConfigError);
  json unstable = mm1_half_config();
  unstable["model"]["alpha"] = 0.6;
  CHECK_KIND(parse_config(unstable), ErrorKind::InvalidModel);
  json beta = json{{"model", {{"type", "mm1"}, {"alpha", 9.0 / 19}}}, {"observable", {{"type", "exponential"}, {"beta", 0.2}}}};
  CHECK_KIND(parse_config(beta), ErrorKind::BetaOutOfRange);
  json off_lattice = figure2_config();
  off_lattice["run"]["x0"] = 4.0;
  CHECK_KIND(parse_config(off_lattice), ErrorKind::ConfigError);

  const RunConfig cfg = parse_config(mm1_half_config());
  CHECK(cfg.reference_mean() == doctest::Approx(1.0));
  CHECK(cfg.effective_observable()(3, 1.0) == doctest::Approx(2.0));
  CHECK(parse_config(toy_config()).reference_mean() == doctest::Approx(0.5));
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ErrorKind::ConfigError) == 1);
  CHECK(exit_code_for(ErrorKind::InvalidModel) == 3);
  CHECK(exit_code_for(ErrorKind::NonLatticeIncrements) == 3);
  CHECK(exit_code_for(ErrorKind::NonConvergence) == 2);
  CHECK(exit_code_for(ErrorKind::BudgetExceeded) == 2);

  const fs::path dir = testing::scratch_dir("cli_exit");
  CHECK(cli({"simulate", "--config", (dir / "missing.json").string()}) == 1);
  testing::write_text(dir / "broken.json", "{ not json");
  CHECK(cli({"simulate", "--config", (dir / "broken.json").string()}) == 1);
  json bad = figure2_config();
  bad["model"]["alpha"] = 5;  // alpha > mu: no negative drift
  CHECK(cli({"simulate", "--config", write_config(dir, bad).string(), "--out", dir.string()}) == 3);
  CHECK(cli({"reproduce", "--figure", "7", "--out", dir.string()}) == 1);
  CHECK(cli({"frobnicate"}) != 0);
  fs::remove_all(dir);
}

TEST_CASE("simulate") {
  const fs::path dir = testing::scratch_dir("cli_sim");
  json off = figure2_config();
  off["estimator"] = {{"theta_minus", 0.0}, {"theta_plus", 0.0}};
  const fs::path a = dir / "a", b = dir / "b";
  CHECK(cli({"simulate", "--config", write_config(dir, off).string(), "--out", a.string()}) == 0);
  const auto rows = read_csv(a / "trajectory.csv");
  REQUIRE(rows.size() == 101);
  CHECK(rows[0] == std::vector<std::string>{"n", "phi_n", "phi_minus", "phi_plus", "delta_n", "band_lo", "band_hi"});
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i][2] == rows[i][1]);

  json on = figure2_config();
  on["run"]["replications"] = 6;
  const fs::path cfg = write_config(dir, on);
  CHECK(cli({"simulate", "--config", cfg.string(), "--out", a.string()}) == 0);
  CHECK(cli({"simulate", "--config", cfg.string(), "--out", b.string(), "--threads", "3"}) == 0);
  for (const char* f : {"trajectory.csv", "replications.csv"}) CHECK(testing::slurp(a / f) == testing::slurp(b / f));
  const json manifest = json::parse(testing::slurp(a / "manifest.json"));
  CHECK(manifest["command"] == "simulate");
  CHECK(manifest["config"] == on);
  CHECK(manifest.contains("timestamp"));
  CHECK(manifest["seeds"]["master_seed"] == 3);

  // A different seed gives a different path.
  CHECK(cli({"simulate", "--config", cfg.string(), "--out", b.string(), "--seed", "4"}) == 0);
  CHECK(testing::slurp(a / "trajectory.csv") != testing::slurp(b / "trajectory.csv"));
  fs::remove_all(dir);
}

TEST_CASE("spectral") {
  const fs::path dir = testing::scratch_dir("cli_spec");
  const fs::path cfg = write_config(dir, mm1_half_config());
  CHECK(cli({"spectral", "--config", cfg.string(), "--out", (dir / "a").string()}) == 0);
  CHECK(cli({"spectral", "--config", cfg.string(), "--out", (dir / "b").string(), "--threads", "4"}) == 0);
  for (const char* f : {"rate.csv", "dual.csv"}) CHECK(testing::slurp(dir / "a" / f) == testing::slurp(dir / "b" / f));

  const auto rate = read_csv(dir / "a" / "rate.csv");
  CHECK(rate[0] == std::vector<std::string>{"a", "Lambda", "dLambda_twisted", "dLambda_fd", "d2Lambda", "status"});
  bool saw_zero = false;
  for (std::size_t i = 1; i < rate.size(); ++i) {
    if (rate[i][0] == "0") {
      saw_zero = true;
      CHECK(rate[i][1] == "0");
    }
  }
  CHECK(saw_zero);
  const auto dual = read_csv(dir / "a" / "dual.csv");
  CHECK(dual[0] == std::vector<std::string>{"c", "I", "a_star", "sigma_a_star", "g_c_at_x0"});
  CHECK(dual.back()[0] == "0");
  CHECK(std::abs(std::stod(dual.back()[1])) <= 1e-12);
  // Doubles are written with enough digits to round-trip.
  CHECK(dual[1][1].size() >= 15);
  fs::remove_all(dir);
}

TEST_CASE("tail") {
  const fs::path dir = testing::scratch_dir("cli_tail");
  const fs::path cfg = write_config(dir, toy_config());
  CHECK(cli({"tail", "--config", cfg.string(), "--out", (dir / "a").string(), "--both"}) == 0);
  CHECK(cli({"tail", "--config", cfg.string(), "--out", (dir / "b").string(), "--threads", "2"}) == 0);
  CHECK(testing::slurp(dir / "a" / "tail.csv") == testing::slurp(dir / "b" / "tail.csv"));
  const auto rows = read_csv(dir / "a" / "tail.csv");
  CHECK(rows[0] ==
        std::vector<std::string>{"n", "c", "p_exact", "p_mc", "mc_stderr", "bahadur_rao", "ratio_exact_over_br"});
  REQUIRE(rows.size() == 5);
  CHECK(std::stod(rows[1][2]) == doctest::Approx(0.5).epsilon(1e-15));
  const double p_mc = std::stod(rows[1][3]), se = std::stod(rows[1][4]);
  CHECK(std::abs(p_mc - 0.5) <= 4 * se);

  CHECK(cli({"tail", "--config", cfg.string(), "--out", (dir / "c").string(), "--exact"}) == 0);
  CHECK(read_csv(dir / "c" / "tail.csv")[1][3] == "nan");
  CHECK(cli({"tail", "--config", cfg.string(), "--exact", "--mc"}) != 0);

  json none = toy_config();
  none["tail"]["replications"] = 0;
  CHECK(cli({"tail", "--config", write_config(dir, none).string(), "--out", dir.string(), "--mc"}) == 1);
  json heavy = toy_config();
  heavy["tail"]["budget"] = 100;
  CHECK(cli({"tail", "--config", write_config(dir, heavy).string(), "--out", dir.string(), "--exact"}) == 2);
  fs::remove_all(dir);
}

TEST_CASE("reproduce") {
  const fs::path dir = testing::scratch_dir("cli_rep");
  CHECK(cli({"reproduce", "--figure", "2", "--out", (dir / "a").string(), "--n", "2000"}) == 0);
  CHECK(cli({"reproduce", "--figure", "2", "--out", (dir / "b").string(), "--n", "2000", "--threads", "3"}) == 0);
  const json m = json::parse(testing::slurp(dir / "a" / "manifest.json"));
  CHECK(m["runs"][0]["theta_minus"] == 1.05);
  CHECK(m["runs"][0]["theta_plus"] == 1.0);
  CHECK(m["runs"][0]["kappa"] == 2.0);
  for (const auto& f : m["outputs"]) {
    const std::string name = f.get<std::string>();
    CHECK(testing::slurp(dir / "a" / name) == testing::slurp(dir / "b" / name));
  }

  CHECK(cli({"reproduce", "--figure", "1", "--out", (dir / "c").string(), "--n", "1000"}) == 0);
  const json m1 = json::parse(testing::slurp(dir / "c" / "manifest.json"));
  CHECK(m1["runs"][0]["alpha"].get<double>() == doctest::Approx(9.0 / 19));
  CHECK(m1["runs"][0]["alpha_fraction"] == "9/19");
  CHECK(m1["runs"][0]["beta"].get<double>() == doctest::Approx(0.1));
  fs::remove_all(dir);
}
