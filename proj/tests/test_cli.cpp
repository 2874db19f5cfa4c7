#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "spiox/cli.hpp"
#include "spiox/error.hpp"
#include "support.hpp"

using namespace spiox;
using namespace spiox::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("spiox_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

std::string slurp(const std::string& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

RunConfig config(const std::string& text) { return RunConfig::from(KeyValues::parse(text)); }

const char* kTrivariate =
    "sim.n = 60\n"
    "sim.q = 3\n"
    "sim.phi = 30\n"
    "sim.nu = 0.5, 0.8, 1.2\n"
    "sim.tau2 = 1e-3\n"
    "sim.sigma = 1, -0.9, 0.7, -0.9, 1, -0.5, 0.7, -0.5, 1\n"
    "sim.beta = 1, -1, 0.5\n"
    "seed = 4\n"
    "vecchia_m = 8\n"
    "iters = 10\n"
    "burn = 5\n"
    "probe_sites = 20\n";

int run_args(std::vector<std::string> args) {
  args.insert(args.begin(), "spiox");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace

TEST_CASE("key-value configuration parsing") {
  auto kv = KeyValues::parse("# comment\nmodel = latent  # trailing\n\niters=20\nprior.nu = 0.5, 2\n");
  CHECK(kv.str("model", "") == "latent");
  CHECK(kv.count("iters", 0) == 20);
  CHECK(kv.list("prior.nu") == std::vector<double>{0.5, 2.0});
  CHECK(kv.num("missing", 7.5) == 7.5);
  CHECK_THROWS_AS(KeyValues::parse("a = 1\na = 2\n"), ValidationError);
  CHECK_THROWS_AS(KeyValues::parse("no equals sign\n"), ValidationError);
  CHECK_THROWS_AS(KeyValues::parse("iters = ten\n").count("iters", 0), ValidationError);
  CHECK_THROWS_AS(KeyValues::parse("iters = -3\n").count("iters", 0), ValidationError);
  try {
    config("model = response\nitres = 5\n");
    FAIL("expected an unknown-key error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(config("model = lattent\n"), ValidationError);
}

TEST_CASE("run configuration checks") {
  CHECK_THROWS_AS(config("iters = 5\nburn = 6\n").validate(), ValidationError);
  CHECK_NOTHROW(config("iters = 5\nburn = 5\n").validate());
  CHECK_THROWS_AS(config("thin = 0\n").validate(), ValidationError);
  CHECK_THROWS_AS(config("theta_mode = cluster\ncluster.k1 = 0\n").validate(), ValidationError);
  auto c = config("theta_mode = grid\ngrid.nu_values = 0.5, 2.5\ngrid.phi_values = 10\nprior.tau2_fixed = 0.001\n");
  auto s = testing::random_locations(10, 2, 1);
  Priors pr = c.priors(s, 2, 1);
  REQUIRE(pr.grid.size() == 2);
  CHECK(pr.grid[1] == KernelParams{10.0, 2.5, 1e-3});
  CHECK(pr.theta.tau2.fixed);
  CHECK_THROWS_AS(config("theta_mode = grid\n").priors(s, 2, 1), ValidationError);
}

TEST_CASE("dataset reading and writing") {
  TempDir tmp;
  spit(tmp / "a.csv", "coord_1,coord_2,y_a,x_1,y_b\n0,0,1.5,1,2\n1,0,,1,3\n");
  try {
    read_dataset(tmp / "a.csv");
    FAIL("expected a missing-value error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("y_a") != std::string::npos);
  }
  Dataset ds = read_dataset(tmp / "a.csv", true);
  CHECK(ds.outcomes == std::vector<std::string>{"y_a", "y_b"});
  CHECK(ds.predictors == std::vector<std::string>{"x_1"});
  CHECK(std::isnan(ds.data.y(1, 0)));
  CHECK(ds.data.y(1, 1) == 3.0);

  spit(tmp / "b.csv", "coord_1,coord_2,y\n0,0,abc\n");
  try {
    read_dataset(tmp / "b.csv");
    FAIL("expected a parse error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  spit(tmp / "c.csv", "y,coord_1\n1,2\n");
  CHECK_THROWS_AS(read_dataset(tmp / "c.csv"), ValidationError);
  CHECK_THROWS_AS(read_dataset(tmp / "missing.csv"), IoError);

  // Seventeen significant digits reparse to the same bits.
  Dataset w;
  w.s = testing::random_locations(20, 2, 3);
  w.data.y = Eigen::MatrixXd(20, 1);
  w.data.y.col(0) = testing::random_normal(20, 4) * 1e-7;
  w.data.x = Eigen::MatrixXd(20, 0);
  w.outcomes = {"y"};
  write_dataset(tmp / "w.csv", w);
  Dataset r = read_dataset(tmp / "w.csv");
  CHECK(r.s.data() == w.s.data());
  CHECK(r.data.y == w.data.y);
}

TEST_CASE("chain tables reject truncation with a byte offset") {
  TempDir tmp;
  Table t;
  t.header = {"a", "b"};
  t.rows = {{1.0, 2.0}, {3.0, 4.0}};
  write_table(tmp / "t.csv", t);
  CHECK(read_table(tmp / "t.csv").rows == t.rows);
  std::string text = slurp(tmp / "t.csv");
  const std::size_t last = text.rfind('\n', text.size() - 2) + 1;
  spit(tmp / "t.csv", text.substr(0, text.size() - 2));
  try {
    read_table(tmp / "t.csv");
    FAIL("expected a truncation error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("byte " + std::to_string(last)) != std::string::npos);
  }
}

TEST_CASE("scalar summaries and effective sample size") {
  auto one = summarize_scalar({{2.5}});
  CHECK(one.mean == 2.5);
  CHECK(one.median == 2.5);
  CHECK(one.ess == 1.0);
  auto flat = summarize_scalar({{1.0, 1.0, 1.0, 1.0, 1.0, 1.0}});
  CHECK(flat.sd == 0.0);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> z;
  std::vector<double> iid(4000), ar(4000);
  double x = 0;
  for (int i = 0; i < 4000; ++i) {
    iid[i] = z(rng);
    x = 0.9 * x + z(rng);
    ar[i] = x;
  }
  const double e1 = effective_sample_size({iid});
  CHECK(e1 > 0.8 * 4000);
  const double want = 4000 * 0.1 / 1.9;
  const double e2 = effective_sample_size({ar});
  CHECK(e2 > 0.6 * want);
  CHECK(e2 < 1.5 * want);
  CHECK(quantile({3, 1, 2, 4}, 0.5) == 2.5);
  CHECK(quantile({3, 1, 2, 4}, 0.0) == 1.0);
}

TEST_CASE("simulate writes a dataset and truth sidecar") {
  TempDir tmp;
  auto cfg = config(kTrivariate);
  cmd_simulate(cfg, tmp / "d.csv");
  Dataset ds = read_dataset(tmp / "d.csv");
  CHECK(ds.outcomes.size() == 3);
  CHECK(ds.s.size() == 60);
  CHECK(ds.data.x.col(0).isOnes());
  CHECK(fs::exists(tmp / "d.csv.truth.json"));
  cmd_simulate(cfg, tmp / "e.csv");
  CHECK(slurp(tmp / "d.csv") == slurp(tmp / "e.csv"));

  cmd_simulate(config("sim.n = 1\nsim.q = 2\n"), tmp / "one.csv");
  CHECK(read_dataset(tmp / "one.csv").s.size() == 1);

  CHECK_THROWS_AS(cmd_simulate(config("sim.n = 5\nsim.q = 2\nsim.sigma = 1, 2, 2, 1\n"), tmp / "x.csv"),
                  ValidationError);
  CHECK_THROWS_AS(cmd_simulate(cfg, (tmp.path / "no_dir" / "x.csv").string()), IoError);
}

TEST_CASE("fit stores the requested draws deterministically") {
  TempDir tmp;
  auto cfg = config(kTrivariate);
  cmd_simulate(cfg, tmp / "d.csv");
  cmd_fit(cfg, tmp / "d.csv", tmp / "a");
  cmd_fit(cfg, tmp / "d.csv", tmp / "b");
  for (const char* f : {"sigma.csv", "theta.csv", "beta.csv", "rho.csv", "loglik.csv"}) {
    CHECK(read_table(tmp / (std::string("a/") + f)).rows.size() == 5);
    CHECK(slurp(tmp / (std::string("a/") + f)) == slurp(tmp / (std::string("b/") + f)));
  }
  ChainFiles cf = read_chains(tmp / "a");
  CHECK(cf.draws.size() == 5);
  CHECK(cf.draws[0].iteration == 5);
  std::string txt = slurp(tmp / "a/summary.txt");
  for (const char* row : {"rho_y_1_y_2", "nu_y_3", "phi_y_2", "tau2_y_1"}) CHECK(txt.find(row) != std::string::npos);

  // Fit data with a gap is rejected with the row.
  std::istringstream in(slurp(tmp / "d.csv"));
  std::string line, gap;
  for (int k = 0; std::getline(in, line); ++k) {
    if (k == 2) {
      auto a = line.find(',', line.find(',') + 1);
      auto b = line.find(',', a + 1);
      line.erase(a + 1, b - a - 1);
    }
    gap += line + "\n";
  }
  spit(tmp / "gap.csv", gap);
  try {
    cmd_fit(cfg, tmp / "gap.csv", tmp / "c");
    FAIL("expected a missing-value error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("row 2") != std::string::npos);
  }
}

TEST_CASE("summaries of a single-draw chain equal the draw") {
  TempDir tmp;
  auto cfg = config(std::string(kTrivariate) + "sample.theta = false\n");
  cfg.iters = 6;
  cfg.raw.set("iters", "6");
  cmd_simulate(cfg, tmp / "d.csv");
  cmd_fit(cfg, tmp / "d.csv", tmp / "ch");
  ChainFiles cf = read_chains(tmp / "ch");
  REQUIRE(cf.draws.size() == 1);
  cmd_summarize(tmp / "ch", tmp / "s");
  std::istringstream csv(slurp(tmp / "s.csv"));
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) {
    if (line.rfind("phi_y_1,", 0) != 0) continue;
    ++rows;
    std::vector<double> v;
    std::istringstream f(line.substr(8));
    for (std::string tok; std::getline(f, tok, ',');) v.push_back(std::stod(tok));
    REQUIRE(v.size() == 6);
    CHECK(v[0] == cf.draws[0].theta[0].phi);
    CHECK(v[1] == 0.0);
    CHECK(v[2] == v[0]);
    CHECK(v[3] == v[0]);
    CHECK(v[4] == v[0]);
    CHECK(v[5] == 1.0);
  }
  CHECK(rows == 1);
}

TEST_CASE("predict conditions on the fitted reference set") {
  TempDir tmp;
  auto cfg = config(kTrivariate);
  cmd_simulate(cfg, tmp / "d.csv");
  cmd_fit(cfg, tmp / "d.csv", tmp / "ch");
  Dataset ds = read_dataset(tmp / "d.csv");
  auto p0 = ds.s.point(0);
  std::ostringstream test;
  test.precision(17);
  test << "coord_1,coord_2,y_1,y_2,y_3,x_1\n";
  test << p0[0] << ',' << p0[1] << ",,,,1\n";
  test << "0.5,0.5,0.3,,-0.2,1\n";
  spit(tmp / "t.csv", test.str());
  PredictOptions opt;
  opt.noise = false;
  cmd_predict(tmp / "ch", tmp / "d.csv", tmp / "t.csv", tmp / "p.csv", opt);
  Table p = read_table(tmp / "p.csv");
  REQUIRE(p.rows.size() == 2);
  // Columns per outcome: observed, mean, sd, three quantiles.
  auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(p.header.begin(), p.header.end(), name) - p.header.begin());
  };
  for (int j = 1; j <= 3; ++j) {
    const std::string y = "y_" + std::to_string(j);
    CHECK(p.rows[0][col("sd_" + y)] <= 1e-10);
    CHECK(p.rows[0][col("mean_" + y)] == doctest::Approx(ds.data.y(0, j - 1)).epsilon(1e-10));
  }
  CHECK(p.rows[1][col("observed_y_1")] == 1.0);
  CHECK(p.rows[1][col("observed_y_2")] == 0.0);
  CHECK(p.rows[1][col("mean_y_1")] == 0.3);
  CHECK(p.rows[1][col("sd_y_1")] == 0.0);
  CHECK(p.rows[1][col("sd_y_2")] > 0.0);

  // A different reference set is refused.
  cmd_simulate(config(std::string(kTrivariate) + "sim.domain = 0, 2\n"), tmp / "other.csv");
  CHECK_THROWS_AS(cmd_predict(tmp / "ch", tmp / "other.csv", tmp / "t.csv", tmp / "p2.csv", opt), ValidationError);
}

TEST_CASE("latent fit and predictions with and without noise") {
  TempDir tmp;
  auto cfg = config(std::string(kTrivariate) + "model = latent\nsim.delta = 0.2\n");
  cmd_simulate(cfg, tmp / "d.csv");
  cmd_fit(cfg, tmp / "d.csv", tmp / "ch");
  CHECK(read_table(tmp / "ch/w.csv").rows.size() == 5);
  spit(tmp / "t.csv", "coord_1,coord_2,x_1\n0.4,0.6,1\n");
  PredictOptions noisy, clean;
  clean.noise = false;
  cmd_predict(tmp / "ch", tmp / "d.csv", tmp / "t.csv", tmp / "a.csv", noisy);
  cmd_predict(tmp / "ch", tmp / "d.csv", tmp / "t.csv", tmp / "b.csv", clean);
  Table a = read_table(tmp / "a.csv"), b = read_table(tmp / "b.csv");
  const std::size_t sd = 4;  // coord_1, coord_2, observed_y_1, mean_y_1, sd_y_1
  REQUIRE(a.header[sd] == "sd_y_1");
  CHECK(a.rows[0][sd] > b.rows[0][sd]);
}

TEST_CASE("grid mode writes assignments") {
  TempDir tmp;
  auto cfg = config(std::string(kTrivariate) + "theta_mode = grid\ngrid.nu_values = 0.5, 1.2\ngrid.phi_values = 30\n");
  cmd_simulate(cfg, tmp / "d.csv");
  cmd_fit(cfg, tmp / "d.csv", tmp / "ch");
  CHECK(read_table(tmp / "ch/assignment.csv").rows.size() == 5);
  CHECK(slurp(tmp / "ch/summary.txt").find("cluster assignment") != std::string::npos);
}

TEST_CASE("command-line exit codes") {
  TempDir tmp;
  spit(tmp / "sim.cfg", kTrivariate);
  CHECK(run_args({"simulate", "--config", tmp / "sim.cfg", "--out", tmp / "d.csv"}) == 0);
  CHECK(run_args({"fit", "--config", tmp / "sim.cfg", "--data", tmp / "d.csv", "--out", tmp / "ch", "--seed", "9"}) == 0);
  CHECK(read_chains(tmp / "ch").cfg.seed == 9);
  spit(tmp / "bad.cfg", "iters = 3\nburn = 4\n");
  CHECK(run_args({"fit", "--config", tmp / "bad.cfg", "--data", tmp / "d.csv", "--out", tmp / "x"}) == 2);
  CHECK(run_args({"fit", "--config", tmp / "sim.cfg", "--data", tmp / "nope.csv", "--out", tmp / "x"}) == 4);
  CHECK(run_args({"unknown"}) == 2);
  std::string theta = slurp(tmp / "ch/theta.csv");
  spit(tmp / "ch/theta.csv", theta.substr(0, theta.size() - 3));
  CHECK(run_args({"summarize", "--chain", tmp / "ch"}) == 4);
}
