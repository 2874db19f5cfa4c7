#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spiox/inference.hpp"
#include "spiox/ioxcore.hpp"
#include "spiox/predict.hpp"

namespace spiox::cli {

// Flat `key = value` text file; '#' starts a comment. Lists are
// comma-separated.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& origin = "config");
  static KeyValues load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  std::string str(const std::string& key, const std::string& def) const;
  double num(const std::string& key, double def) const;
  std::uint64_t count(const std::string& key, std::uint64_t def) const;
  bool flag(const std::string& key, bool def) const;
  std::vector<double> list(const std::string& key) const;
  const std::map<std::string, std::string>& all() const { return values_; }
  // Throws on any key outside `known` (entries ending in '*' match a prefix).
  void check_known(const std::vector<std::string>& known) const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::string origin_;
};

struct RunConfig {
  ModelKind model = ModelKind::Response;
  ThetaMode theta_mode = ThetaMode::Full;
  ThetaUpdate theta_update = ThetaUpdate::Block;
  LatentUpdate latent_update = LatentUpdate::SingleOutcome;
  std::size_t k1 = 2;
  std::size_t vecchia_m = 15;
  OrderScheme order = OrderScheme::random(0);
  std::size_t iters = 1000, burn = 500, thin = 1;
  std::uint64_t seed = 1;
  std::size_t chains = 1;
  int threads = 1;
  std::size_t probe_sites = 100;
  bool store_w = true;
  KeyValues raw;

  static RunConfig from(const KeyValues& kv);
  void validate() const;
  IoxOptions iox() const;
  ChainConfig chain() const;
  // Default priors for (S, q, p) with the config's prior.* and grid.* keys
  // applied.
  Priors priors(const LocationSet& s, std::size_t q, std::size_t p) const;
};

// Dataset CSV: coord_1..coord_d, outcome columns, predictor columns x_*.
struct Dataset {
  LocationSet s;
  OutcomeMatrix data;  // missing cells are NaN when allowed
  std::vector<std::string> outcomes, predictors;
};

// Reads a dataset. Missing outcome cells are rejected unless
// `allow_missing`; then they become NaN.
Dataset read_dataset(const std::string& path, bool allow_missing = false);
void write_dataset(const std::string& path, const Dataset& ds);

// Header plus rows of numbers; every field printed with 17 significant digits.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};
void write_table(const std::string& path, const Table& t);
// Strict reader: rejects a file whose last row is incomplete with the byte
// offset where the damage starts.
Table read_table(const std::string& path);
std::string format_number(double x);

// Posterior summary of one scalar sequence.
struct ScalarSummary {
  double mean = 0, sd = 0, lo = 0, median = 0, hi = 0, ess = 0;
};
ScalarSummary summarize_scalar(const std::vector<std::vector<double>>& chains);
// Effective sample size over one or more chains (initial positive sequence
// estimator on the averaged autocorrelations).
double effective_sample_size(const std::vector<std::vector<double>>& chains);
double quantile(std::vector<double> x, double p);

// Writes chain output into `dir`.
void write_chains(const std::string& dir, const RunConfig& cfg, const Dataset& ds, const std::vector<Chain>& chains);

// Draws loaded back from a chain directory.
struct ChainFiles {
  std::string dir;
  std::map<std::string, std::string> meta_text;  // flat copy of meta.json scalars
  std::uint64_t s_digest = 0;
  RunConfig cfg;
  std::vector<std::string> outcomes, predictors;
  std::vector<std::size_t> chain_of;  // chain index per draw
  std::vector<Draw> draws;
  std::vector<std::string> block_names;
  Table acceptance;
};
ChainFiles read_chains(const std::string& dir);

// Text and CSV summary tables of a chain directory.
void write_summary(const ChainFiles& cf, const std::string& csv_path, const std::string& txt_path);

struct PredictOptions {
  bool noise = true;
  std::vector<double> quantiles = {0.025, 0.5, 0.975};
  std::uint64_t seed = 1;
  std::string draws_path;
};

void cmd_simulate(const RunConfig& cfg, const std::string& out_path);
void cmd_fit(const RunConfig& cfg, const std::string& data_path, const std::string& out_dir);
void cmd_predict(const std::string& chain_dir, const std::string& data_path, const std::string& test_path,
                 const std::string& out_path, const PredictOptions& opt);
void cmd_summarize(const std::string& chain_dir, const std::string& out_prefix);

// Command-line entry point; returns the process exit code (0 success,
// 2 validation, 3 numerical, 4 I/O).
int run(int argc, char** argv);

}  // namespace spiox::cli
