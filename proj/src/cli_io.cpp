#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "spiox/cli.hpp"
#include "spiox/error.hpp"

namespace spiox::cli {

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i)
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  return out;
}

bool parse_double(std::string_view tok, double& out) {
  const std::string t = trim(tok);
  if (t.empty()) return false;
  const char* b = t.data();
  const char* e = b + t.size();
  if (*b == '+') ++b;
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Lines of a text file with their starting byte offsets; '\r' is dropped.
struct Line {
  std::string text;
  std::size_t offset;
  bool terminated;
};

std::vector<Line> lines_of(const std::string& text) {
  std::vector<Line> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    const bool term = nl != std::string::npos;
    if (!term) nl = text.size();
    std::string l = text.substr(start, nl - start);
    if (!l.empty() && l.back() == '\r') l.pop_back();
    out.push_back({std::move(l), start, term});
    start = nl + 1;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- KeyValues

KeyValues KeyValues::parse(const std::string& text, const std::string& origin) {
  KeyValues kv;
  kv.origin_ = origin;
  int line_no = 0;
  for (const auto& line : lines_of(text)) {
    ++line_no;
    std::string l = line.text;
    if (auto h = l.find('#'); h != std::string::npos) l.resize(h);
    l = trim(l);
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string::npos)
      throw ValidationError(origin + " line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(l.substr(0, eq));
    if (key.empty()) throw ValidationError(origin + " line " + std::to_string(line_no) + ": empty key");
    if (kv.values_.count(key))
      throw ValidationError(origin + " line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    kv.values_[key] = trim(l.substr(eq + 1));
    kv.lines_[key] = line_no;
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) { return parse(read_file(path), path); }

std::string KeyValues::str(const std::string& key, const std::string& def) const {
  auto it = values_.find(key);
  return it == values_.end() ? def : it->second;
}

double KeyValues::num(const std::string& key, double def) const {
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  double v;
  if (!parse_double(it->second, v))
    throw ValidationError(origin_ + ": key '" + key + "' needs a number, got '" + it->second + "'");
  return v;
}

std::uint64_t KeyValues::count(const std::string& key, std::uint64_t def) const {
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  const std::string t = trim(it->second);
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size())
    throw ValidationError(origin_ + ": key '" + key + "' needs a non-negative integer, got '" + it->second + "'");
  return v;
}

bool KeyValues::flag(const std::string& key, bool def) const {
  auto it = values_.find(key);
  if (it == values_.end()) return def;
  std::string t = trim(it->second);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "true" || t == "1" || t == "yes") return true;
  if (t == "false" || t == "0" || t == "no") return false;
  throw ValidationError(origin_ + ": key '" + key + "' needs true or false, got '" + it->second + "'");
}

std::vector<double> KeyValues::list(const std::string& key) const {
  std::vector<double> out;
  auto it = values_.find(key);
  if (it == values_.end() || trim(it->second).empty()) return out;
  for (const auto& tok : split(it->second, ',')) {
    double v;
    if (!parse_double(tok, v))
      throw ValidationError(origin_ + ": key '" + key + "' has a non-numeric entry '" + trim(tok) + "'");
    out.push_back(v);
  }
  return out;
}

void KeyValues::check_known(const std::vector<std::string>& known) const {
  for (const auto& [k, v] : values_) {
    bool ok = false;
    for (const auto& pat : known) {
      if (!pat.empty() && pat.back() == '*') {
        ok = ok || k.rfind(pat.substr(0, pat.size() - 1), 0) == 0;
      } else {
        ok = ok || k == pat;
      }
    }
    if (!ok) {
      auto ln = lines_.find(k);
      throw ValidationError(origin_ + (ln != lines_.end() ? " line " + std::to_string(ln->second) : "") +
                            ": unknown key '" + k + "'");
    }
  }
}

// ---------------------------------------------------------------- RunConfig

namespace {

const std::vector<std::string> kKnownKeys = {
    "model",        "theta_mode",    "theta_update",  "latent_update", "cluster.k1",  "grid.phi_values",
    "grid.nu_values", "grid.tau2_values", "vecchia_m", "vecchia.outcome_m", "vecchia.order",
    "vecchia.order_seed", "iters",   "burn",          "thin",          "seed",        "chains",
    "threads",      "probe_sites",   "store_w",       "mcmc.*",        "sample.*",    "prior.*",
    "sim.*"};

template <class E>
E pick(const KeyValues& kv, const std::string& key, const std::string& def,
       const std::vector<std::pair<std::string, E>>& options) {
  const std::string v = kv.str(key, def);
  for (const auto& [name, e] : options)
    if (v == name) return e;
  std::string names;
  for (const auto& [name, e] : options) names += (names.empty() ? "" : ", ") + name;
  throw ValidationError("key '" + key + "' must be one of " + names + "; got '" + v + "'");
}

ParamPrior param_prior(const KeyValues& kv, const std::string& name, const ParamPrior& def) {
  if (kv.has("prior." + name + "_fixed")) return ParamPrior::fixed_at(kv.num("prior." + name + "_fixed", 0.0));
  ParamPrior p = def;
  if (kv.has("prior." + name)) {
    auto b = kv.list("prior." + name);
    if (b.size() != 2) throw ValidationError("key 'prior." + name + "' needs two values: lo, hi");
    p.lo = b[0];
    p.hi = b[1];
  }
  if (kv.has("prior." + name + "_scale")) {
    const std::string s = kv.str("prior." + name + "_scale", "");
    if (s == "log") {
      p.log_uniform = true;
    } else if (s == "uniform") {
      p.log_uniform = false;
    } else {
      throw ValidationError("key 'prior." + name + "_scale' must be uniform or log");
    }
  }
  return p;
}

double middle(const ParamPrior& p) {
  if (p.fixed) return p.value;
  return p.log_uniform ? std::sqrt(p.lo * p.hi) : 0.5 * (p.lo + p.hi);
}

}  // namespace

RunConfig RunConfig::from(const KeyValues& kv) {
  kv.check_known(kKnownKeys);
  RunConfig c;
  c.raw = kv;
  c.model = pick<ModelKind>(kv, "model", "response", {{"response", ModelKind::Response}, {"latent", ModelKind::Latent}});
  c.theta_mode = pick<ThetaMode>(kv, "theta_mode", "full",
                                 {{"full", ThetaMode::Full}, {"grid", ThetaMode::Grid}, {"cluster", ThetaMode::Cluster}});
  c.theta_update =
      pick<ThetaUpdate>(kv, "theta_update", "block", {{"block", ThetaUpdate::Block}, {"joint", ThetaUpdate::Joint}});
  c.latent_update = pick<LatentUpdate>(kv, "latent_update", "outcome",
                                       {{"outcome", LatentUpdate::SingleOutcome}, {"site", LatentUpdate::SingleSite}});
  c.k1 = kv.count("cluster.k1", 2);
  c.vecchia_m = kv.count("vecchia_m", 15);
  const std::string order = kv.str("vecchia.order", "random");
  if (order == "random") {
    c.order = OrderScheme::random(kv.count("vecchia.order_seed", 0));
  } else if (order == "coordinate_sum") {
    c.order = OrderScheme::coordinate_sum();
  } else {
    throw ValidationError("key 'vecchia.order' must be random or coordinate_sum");
  }
  c.iters = kv.count("iters", 1000);
  c.burn = kv.count("burn", 500);
  c.thin = kv.count("thin", 1);
  c.seed = kv.count("seed", 1);
  c.chains = kv.count("chains", 1);
  c.threads = static_cast<int>(kv.count("threads", 1));
  c.probe_sites = kv.count("probe_sites", 100);
  c.store_w = kv.flag("store_w", true);
  return c;
}

void RunConfig::validate() const {
  if (burn > iters) throw ValidationError("burn (" + std::to_string(burn) + ") exceeds iters (" + std::to_string(iters) + ")");
  if (thin < 1) throw ValidationError("thin must be at least 1");
  if (k1 < 1) throw ValidationError("cluster.k1 must be at least 1");
  if (chains < 1) throw ValidationError("chains must be at least 1");
  if (threads < 1) throw ValidationError("threads must be at least 1");
  chain().validate();
}

IoxOptions RunConfig::iox() const {
  IoxOptions o;
  o.m = vecchia_m;
  o.order = order;
  for (double v : raw.list("vecchia.outcome_m")) {
    if (v < 0 || v != std::floor(v)) throw ValidationError("vecchia.outcome_m entries must be non-negative integers");
    o.outcome_m.push_back(static_cast<std::size_t>(v));
  }
  return o;
}

ChainConfig RunConfig::chain() const {
  ChainConfig c;
  c.model = model;
  c.theta_mode = theta_mode;
  c.theta_update = theta_update;
  c.latent_update = latent_update;
  c.k1 = k1;
  c.iox = iox();
  c.iters = iters;
  c.burn = burn;
  c.thin = thin;
  c.seed = seed;
  c.sample_theta = raw.flag("sample.theta", true);
  c.sample_sigma = raw.flag("sample.sigma", true);
  c.sample_beta = raw.flag("sample.beta", true);
  c.sample_w = raw.flag("sample.w", true);
  c.sample_delta = raw.flag("sample.delta", true);
  c.target_block = raw.num("mcmc.target_block", c.target_block);
  c.target_joint = raw.num("mcmc.target_joint", c.target_joint);
  c.pcg_tol = raw.num("mcmc.pcg_tol", c.pcg_tol);
  c.probe_sites = probe_sites;
  c.store_w = store_w;
  return c;
}

Priors RunConfig::priors(const LocationSet& s, std::size_t q, std::size_t p) const {
  Priors pr = Priors::defaults(s, q, p);
  const auto pq = static_cast<Eigen::Index>(p * q);
  if (raw.has("prior.beta_mean")) {
    auto m = raw.list("prior.beta_mean");
    if (m.size() == 1) {
      pr.beta_mean = Eigen::VectorXd::Constant(pq, m[0]);
    } else if (static_cast<Eigen::Index>(m.size()) == pq) {
      pr.beta_mean = Eigen::Map<Eigen::VectorXd>(m.data(), pq);
    } else {
      throw ValidationError("prior.beta_mean needs 1 or p*q values");
    }
  }
  if (raw.has("prior.beta_var")) {
    const double v = raw.num("prior.beta_var", 100.0);
    if (!(v > 0)) throw ValidationError("prior.beta_var must be positive");
    pr.beta_precision = Eigen::MatrixXd::Identity(pq, pq) / v;
  }
  pr.sigma_df = raw.num("prior.sigma_df", pr.sigma_df);
  pr.sigma_scale = raw.num("prior.sigma_scale", 1.0) * Eigen::MatrixXd::Identity(q, q);
  pr.delta_shape = raw.num("prior.delta_shape", pr.delta_shape);
  pr.delta_scale = raw.num("prior.delta_scale", pr.delta_scale);
  pr.theta.phi = param_prior(raw, "phi", pr.theta.phi);
  pr.theta.nu = param_prior(raw, "nu", pr.theta.nu);
  pr.theta.tau2 = param_prior(raw, "tau2", pr.theta.tau2);
  if (theta_mode == ThetaMode::Grid) {
    auto phis = raw.list("grid.phi_values");
    auto nus = raw.list("grid.nu_values");
    auto taus = raw.list("grid.tau2_values");
    if (phis.empty()) phis = {middle(pr.theta.phi)};
    if (nus.empty()) throw ValidationError("grid mode needs grid.nu_values");
    if (taus.empty()) taus = {middle(pr.theta.tau2)};
    pr.grid.clear();
    for (double ph : phis)
      for (double nu : nus)
        for (double t2 : taus) pr.grid.push_back({ph, nu, t2});
  }
  pr.validate(q, p);
  return pr;
}

// ------------------------------------------------------------------ Dataset

Dataset read_dataset(const std::string& path, bool allow_missing) {
  const auto lines = lines_of(read_file(path));
  if (lines.empty()) throw ValidationError(path + ": empty file");
  const auto header = split(lines[0].text, ',');
  std::vector<std::string> names;
  for (const auto& h : header) names.push_back(trim(h));
  std::size_t d = 0;
  while (d < names.size() && names[d] == "coord_" + std::to_string(d + 1)) ++d;
  if (d == 0) throw ValidationError(path + ": the first column must be coord_1");
  Dataset ds;
  std::vector<std::size_t> ycol, xcol;
  for (std::size_t c = d; c < names.size(); ++c) {
    if (names[c].empty()) throw ValidationError(path + ": empty column name at column " + std::to_string(c + 1));
    if (names[c].rfind("coord_", 0) == 0)
      throw ValidationError(path + ": coordinate column '" + names[c] + "' must come first and in order");
    if (names[c].rfind("x_", 0) == 0) {
      xcol.push_back(c);
      ds.predictors.push_back(names[c]);
    } else {
      ycol.push_back(c);
      ds.outcomes.push_back(names[c]);
    }
  }
  if (!allow_missing && ycol.empty()) throw ValidationError(path + ": no outcome columns");

  std::vector<double> coords;
  std::vector<std::vector<double>> ys, xs;
  std::size_t row = 0;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (trim(lines[li].text).empty()) continue;
    const auto f = split(lines[li].text, ',');
    const std::string where = path + " line " + std::to_string(li + 1) + " (row " + std::to_string(row + 1) + ")";
    if (f.size() != names.size())
      throw ValidationError(where + ": expected " + std::to_string(names.size()) + " fields, found " +
                            std::to_string(f.size()));
    for (std::size_t c = 0; c < d; ++c) {
      double v;
      if (!parse_double(f[c], v) || !std::isfinite(v))
        throw ValidationError(where + ", column " + names[c] + ": invalid coordinate '" + trim(f[c]) + "'");
      coords.push_back(v);
    }
    std::vector<double> yr, xr;
    for (std::size_t c : ycol) {
      double v;
      if (trim(f[c]).empty()) {
        if (!allow_missing) throw ValidationError(where + ", column " + names[c] + ": missing outcome value");
        v = std::numeric_limits<double>::quiet_NaN();
      } else if (!parse_double(f[c], v) || !std::isfinite(v)) {
        throw ValidationError(where + ", column " + names[c] + ": invalid number '" + trim(f[c]) + "'");
      }
      yr.push_back(v);
    }
    for (std::size_t c : xcol) {
      double v;
      if (!parse_double(f[c], v) || !std::isfinite(v))
        throw ValidationError(where + ", column " + names[c] + ": invalid predictor '" + trim(f[c]) + "'");
      xr.push_back(v);
    }
    ys.push_back(std::move(yr));
    xs.push_back(std::move(xr));
    ++row;
  }
  if (row == 0) throw ValidationError(path + ": no data rows");
  ds.s = LocationSet(std::move(coords), d);
  ds.data.y.resize(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(ycol.size()));
  ds.data.x.resize(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(xcol.size()));
  for (std::size_t i = 0; i < row; ++i) {
    for (std::size_t j = 0; j < ycol.size(); ++j) ds.data.y(i, j) = ys[i][j];
    for (std::size_t j = 0; j < xcol.size(); ++j) ds.data.x(i, j) = xs[i][j];
  }
  return ds;
}

std::string format_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  return out;
}

void close_out(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace

void write_dataset(const std::string& path, const Dataset& ds) {
  auto out = open_out(path);
  const std::size_t d = ds.s.dim();
  for (std::size_t c = 0; c < d; ++c) out << (c ? "," : "") << "coord_" << c + 1;
  for (const auto& n : ds.outcomes) out << ',' << n;
  for (const auto& n : ds.predictors) out << ',' << n;
  out << '\n';
  for (std::size_t i = 0; i < ds.s.size(); ++i) {
    auto p = ds.s.point(i);
    for (std::size_t c = 0; c < d; ++c) out << (c ? "," : "") << format_number(p[c]);
    for (Eigen::Index j = 0; j < ds.data.y.cols(); ++j) {
      out << ',';
      const double v = ds.data.y(static_cast<Eigen::Index>(i), j);
      if (std::isfinite(v)) out << format_number(v);
    }
    for (Eigen::Index j = 0; j < ds.data.x.cols(); ++j) out << ',' << format_number(ds.data.x(static_cast<Eigen::Index>(i), j));
    out << '\n';
  }
  close_out(out, path);
}

void write_table(const std::string& path, const Table& t) {
  auto out = open_out(path);
  for (std::size_t c = 0; c < t.header.size(); ++c) out << (c ? "," : "") << t.header[c];
  out << '\n';
  std::string line;
  for (const auto& r : t.rows) {
    line.clear();
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) line += ',';
      line += format_number(r[c]);
    }
    out << line << '\n';
  }
  close_out(out, path);
}

Table read_table(const std::string& path) {
  const std::string text = read_file(path);
  const auto lines = lines_of(text);
  if (lines.empty() || !lines[0].terminated) throw IoError(path + ": truncated file at byte 0 (no complete header)");
  Table t;
  for (const auto& h : split(lines[0].text, ',')) t.header.push_back(trim(h));
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const auto& l = lines[li];
    const auto f = split(l.text, ',');
    if (!l.terminated || f.size() != t.header.size())
      throw IoError(path + ": truncated or malformed row at byte " + std::to_string(l.offset) + " (line " +
                    std::to_string(li + 1) + ")");
    std::vector<double> r(f.size());
    for (std::size_t c = 0; c < f.size(); ++c)
      if (!parse_double(f[c], r[c]))
        throw IoError(path + ": unreadable number '" + trim(f[c]) + "' at byte " + std::to_string(l.offset) +
                      " (line " + std::to_string(li + 1) + ")");
    t.rows.push_back(std::move(r));
  }
  return t;
}

// ---------------------------------------------------------------- summaries

double quantile(std::vector<double> x, double p) {
  if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(x.begin(), x.end());
  const double h = p * static_cast<double>(x.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

double effective_sample_size(const std::vector<std::vector<double>>& chains) {
  std::size_t total = 0, len = std::numeric_limits<std::size_t>::max();
  for (const auto& c : chains) {
    total += c.size();
    len = std::min(len, c.size());
  }
  if (total <= 1 || len == 0) return static_cast<double>(total);
  if (len < 4) return static_cast<double>(total);
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    const double m = std::accumulate(c.begin(), c.begin() + len, 0.0) / static_cast<double>(len);
    double v = 0;
    for (std::size_t i = 0; i < len; ++i) v += (c[i] - m) * (c[i] - m);
    means.push_back(m);
    vars.push_back(v / static_cast<double>(len));
  }
  const double var0 = std::accumulate(vars.begin(), vars.end(), 0.0) / static_cast<double>(vars.size());
  if (!(var0 > 0)) return static_cast<double>(total);
  auto rho = [&](std::size_t lag) {
    double acc = 0;
    for (std::size_t k = 0; k < chains.size(); ++k)
      for (std::size_t i = 0; i + lag < len; ++i) acc += (chains[k][i] - means[k]) * (chains[k][i + lag] - means[k]);
    return acc / static_cast<double>(len * chains.size()) / var0;
  };
  double tau = -1.0, prev = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; 2 * k + 1 < len; ++k) {
    double pair = rho(2 * k) + rho(2 * k + 1);
    if (pair <= 0) break;
    pair = std::min(pair, prev);
    prev = pair;
    tau += 2.0 * pair;
  }
  if (!(tau > 0)) return static_cast<double>(total);
  return std::min(static_cast<double>(total), static_cast<double>(total) / tau);
}

ScalarSummary summarize_scalar(const std::vector<std::vector<double>>& chains) {
  std::vector<double> all;
  for (const auto& c : chains) all.insert(all.end(), c.begin(), c.end());
  ScalarSummary s;
  if (all.empty()) return s;
  const double n = static_cast<double>(all.size());
  s.mean = std::accumulate(all.begin(), all.end(), 0.0) / n;
  double v = 0;
  for (double x : all) v += (x - s.mean) * (x - s.mean);
  s.sd = all.size() > 1 ? std::sqrt(v / (n - 1)) : 0.0;
  s.lo = quantile(all, 0.025);
  s.median = quantile(all, 0.5);
  s.hi = quantile(all, 0.975);
  s.ess = effective_sample_size(chains);
  return s;
}

}  // namespace spiox::cli
