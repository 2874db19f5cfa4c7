#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "spiox/cli.hpp"
#include "spiox/error.hpp"
#include "spiox/parallel.hpp"

namespace spiox::cli {

using nlohmann::json;

namespace {

std::string hex_digest(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const char* model_name(ModelKind k) { return k == ModelKind::Latent ? "latent" : "response"; }

std::string join(const std::string& dir, const std::string& file) { return (std::filesystem::path(dir) / file).string(); }

bool has_clusters(const RunConfig& cfg) { return cfg.theta_mode != ThetaMode::Full; }

std::vector<std::string> upper_pairs(const std::string& prefix, const std::vector<std::string>& names, bool diag) {
  std::vector<std::string> out;
  for (std::size_t a = 0; a < names.size(); ++a)
    for (std::size_t b = diag ? a : a + 1; b < names.size(); ++b) out.push_back(prefix + names[a] + "_" + names[b]);
  return out;
}

// Column layouts of the per-group chain files (after chain, iteration).
struct Layout {
  std::vector<std::string> beta, sigma, theta, rho, delta, w, pi, cluster;
};

Layout layout(const RunConfig& cfg, const std::vector<std::string>& ys, const std::vector<std::string>& xs,
              std::size_t n, std::size_t k) {
  Layout l;
  for (const auto& y : ys)
    for (const auto& x : xs) l.beta.push_back("beta_" + x + "_" + y);
  l.sigma = upper_pairs("sigma_", ys, true);
  for (const auto& y : ys) {
    l.theta.push_back("phi_" + y);
    l.theta.push_back("nu_" + y);
    l.theta.push_back("tau2_" + y);
  }
  l.rho = upper_pairs("rho_", ys, false);
  if (cfg.model == ModelKind::Latent) {
    for (const auto& y : ys) l.delta.push_back("delta_" + y);
    if (cfg.store_w)
      for (const auto& y : ys)
        for (std::size_t i = 0; i < n; ++i) l.w.push_back("w_" + y + "_" + std::to_string(i + 1));
  }
  if (has_clusters(cfg)) {
    for (const auto& y : ys) l.pi.push_back("pi_" + y);
    for (std::size_t c = 0; c < k; ++c) {
      const std::string s = std::to_string(c + 1);
      l.cluster.push_back("phi_c" + s);
      l.cluster.push_back("nu_c" + s);
      l.cluster.push_back("tau2_c" + s);
    }
  }
  return l;
}

std::size_t cluster_count(const RunConfig& cfg, const std::vector<Chain>& chains) {
  for (const auto& c : chains)
    if (!c.draws.empty()) return c.draws[0].cluster_theta.size();
  return cfg.theta_mode == ThetaMode::Cluster ? cfg.k1 : 0;
}

Table start(const std::vector<std::string>& cols) {
  Table t;
  t.header = {"chain", "iteration"};
  t.header.insert(t.header.end(), cols.begin(), cols.end());
  return t;
}

void check_header(const Table& t, const std::vector<std::string>& cols, const std::string& path) {
  if (t.header != start(cols).header) throw IoError(path + ": unexpected column layout");
}

std::map<std::string, std::vector<std::vector<double>>> scalar_series(const ChainFiles& cf) {
  const std::size_t nchains = cf.cfg.chains;
  std::map<std::string, std::vector<std::vector<double>>> out;
  std::vector<std::string> order;
  auto add = [&](const std::string& name, std::size_t chain, double v) {
    auto& s = out[name];
    if (s.empty()) s.resize(nchains);
    s[chain].push_back(v);
  };
  const auto& ys = cf.outcomes;
  const std::size_t q = ys.size();
  for (std::size_t k = 0; k < cf.draws.size(); ++k) {
    const Draw& d = cf.draws[k];
    const std::size_t c = cf.chain_of[k];
    for (std::size_t j = 0; j < q; ++j)
      for (std::size_t x = 0; x < cf.predictors.size(); ++x) add("beta_" + cf.predictors[x] + "_" + ys[j], c, d.B(x, j));
    for (std::size_t a = 0; a < q; ++a)
      for (std::size_t b = a; b < q; ++b) add("sigma_" + ys[a] + "_" + ys[b], c, d.Sigma(a, b));
    for (std::size_t j = 0; j < q; ++j) {
      add("phi_" + ys[j], c, d.theta[j].phi);
      add("nu_" + ys[j], c, d.theta[j].nu);
      add("tau2_" + ys[j], c, d.theta[j].tau2);
    }
    for (std::size_t a = 0; a < q; ++a)
      for (std::size_t b = a + 1; b < q; ++b) add("rho_" + ys[a] + "_" + ys[b], c, d.rho(a, b));
    for (Eigen::Index j = 0; j < d.delta.size(); ++j) add("delta_" + ys[j], c, d.delta(j));
    add("loglik", c, d.loglik);
  }
  return out;
}

std::vector<std::string> summary_order(const ChainFiles& cf) {
  const auto l = layout(cf.cfg, cf.outcomes, cf.predictors, 0, 0);
  std::vector<std::string> names;
  for (auto* g : {&l.rho, &l.theta, &l.sigma, &l.beta, &l.delta}) names.insert(names.end(), g->begin(), g->end());
  names.push_back("loglik");
  return names;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path + "' failed");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

// ------------------------------------------------------------ chain files

void write_chains(const std::string& dir, const RunConfig& cfg, const Dataset& ds, const std::vector<Chain>& chains) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  const std::size_t q = ds.outcomes.size(), p = ds.predictors.size(), n = ds.s.size();
  const std::size_t k = cluster_count(cfg, chains);
  const Layout l = layout(cfg, ds.outcomes, ds.predictors, n, k);
  Table beta = start(l.beta), sigma = start(l.sigma), theta = start(l.theta), rho = start(l.rho),
        delta = start(l.delta), w = start(l.w), pi = start(l.pi), cluster = start(l.cluster), loglik = start({"loglik"});
  for (const auto& ch : chains)
    for (const auto& d : ch.draws) {
      const std::vector<double> head = {static_cast<double>(ch.index), static_cast<double>(d.iteration)};
      auto row = [&] { return head; };
      auto r = row();
      for (std::size_t j = 0; j < q; ++j)
        for (std::size_t x = 0; x < p; ++x) r.push_back(d.B(x, j));
      beta.rows.push_back(r);
      r = row();
      for (std::size_t a = 0; a < q; ++a)
        for (std::size_t b = a; b < q; ++b) r.push_back(d.Sigma(a, b));
      sigma.rows.push_back(r);
      r = row();
      for (const auto& t : d.theta) r.insert(r.end(), {t.phi, t.nu, t.tau2});
      theta.rows.push_back(r);
      r = row();
      for (std::size_t a = 0; a < q; ++a)
        for (std::size_t b = a + 1; b < q; ++b) r.push_back(d.rho(a, b));
      rho.rows.push_back(r);
      r = row();
      r.push_back(d.loglik);
      loglik.rows.push_back(r);
      if (!l.delta.empty()) {
        r = row();
        for (Eigen::Index j = 0; j < d.delta.size(); ++j) r.push_back(d.delta(j));
        delta.rows.push_back(r);
      }
      if (!l.w.empty()) {
        r = row();
        r.insert(r.end(), d.W.data(), d.W.data() + d.W.size());
        w.rows.push_back(r);
      }
      if (!l.pi.empty()) {
        r = row();
        for (int c : d.pi) r.push_back(c);
        pi.rows.push_back(r);
        r = row();
        for (const auto& t : d.cluster_theta) r.insert(r.end(), {t.phi, t.nu, t.tau2});
        cluster.rows.push_back(r);
      }
    }
  if (p > 0) write_table(join(dir, "beta.csv"), beta);
  write_table(join(dir, "sigma.csv"), sigma);
  write_table(join(dir, "theta.csv"), theta);
  write_table(join(dir, "rho.csv"), rho);
  write_table(join(dir, "loglik.csv"), loglik);
  if (!l.delta.empty()) write_table(join(dir, "delta.csv"), delta);
  if (!l.w.empty()) write_table(join(dir, "w.csv"), w);
  if (!l.pi.empty()) {
    write_table(join(dir, "assignment.csv"), pi);
    write_table(join(dir, "cluster_theta.csv"), cluster);
  }

  Table acc;
  acc.header = {"chain", "block", "accepted", "proposed", "rate"};
  json jchains = json::array();
  for (const auto& ch : chains) {
    for (std::size_t b = 0; b < ch.accepted.size(); ++b)
      acc.rows.push_back({static_cast<double>(ch.index), static_cast<double>(b), static_cast<double>(ch.accepted[b]),
                          static_cast<double>(ch.proposed[b]), ch.acceptance_rate(b)});
    jchains.push_back({{"index", ch.index}, {"seed", ch.seed}, {"draws", ch.draws.size()},
                       {"wall_seconds", ch.wall_seconds}, {"seconds", ch.seconds}});
  }
  write_table(join(dir, "acceptance.csv"), acc);

  json meta;
  meta["format"] = "spiox-chain";
  meta["version"] = 1;
  meta["s_digest"] = hex_digest(ds.s.digest());
  meta["n"] = n;
  meta["d"] = ds.s.dim();
  meta["q"] = q;
  meta["p"] = p;
  meta["clusters"] = k;
  meta["outcomes"] = ds.outcomes;
  meta["predictors"] = ds.predictors;
  meta["model"] = model_name(cfg.model);
  meta["config"] = cfg.raw.all();
  meta["block_names"] = chains.empty() ? std::vector<std::string>{} : chains[0].block_names;
  meta["chains"] = jchains;
  write_text(join(dir, "meta.json"), meta.dump(2) + "\n");
}

ChainFiles read_chains(const std::string& dir) {
  ChainFiles cf;
  cf.dir = dir;
  const std::string mpath = join(dir, "meta.json");
  json meta;
  {
    std::ifstream in(mpath);
    if (!in) throw IoError("cannot open '" + mpath + "' for reading");
    try {
      meta = json::parse(in);
      if (meta.at("format") != "spiox-chain") throw IoError(mpath + ": not a chain metadata file");
      cf.s_digest = std::stoull(meta.at("s_digest").get<std::string>(), nullptr, 16);
      cf.outcomes = meta.at("outcomes").get<std::vector<std::string>>();
      cf.predictors = meta.at("predictors").get<std::vector<std::string>>();
      cf.block_names = meta.at("block_names").get<std::vector<std::string>>();
      KeyValues kv;
      for (const auto& [key, v] : meta.at("config").items()) kv.set(key, v.get<std::string>());
      cf.cfg = RunConfig::from(kv);
      for (const auto& [key, v] : meta.items())
        if (v.is_primitive()) cf.meta_text[key] = v.is_string() ? v.get<std::string>() : v.dump();
    } catch (const json::exception& e) {
      throw IoError(mpath + ": " + e.what());
    }
  }
  const std::size_t n = meta["n"].get<std::size_t>(), q = cf.outcomes.size(), p = cf.predictors.size();
  const std::size_t k = meta["clusters"].get<std::size_t>();
  const Layout l = layout(cf.cfg, cf.outcomes, cf.predictors, n, k);

  auto load = [&](const std::string& name, const std::vector<std::string>& cols) {
    const std::string path = join(dir, name);
    Table t = read_table(path);
    check_header(t, cols, path);
    return t;
  };
  const Table sigma = load("sigma.csv", l.sigma), theta = load("theta.csv", l.theta), rho = load("rho.csv", l.rho),
              loglik = load("loglik.csv", {"loglik"});
  const Table beta = p > 0 ? load("beta.csv", l.beta) : Table{};
  const Table delta = l.delta.empty() ? Table{} : load("delta.csv", l.delta);
  Table w;
  if (!l.w.empty() && std::filesystem::exists(join(dir, "w.csv"))) w = load("w.csv", l.w);
  const Table pi = l.pi.empty() ? Table{} : load("assignment.csv", l.pi);
  const Table cluster = l.pi.empty() ? Table{} : load("cluster_theta.csv", l.cluster);
  cf.acceptance = read_table(join(dir, "acceptance.csv"));

  const std::size_t rows = sigma.rows.size();
  for (const Table* t : {&theta, &rho, &loglik})
    if (t->rows.size() != rows) throw IoError(dir + ": chain files disagree on the number of draws");
  for (const Table* t : std::initializer_list<const Table*>{&beta, &delta, &w, &pi, &cluster})
    if (!t->header.empty() && t->rows.size() != rows)
      throw IoError(dir + ": chain files disagree on the number of draws");

  for (std::size_t r = 0; r < rows; ++r) {
    Draw d;
    cf.chain_of.push_back(static_cast<std::size_t>(sigma.rows[r][0]));
    d.iteration = static_cast<std::size_t>(sigma.rows[r][1]);
    d.B.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q));
    for (std::size_t j = 0, c = 2; j < q; ++j)
      for (std::size_t x = 0; x < p; ++x) d.B(x, j) = beta.rows[r][c++];
    d.Sigma.resize(q, q);
    for (std::size_t a = 0, c = 2; a < q; ++a)
      for (std::size_t b = a; b < q; ++b) d.Sigma(a, b) = d.Sigma(b, a) = sigma.rows[r][c++];
    for (std::size_t j = 0; j < q; ++j)
      d.theta.push_back({theta.rows[r][2 + 3 * j], theta.rows[r][3 + 3 * j], theta.rows[r][4 + 3 * j]});
    d.rho = Eigen::MatrixXd::Identity(q, q);
    for (std::size_t a = 0, c = 2; a < q; ++a)
      for (std::size_t b = a + 1; b < q; ++b) d.rho(a, b) = d.rho(b, a) = rho.rows[r][c++];
    d.loglik = loglik.rows[r][2];
    if (!delta.header.empty()) d.delta = Eigen::Map<const Eigen::VectorXd>(delta.rows[r].data() + 2, q);
    if (!w.header.empty()) d.W = Eigen::Map<const Eigen::MatrixXd>(w.rows[r].data() + 2, n, q);
    if (!pi.header.empty()) {
      for (std::size_t j = 0; j < q; ++j) d.pi.push_back(static_cast<int>(pi.rows[r][2 + j]));
      for (std::size_t c = 0; c < k; ++c)
        d.cluster_theta.push_back(
            {cluster.rows[r][2 + 3 * c], cluster.rows[r][3 + 3 * c], cluster.rows[r][4 + 3 * c]});
    }
    cf.draws.push_back(std::move(d));
  }
  return cf;
}

// ----------------------------------------------------------------- summary

void write_summary(const ChainFiles& cf, const std::string& csv_path, const std::string& txt_path) {
  const auto series = scalar_series(cf);
  const auto names = summary_order(cf);
  std::ostringstream csv, txt;
  csv << "parameter,mean,sd,q2.5,q50,q97.5,ess\n";
  txt << "model: " << model_name(cf.cfg.model) << "\n";
  txt << "draws: " << cf.draws.size() << " over " << cf.cfg.chains << " chain(s)\n\n";

  if (!cf.acceptance.rows.empty()) {
    txt << "acceptance rates\n";
    for (const auto& r : cf.acceptance.rows) {
      const auto b = static_cast<std::size_t>(r[1]);
      const std::string name = b < cf.block_names.size() ? cf.block_names[b] : std::to_string(b);
      char line[160];
      std::snprintf(line, sizeof line, "  chain %zu  %-16s %8.4f  (%zu / %zu)\n", static_cast<std::size_t>(r[0]),
                    name.c_str(), r[4], static_cast<std::size_t>(r[2]), static_cast<std::size_t>(r[3]));
      txt << line;
    }
    txt << "\n";
  }

  char line[256];
  std::snprintf(line, sizeof line, "%-28s %12s %12s %12s %12s %12s %9s\n", "parameter", "mean", "sd", "q2.5", "q50",
                "q97.5", "ess");
  txt << line;
  for (const auto& name : names) {
    auto it = series.find(name);
    if (it == series.end()) continue;
    const ScalarSummary s = summarize_scalar(it->second);
    csv << name << ',' << format_number(s.mean) << ',' << format_number(s.sd) << ',' << format_number(s.lo) << ','
        << format_number(s.median) << ',' << format_number(s.hi) << ',' << format_number(s.ess) << '\n';
    std::snprintf(line, sizeof line, "%-28s %12.5g %12.5g %12.5g %12.5g %12.5g %9.1f\n", name.c_str(), s.mean, s.sd,
                  s.lo, s.median, s.hi, s.ess);
    txt << line;
  }

  const std::size_t q = cf.outcomes.size();
  if (!cf.draws.empty()) {
    Eigen::MatrixXd rho = Eigen::MatrixXd::Zero(q, q);
    for (const auto& d : cf.draws) rho += d.rho;
    rho /= static_cast<double>(cf.draws.size());
    txt << "\nzero-distance cross-correlation (posterior mean)\n";
    std::snprintf(line, sizeof line, "%-12s", "");
    txt << line;
    for (const auto& y : cf.outcomes) {
      std::snprintf(line, sizeof line, " %10s", y.c_str());
      txt << line;
    }
    txt << "\n";
    for (std::size_t a = 0; a < q; ++a) {
      std::snprintf(line, sizeof line, "%-12s", cf.outcomes[a].c_str());
      txt << line;
      for (std::size_t b = 0; b < q; ++b) txt << fmt(" %10.4f", rho(a, b));
      txt << "\n";
    }

    if (!cf.draws[0].pi.empty()) {
      txt << "\ncluster assignment (posterior mode and its probability)\n";
      for (std::size_t j = 0; j < q; ++j) {
        std::map<int, std::size_t> counts;
        for (const auto& d : cf.draws) ++counts[d.pi[j]];
        auto best = counts.begin();
        for (auto it = counts.begin(); it != counts.end(); ++it)
          if (it->second > best->second) best = it;
        const double prob = static_cast<double>(best->second) / static_cast<double>(cf.draws.size());
        csv << "pi_" << cf.outcomes[j] << "_mode," << best->first + 1 << ",,,,," << '\n';
        std::snprintf(line, sizeof line, "  %-12s cluster %d  (%.3f)\n", cf.outcomes[j].c_str(), best->first + 1, prob);
        txt << line;
      }
    }
  }
  write_text(csv_path, csv.str());
  write_text(txt_path, txt.str());
}

// ---------------------------------------------------------------- commands

void cmd_simulate(const RunConfig& cfg, const std::string& out_path) {
  const KeyValues& kv = cfg.raw;
  if (!kv.has("sim.n")) throw ValidationError("simulate needs sim.n");
  const std::size_t n = kv.count("sim.n", 0), d = kv.count("sim.d", 2);
  if (n == 0) throw ValidationError("sim.n must be positive");
  if (d == 0) throw ValidationError("sim.d must be positive");
  auto phi = kv.list("sim.phi"), nu = kv.list("sim.nu"), tau2 = kv.list("sim.tau2");
  std::size_t q = kv.count("sim.q", std::max({phi.size(), nu.size(), tau2.size(), std::size_t{1}}));
  auto per = [&](std::vector<double>& v, double def, const char* key) {
    if (v.empty()) v = {def};
    if (v.size() == 1) v.assign(q, v[0]);
    if (v.size() != q) throw ValidationError(std::string(key) + " needs 1 or q values");
  };
  per(phi, 10.0, "sim.phi");
  per(nu, 0.5, "sim.nu");
  per(tau2, 0.0, "sim.tau2");
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(q, q);
  if (kv.has("sim.sigma")) {
    auto s = kv.list("sim.sigma");
    if (s.size() != q * q) throw ValidationError("sim.sigma needs q*q values (row-major)");
    sigma = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(s.data(), q, q);
    if ((sigma - sigma.transpose()).cwiseAbs().maxCoeff() > 0) throw ValidationError("sim.sigma is not symmetric");
  }
  spd_inverse(sigma, "sim.sigma");
  std::vector<KernelParams> theta;
  for (std::size_t j = 0; j < q; ++j) {
    theta.push_back({phi[j], nu[j], tau2[j]});
    validate(theta.back());
  }
  auto betav = kv.list("sim.beta");
  if (betav.size() % q) throw ValidationError("sim.beta needs p*q values (row-major p x q)");
  const std::size_t p = betav.size() / q;
  Eigen::MatrixXd B(p, q);
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) B(i, j) = betav[i * q + j];
  const bool intercept = kv.flag("sim.intercept", true);
  auto delta = kv.list("sim.delta");
  if (cfg.model == ModelKind::Latent) per(delta, 0.1, "sim.delta");
  auto domain = kv.list("sim.domain");
  if (domain.empty()) domain = {0.0, 1.0};
  if (domain.size() != 2 || !(domain[1] > domain[0])) throw ValidationError("sim.domain needs lo, hi with lo < hi");

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32), 0x53u, 0x49u};
  Rng rng(seq);
  std::uniform_real_distribution<double> u(domain[0], domain[1]);
  std::vector<double> coords(n * d);
  for (auto& c : coords) c = u(rng);
  Dataset ds;
  ds.s = LocationSet(std::move(coords), d);
  ds.data.x.resize(n, p);
  for (std::size_t k = 0; k < p; ++k)
    ds.data.x.col(k) = (k == 0 && intercept) ? Eigen::VectorXd::Ones(n) : draw_normal(n, rng);
  IoxOptions opt = cfg.iox();
  opt.m = kv.count("sim.m", 0);
  opt.outcome_m.clear();
  IoxModel model(ds.s, theta, sigma, opt);
  ds.data.y = simulate_prior_reference(model, rng);
  if (p > 0) ds.data.y += ds.data.x * B;
  if (cfg.model == ModelKind::Latent)
    for (std::size_t j = 0; j < q; ++j) ds.data.y.col(j) += std::sqrt(delta[j]) * draw_normal(n, rng);
  for (std::size_t j = 0; j < q; ++j) ds.outcomes.push_back("y_" + std::to_string(j + 1));
  for (std::size_t k = 0; k < p; ++k) ds.predictors.push_back("x_" + std::to_string(k + 1));
  write_dataset(out_path, ds);

  json truth;
  truth["n"] = n;
  truth["d"] = d;
  truth["q"] = q;
  truth["p"] = p;
  truth["seed"] = cfg.seed;
  truth["model"] = model_name(cfg.model);
  truth["s_digest"] = hex_digest(ds.s.digest());
  auto rows = [](const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> r(m.rows(), std::vector<double>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
    return r;
  };
  truth["sigma"] = rows(sigma);
  json th = json::array();
  for (const auto& t : theta) th.push_back({{"phi", t.phi}, {"nu", t.nu}, {"tau2", t.tau2}});
  truth["theta"] = th;
  truth["beta"] = rows(B);
  if (cfg.model == ModelKind::Latent) truth["delta"] = delta;
  truth["zero_distance_corr"] = rows(model.zero_distance_cross_corr(probe_subset(ds.s, cfg.probe_sites)));
  write_text(out_path + ".truth.json", truth.dump(2) + "\n");
}

void cmd_fit(const RunConfig& cfg, const std::string& data_path, const std::string& out_dir) {
  cfg.validate();
  const Dataset ds = read_dataset(data_path, false);
  ds.data.validate(ds.s.size());
  set_num_threads(cfg.threads);
  const Priors pr = cfg.priors(ds.s, ds.data.q(), ds.data.p());
  const auto chains = run_chains(ds.s, ds.data, pr, cfg.chain(), cfg.chains);
  write_chains(out_dir, cfg, ds, chains);
  const ChainFiles cf = read_chains(out_dir);
  write_summary(cf, join(out_dir, "summary.csv"), join(out_dir, "summary.txt"));
}

void cmd_predict(const std::string& chain_dir, const std::string& data_path, const std::string& test_path,
                 const std::string& out_path, const PredictOptions& opt) {
  const ChainFiles cf = read_chains(chain_dir);
  if (cf.draws.empty()) throw ValidationError(chain_dir + ": chain has no stored draws");
  const Dataset ds = read_dataset(data_path, false);
  if (ds.s.digest() != cf.s_digest)
    throw ValidationError("reference set of '" + data_path + "' does not match the fitted chain (digest " +
                          hex_digest(ds.s.digest()) + " vs " + hex_digest(cf.s_digest) + ")");
  if (ds.outcomes != cf.outcomes || ds.predictors != cf.predictors)
    throw ValidationError("columns of '" + data_path + "' do not match the fitted chain");
  for (double qq : opt.quantiles)
    if (!(qq >= 0 && qq <= 1)) throw ValidationError("quantiles must lie in [0, 1]");

  const Dataset test = read_dataset(test_path, true);
  if (test.s.dim() != ds.s.dim()) throw ValidationError("test sites have a different dimension than the data");
  if (test.predictors != ds.predictors)
    throw ValidationError("test predictors must match the fitted predictors (" + std::to_string(ds.predictors.size()) +
                          " x_ columns)");
  const std::size_t q = ds.outcomes.size(), N = test.s.size(), d = ds.s.dim();
  PredictionRequest req;
  req.t = test.s;
  req.x = test.data.x;
  if (!test.outcomes.empty()) {
    req.y = Eigen::MatrixXd::Constant(N, q, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t c = 0; c < test.outcomes.size(); ++c) {
      auto it = std::find(ds.outcomes.begin(), ds.outcomes.end(), test.outcomes[c]);
      if (it == ds.outcomes.end()) throw ValidationError("test column '" + test.outcomes[c] + "' is not a fitted outcome");
      req.y.col(it - ds.outcomes.begin()) = test.data.y.col(c);
    }
  }
  set_num_threads(cf.cfg.threads);
  const IoxModel base(ds.s, cf.draws[0].theta, cf.draws[0].Sigma, cf.cfg.iox());
  const auto pred = predict_request(base, ds.data, cf.cfg.model, cf.draws, req, opt.seed, opt.noise);

  Table out;
  for (std::size_t c = 0; c < d; ++c) out.header.push_back("coord_" + std::to_string(c + 1));
  for (const auto& y : ds.outcomes) {
    out.header.push_back("observed_" + y);
    out.header.push_back("mean_" + y);
    out.header.push_back("sd_" + y);
    for (double qq : opt.quantiles) out.header.push_back("q" + fmt("%g", qq) + "_" + y);
  }
  std::vector<double> vals(pred.size());
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<double> r(req.t.point(i).begin(), req.t.point(i).end());
    for (std::size_t j = 0; j < q; ++j) {
      for (std::size_t k = 0; k < pred.size(); ++k) vals[k] = pred[k](i, j);
      const ScalarSummary s = summarize_scalar({vals});
      const bool observed = req.y.size() > 0 && std::isfinite(req.y(i, j));
      r.push_back(observed ? 1.0 : 0.0);
      r.push_back(observed ? req.y(i, j) : s.mean);
      r.push_back(observed ? 0.0 : s.sd);
      for (double qq : opt.quantiles) r.push_back(quantile(vals, qq));
    }
    out.rows.push_back(std::move(r));
  }
  write_table(out_path, out);

  if (!opt.draws_path.empty()) {
    Table t;
    t.header = {"draw", "site"};
    for (const auto& y : ds.outcomes) t.header.push_back(y);
    for (std::size_t k = 0; k < pred.size(); ++k)
      for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> r = {static_cast<double>(k), static_cast<double>(i)};
        for (std::size_t j = 0; j < q; ++j) r.push_back(pred[k](i, j));
        t.rows.push_back(std::move(r));
      }
    write_table(opt.draws_path, t);
  }
}

void cmd_summarize(const std::string& chain_dir, const std::string& out_prefix) {
  const ChainFiles cf = read_chains(chain_dir);
  const std::string prefix = out_prefix.empty() ? join(chain_dir, "summary") : out_prefix;
  write_summary(cf, prefix + ".csv", prefix + ".txt");
}

// -------------------------------------------------------------------- main

int run(int argc, char** argv) {
  CLI::App app{"spiox: multivariate spatial Gaussian processes with inside-out cross-covariances"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool noise_free = false;
  app.add_option("--config", config_path, "flat key = value configuration file");
  app.add_option("--seed", seed, "random seed (overrides the config)");
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--noise-free-prediction", noise_free, "leave measurement noise out of latent-model predictions");

  std::string out, data, chain, test, draws_out;
  std::vector<double> quantiles = {0.025, 0.5, 0.975};
  auto* sim = app.add_subcommand("simulate", "simulate a dataset and a truth sidecar");
  sim->add_option("--out", out, "output dataset CSV")->required();
  auto* fit = app.add_subcommand("fit", "run MCMC on a dataset");
  fit->add_option("--data", data, "dataset CSV")->required();
  fit->add_option("--out", out, "output chain directory")->required();
  auto* pred = app.add_subcommand("predict", "posterior predictive summaries at test sites");
  pred->add_option("--chain", chain, "chain directory")->required();
  pred->add_option("--data", data, "dataset the chain was fitted to")->required();
  pred->add_option("--test", test, "test-site CSV; empty outcome cells are predicted")->required();
  pred->add_option("--out", out, "output CSV")->required();
  pred->add_option("--quantiles", quantiles, "predictive quantiles")->delimiter(',');
  pred->add_option("--draws-out", draws_out, "optional CSV of every predictive draw");
  auto* sum = app.add_subcommand("summarize", "summaries of a chain directory");
  sum->add_option("--chain", chain, "chain directory")->required();
  sum->add_option("--out", out, "output prefix (default <chain>/summary)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    auto load_config = [&] {
      KeyValues kv = config_path.empty() ? KeyValues{} : KeyValues::load(config_path);
      if (seed) kv.set("seed", std::to_string(*seed));
      if (threads) kv.set("threads", std::to_string(*threads));
      return RunConfig::from(kv);
    };
    if (threads) set_num_threads(*threads);
    if (*sim) {
      cmd_simulate(load_config(), out);
    } else if (*fit) {
      cmd_fit(load_config(), data, out);
      std::cout << std::ifstream(join(out, "summary.txt")).rdbuf();
    } else if (*pred) {
      PredictOptions po;
      po.noise = !noise_free;
      po.quantiles = quantiles;
      po.seed = seed.value_or(1);
      po.draws_path = draws_out;
      cmd_predict(chain, data, test, out, po);
    } else if (*sum) {
      cmd_summarize(chain, out);
      std::cout << std::ifstream(out.empty() ? join(chain, "summary.txt") : out + ".txt").rdbuf();
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

}  // namespace spiox::cli
