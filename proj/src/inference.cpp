#include "spiox/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <thread>

#include "spiox/error.hpp"
#include "spiox/parallel.hpp"
#include "spiox/pcg.hpp"

namespace spiox {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Rethrows a library error with `what` prepended, keeping its kind.
template <class F>
void guarded(const std::string& what, F&& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    throw ValidationError(what + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(what + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(what + ": " + e.what());
  }
}

class Stopwatch {
 public:
  explicit Stopwatch(double& acc) : acc_(acc), t0_(std::chrono::steady_clock::now()) {}
  ~Stopwatch() {
    acc_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  double& acc_;
  std::chrono::steady_clock::time_point t0_;
};

const ParamPrior* component(const ThetaPrior& tp, int k) {
  return k == 0 ? &tp.phi : k == 1 ? &tp.nu : &tp.tau2;
}

double& component(KernelParams& p, int k) { return k == 0 ? p.phi : k == 1 ? p.nu : p.tau2; }

double initial_value(const ParamPrior& pp, double preferred) {
  if (pp.fixed) return pp.value;
  if (preferred >= pp.lo && preferred <= pp.hi) return preferred;
  return pp.log_uniform ? std::sqrt(pp.lo * pp.hi) : 0.5 * (pp.lo + pp.hi);
}

KernelParams initial_theta(const ThetaPrior& tp) {
  KernelParams p;
  p.phi = tp.phi.fixed ? tp.phi.value : std::sqrt(tp.phi.lo * tp.phi.hi);
  p.nu = initial_value(tp.nu, 1.0);
  p.tau2 = initial_value(tp.tau2, tp.tau2.log_uniform ? std::sqrt(tp.tau2.lo * tp.tau2.hi) : 0.0);
  return p;
}

// Gaussian log-likelihood of whitened data given per-outcome factors.
double whitened_loglik(const Eigen::MatrixXd& v, const Eigen::MatrixXd& q, double log_det_q,
                       const std::vector<const SparseInvChol*>& g) {
  const double n = static_cast<double>(v.rows());
  double logdiag = 0.0;
  for (const auto* f : g) logdiag += f->log_diag_sum();
  Eigen::MatrixXd vtv = v.transpose() * v;
  return -0.5 * n * v.cols() * std::log(2.0 * std::numbers::pi) + 0.5 * n * log_det_q + logdiag -
         0.5 * (q.array() * vtv.array()).sum();
}

}  // namespace

int ThetaPrior::free_count() const { return !phi.fixed + !nu.fixed + !tau2.fixed; }

Eigen::VectorXd ThetaPrior::pack(const KernelParams& p) const {
  Eigen::VectorXd u(free_count());
  KernelParams c = p;
  int k = 0;
  for (int i = 0; i < 3; ++i)
    if (!component(*this, i)->fixed) u(k++) = std::log(component(c, i));
  return u;
}

KernelParams ThetaPrior::unpack(const Eigen::VectorXd& u) const {
  KernelParams p;
  int k = 0;
  for (int i = 0; i < 3; ++i) {
    const ParamPrior* pp = component(*this, i);
    component(p, i) = pp->fixed ? pp->value : std::exp(u(k++));
  }
  return p;
}

double ThetaPrior::log_density(const Eigen::VectorXd& u) const {
  double lp = 0.0;
  int k = 0;
  for (int i = 0; i < 3; ++i) {
    const ParamPrior* pp = component(*this, i);
    if (pp->fixed) continue;
    const double x = std::exp(u(k));
    if (!(x >= pp->lo && x <= pp->hi)) return kNegInf;
    lp += pp->log_uniform ? -std::log(std::log(pp->hi / pp->lo)) : u(k) - std::log(pp->hi - pp->lo);
    ++k;
  }
  return lp;
}

double domain_diameter(const LocationSet& s) {
  const std::size_t d = s.dim();
  if (s.size() < 2) return 1.0;
  double acc = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < s.size(); ++i) {
      lo = std::min(lo, s.point(i)[a]);
      hi = std::max(hi, s.point(i)[a]);
    }
    acc += (hi - lo) * (hi - lo);
  }
  return acc > 0 ? std::sqrt(acc) : 1.0;
}

Priors Priors::defaults(const LocationSet& s, std::size_t q, std::size_t p) {
  Priors pr;
  const auto k = static_cast<Eigen::Index>(p * q);
  pr.beta_mean = Eigen::VectorXd::Zero(k);
  pr.beta_precision = Eigen::MatrixXd::Identity(k, k) / 100.0;
  pr.sigma_df = static_cast<double>(q) + 2.0;
  pr.sigma_scale = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
  const double diam = domain_diameter(s);
  pr.theta.phi = ParamPrior::uniform(1.0 / diam, 300.0 / diam);
  pr.theta.nu = ParamPrior::uniform(0.25, 3.0);
  pr.theta.tau2 = ParamPrior::log_uniform_on(1e-6, 1.0);
  return pr;
}

void Priors::validate(std::size_t q, std::size_t p) const {
  const auto k = static_cast<Eigen::Index>(p * q);
  if (beta_mean.size() != k) throw ValidationError("priors: beta mean must have length p*q");
  if (beta_precision.rows() != k || beta_precision.cols() != k)
    throw ValidationError("priors: beta precision must be (p*q) x (p*q)");
  if (k > 0) spd_inverse(beta_precision, "priors: beta precision");
  if (!(sigma_df > static_cast<double>(q) - 1.0))
    throw ValidationError("priors: Sigma degrees of freedom must exceed q - 1");
  if (static_cast<std::size_t>(sigma_scale.rows()) != q)
    throw ValidationError("priors: Sigma scale must be q x q");
  spd_inverse(sigma_scale, "priors: Sigma scale");
  if (!(delta_shape > 0) || !(delta_scale > 0))
    throw ValidationError("priors: noise variance shape and scale must be positive");
  const char* names[3] = {"phi", "nu", "tau2"};
  for (int i = 0; i < 3; ++i) {
    const ParamPrior* pp = component(theta, i);
    const std::string nm = std::string("priors: ") + names[i];
    if (pp->fixed) {
      if (!std::isfinite(pp->value) || pp->value < 0 || (i < 2 && pp->value <= 0))
        throw ValidationError(nm + " fixed value out of range");
    } else if (!(std::isfinite(pp->lo) && std::isfinite(pp->hi) && pp->lo > 0 && pp->lo < pp->hi)) {
      throw ValidationError(nm + " bounds must be finite with 0 < lo < hi");
    }
  }
  for (const auto& g : grid) spiox::validate(g);
}

void ChainConfig::validate() const {
  if (burn > iters) throw ValidationError("config: burn must not exceed iters");
  if (thin < 1) throw ValidationError("config: thin must be at least 1");
  if (k1 < 1) throw ValidationError("config: k1 must be at least 1");
  if (!(target_block > 0 && target_block < 1) || !(target_joint > 0 && target_joint < 1))
    throw ValidationError("config: acceptance targets must lie in (0, 1)");
  if (!(pcg_tol > 0)) throw ValidationError("config: pcg tolerance must be positive");
}

AdaptiveRwm::AdaptiveRwm(int dim, double target, double init_sd)
    : dim_(dim), target_(target), init_sd_(init_sd), mean_(Eigen::VectorXd::Zero(dim)),
      m2_(Eigen::MatrixXd::Zero(dim, dim)), chol_(init_sd * Eigen::MatrixXd::Identity(dim, dim)) {}

Eigen::VectorXd AdaptiveRwm::propose(const Eigen::VectorXd& x, Rng& rng) const {
  return x + std::exp(log_scale_) * (chol_ * draw_normal(dim_, rng));
}

void AdaptiveRwm::adapt(const Eigen::VectorXd& x, double accept_prob) {
  if (frozen_) return;
  ++count_;
  Eigen::VectorXd dx = x - mean_;
  mean_ += dx / static_cast<double>(count_);
  m2_ += dx * (x - mean_).transpose();
  log_scale_ += std::pow(static_cast<double>(count_), -0.6) * (accept_prob - target_);
  log_scale_ = std::clamp(log_scale_, -12.0, 6.0);
  refresh();
}

void AdaptiveRwm::refresh() {
  const long warm = std::max<long>(100, 20L * dim_);
  if (count_ < warm) return;
  Eigen::MatrixXd cov = m2_ / static_cast<double>(count_ - 1);
  cov *= 2.38 * 2.38 / dim_;
  cov.diagonal().array() += 1e-10;
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success) return;
  if (count_ == warm) log_scale_ = 0.0;
  chol_ = llt.matrixL();
}

Eigen::MatrixXd draw_sigma_conditional(const Eigen::MatrixXd& v, double df, const Eigen::MatrixXd& scale,
                                       Rng& rng) {
  Eigen::MatrixXd post = scale + v.transpose() * v;
  return draw_inverse_wishart(df + static_cast<double>(v.rows()), 0.5 * (post + post.transpose()), rng);
}

Eigen::VectorXd draw_delta_conditional(const Eigen::MatrixXd& resid, double a, double b, Rng& rng) {
  Eigen::VectorXd d(resid.cols());
  const double shape = a + 0.5 * static_cast<double>(resid.rows());
  for (Eigen::Index j = 0; j < resid.cols(); ++j)
    d(j) = draw_inverse_gamma(shape, b + 0.5 * resid.col(j).squaredNorm(), rng);
  return d;
}

// ---------------------------------------------------------------------------

Sampler::Sampler(LocationSet s, OutcomeMatrix data, Priors priors, ChainConfig cfg, std::uint64_t stream)
    : s_(std::move(s)), data_(std::move(data)), priors_(std::move(priors)), cfg_(std::move(cfg)) {
  const std::size_t n = s_.size(), q = data_.q(), p = data_.p();
  data_.validate(n);
  priors_.validate(q, p);
  cfg_.validate();
  if (cfg_.theta_mode == ThetaMode::Grid && priors_.grid.empty())
    throw ValidationError("config: grid mode needs at least one candidate parameter set");
  std::seed_seq seq{static_cast<std::uint32_t>(cfg_.seed), static_cast<std::uint32_t>(cfg_.seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  rng_.seed(seq);

  McmcState st;
  if (cfg_.init) {
    st = *cfg_.init;
  } else {
    const auto N = static_cast<Eigen::Index>(n);
    st.B = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q));
    if (p > 0) {
      Eigen::MatrixXd xtx = data_.x.transpose() * data_.x;
      xtx.diagonal().array() += 1e-8;
      st.B = xtx.ldlt().solve(data_.x.transpose() * data_.y);
    }
    Eigen::MatrixXd r = data_.y - data_.x * st.B;
    if (p == 0) r = data_.y;
    Eigen::MatrixXd c = r.rowwise() - r.colwise().mean();
    st.Sigma = N > 1 ? Eigen::MatrixXd(c.transpose() * c / static_cast<double>(N - 1))
                     : Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
    st.Sigma.diagonal().array() += 1e-6;
    if (cfg_.model == ModelKind::Latent) {
      st.Sigma *= 0.5;
      st.delta = st.Sigma.diagonal().cwiseMax(1e-6);
      st.W = Eigen::MatrixXd::Zero(N, static_cast<Eigen::Index>(q));
    }
    const KernelParams base = initial_theta(priors_.theta);
    st.theta.assign(q, base);
    if (cfg_.theta_mode == ThetaMode::Grid) {
      st.cluster_theta = priors_.grid;
    } else if (cfg_.theta_mode == ThetaMode::Cluster) {
      st.cluster_theta.assign(cfg_.k1, base);
      if (!priors_.theta.nu.fixed)
        for (std::size_t c = 0; c < cfg_.k1; ++c)
          st.cluster_theta[c].nu = priors_.theta.nu.lo + (c + 0.5) / static_cast<double>(cfg_.k1) *
                                                             (priors_.theta.nu.hi - priors_.theta.nu.lo);
    }
    if (!st.cluster_theta.empty()) {
      st.pi.resize(q);
      for (std::size_t j = 0; j < q; ++j) {
        st.pi[j] = static_cast<int>(j % st.cluster_theta.size());
        st.theta[j] = st.cluster_theta[st.pi[j]];
      }
    }
  }
  probe_ = probe_subset(s_, cfg_.probe_sites);

  switch (cfg_.theta_mode) {
    case ThetaMode::Full:
      if (cfg_.theta_update == ThetaUpdate::Block)
        for (std::size_t j = 0; j < q; ++j) rwm_.emplace_back(priors_.theta.free_count(), cfg_.target_block);
      else
        rwm_.emplace_back(static_cast<int>(q) * priors_.theta.free_count(), cfg_.target_joint);
      break;
    case ThetaMode::Cluster:
      rwm_.emplace_back(static_cast<int>(cfg_.k1) * priors_.theta.free_count(), cfg_.target_joint);
      break;
    case ThetaMode::Grid:
      break;
  }
  if (priors_.theta.free_count() == 0) rwm_.clear();
  accepted_.assign(rwm_.size(), 0);
  proposed_.assign(rwm_.size(), 0);
  set_state(st);
}

std::vector<std::string> Sampler::block_names() const {
  std::vector<std::string> names;
  if (cfg_.theta_mode == ThetaMode::Full && cfg_.theta_update == ThetaUpdate::Block) {
    for (std::size_t k = 0; k < rwm_.size(); ++k) names.push_back("theta_" + std::to_string(k + 1));
  } else if (!rwm_.empty()) {
    names.push_back(cfg_.theta_mode == ThetaMode::Cluster ? "cluster_theta" : "theta");
  }
  return names;
}

bool Sampler::shared_dag() const {
  for (std::size_t j = 1; j < model_->q(); ++j)
    if (model_->dag(j) != model_->dag(0)) return false;
  return true;
}

void Sampler::set_state(const McmcState& st) {
  const std::size_t n = s_.size(), q = data_.q(), p = data_.p();
  if (static_cast<std::size_t>(st.B.rows()) != p || static_cast<std::size_t>(st.B.cols()) != q)
    throw ValidationError("state: B must be p x q");
  if (st.theta.size() != q) throw ValidationError("state: one kernel parameter set per outcome required");
  const bool clustered = cfg_.theta_mode != ThetaMode::Full;
  if (clustered) {
    if (st.cluster_theta.empty() || st.pi.size() != q)
      throw ValidationError("state: cluster parameters and assignments required");
    for (int c : st.pi)
      if (c < 0 || static_cast<std::size_t>(c) >= st.cluster_theta.size())
        throw ValidationError("state: cluster assignment out of range");
  }
  if (cfg_.model == ModelKind::Latent) {
    if (static_cast<std::size_t>(st.delta.size()) != q || (st.delta.array() <= 0).any() || !st.delta.allFinite())
      throw ValidationError("state: noise variances must be positive");
    if (static_cast<std::size_t>(st.W.rows()) != n || static_cast<std::size_t>(st.W.cols()) != q)
      throw ValidationError("state: latent field must be n x q");
  }
  state_ = st;
  if (clustered)
    for (std::size_t j = 0; j < q; ++j) state_.theta[j] = state_.cluster_theta[state_.pi[j]];
  model_ = std::make_unique<IoxModel>(s_, state_.theta, state_.Sigma, cfg_.iox);
  if (clustered) {
    if (!shared_dag()) throw ValidationError("config: grid and cluster modes need one DAG shared by all outcomes");
    cluster_factors_.clear();
    for (const auto& th : state_.cluster_theta) cluster_factors_.push_back(model_->build_factor(0, th));
    install_cluster_factors();
  }
  refresh_whitened();
}

void Sampler::install_cluster_factors() {
  for (std::size_t j = 0; j < data_.q(); ++j) {
    const int c = state_.pi[j];
    state_.theta[j] = state_.cluster_theta[c];
    model_->set_factor(j, state_.theta[j], cluster_factors_[c]);
  }
}

Eigen::MatrixXd Sampler::field() const {
  if (cfg_.model == ModelKind::Latent) return state_.W;
  if (data_.p() == 0) return data_.y;
  return data_.y - data_.x * state_.B;
}

void Sampler::refresh_whitened() { v_ = model_->whiten(field()); }

void Sampler::check_state() const {
  Eigen::LLT<Eigen::MatrixXd> llt(state_.Sigma);
  if (llt.info() != Eigen::Success) throw NumericalError("Sigma is not positive definite");
  if (cfg_.model == ModelKind::Latent && (!(state_.delta.array() > 0).all() || !state_.delta.allFinite()))
    throw NumericalError("noise variance is not positive");
}

void Sampler::freeze_adaptation() {
  for (auto& r : rwm_) r.freeze();
}

// --- theta -------------------------------------------------------------------

double Sampler::log_target_block(std::size_t j, const KernelParams& p) const {
  const double lp = priors_.theta.log_density(priors_.theta.pack(p));
  if (!std::isfinite(lp)) return kNegInf;
  auto g = model_->build_factor(j, p);
  Eigen::MatrixXd v = v_;
  Eigen::MatrixXd f = field();
  v.col(j) = g->whiten(Eigen::VectorXd(f.col(j)));
  return model_->conditional_loglik(j, v, *g) + lp;
}

double Sampler::log_target_joint(const std::vector<KernelParams>& theta) const {
  double lp = 0.0;
  for (const auto& p : theta) lp += priors_.theta.log_density(priors_.theta.pack(p));
  if (!std::isfinite(lp)) return kNegInf;
  const std::size_t q = data_.q();
  std::vector<std::shared_ptr<const SparseInvChol>> g(q);
  parallel_for(0, q, [&](std::size_t j) { g[j] = model_->build_factor(j, theta[j]); }, 1);
  Eigen::MatrixXd f = field();
  Eigen::MatrixXd v(f.rows(), f.cols());
  std::vector<const SparseInvChol*> gp(q);
  for (std::size_t j = 0; j < q; ++j) {
    v.col(j) = g[j]->whiten(Eigen::VectorXd(f.col(j)));
    gp[j] = g[j].get();
  }
  return whitened_loglik(v, model_->Q(), model_->log_det_q(), gp) + lp;
}

bool Sampler::update_theta_block(std::size_t j, bool adapt) {
  if (rwm_.empty()) return false;
  if (cfg_.theta_mode != ThetaMode::Full || cfg_.theta_update != ThetaUpdate::Block)
    throw ValidationError("theta block update requires the full mode with block updates");
  AdaptiveRwm& prop = rwm_[j];
  const ThetaPrior& tp = priors_.theta;
  const Eigen::VectorXd u = tp.pack(state_.theta[j]);
  const double cur = model_->conditional_loglik(j, v_) + tp.log_density(u);
  const Eigen::VectorXd u_new = prop.propose(u, rng_);
  const double lp_new = tp.log_density(u_new);
  ++proposed_[j];

  double alpha = 0.0;
  std::shared_ptr<const SparseInvChol> g;
  Eigen::VectorXd vj;
  const KernelParams p_new = tp.unpack(u_new);
  if (std::isfinite(lp_new)) {
    try {
      g = model_->build_factor(j, p_new);
    } catch (const NumericalError&) {
      g.reset();
    }
    if (g) {
      Eigen::VectorXd fj;
      if (cfg_.model == ModelKind::Latent)
        fj = state_.W.col(j);
      else if (data_.p() > 0)
        fj = data_.y.col(j) - data_.x * state_.B.col(j);
      else
        fj = data_.y.col(j);
      vj = g->whiten(fj);
      Eigen::VectorXd old = v_.col(j);
      v_.col(j) = vj;
      const double prop_ll = model_->conditional_loglik(j, v_, *g) + lp_new;
      v_.col(j) = old;
      const double lr = prop_ll - cur;
      alpha = std::isfinite(lr) ? std::min(1.0, std::exp(lr)) : 0.0;
    }
  }
  std::uniform_real_distribution<double> unif;
  const bool accept = alpha > 0 && unif(rng_) < alpha;
  if (accept) {
    model_->set_factor(j, p_new, g);
    state_.theta[j] = p_new;
    v_.col(j) = vj;
    ++accepted_[j];
  }
  if (adapt) prop.adapt(accept ? u_new : u, alpha);
  return accept;
}

bool Sampler::update_theta_joint(bool adapt) {
  if (rwm_.empty()) return false;
  const ThetaPrior& tp = priors_.theta;
  const int fc = tp.free_count();
  const bool clustered = cfg_.theta_mode == ThetaMode::Cluster;
  if (cfg_.theta_mode == ThetaMode::Grid) throw ValidationError("grid mode has no free kernel parameters");
  const std::size_t q = data_.q();
  const std::vector<KernelParams>& cur_theta = clustered ? state_.cluster_theta : state_.theta;
  const std::size_t k = cur_theta.size();

  Eigen::VectorXd u(static_cast<Eigen::Index>(k) * fc);
  for (std::size_t c = 0; c < k; ++c) u.segment(c * fc, fc) = tp.pack(cur_theta[c]);
  double cur = model_->loglik_whitened(v_);
  for (std::size_t c = 0; c < k; ++c) cur += tp.log_density(u.segment(c * fc, fc));

  AdaptiveRwm& prop = rwm_[0];
  const Eigen::VectorXd u_new = prop.propose(u, rng_);
  ++proposed_[0];
  std::vector<KernelParams> th_new(k);
  double lp_new = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    lp_new += tp.log_density(u_new.segment(c * fc, fc));
    th_new[c] = tp.unpack(u_new.segment(c * fc, fc));
  }

  double alpha = 0.0;
  std::vector<std::shared_ptr<const SparseInvChol>> g(k);
  Eigen::MatrixXd v_new;
  if (std::isfinite(lp_new)) {
    bool ok = true;
    parallel_for(0, k, [&](std::size_t c) {
      try {
        g[c] = model_->build_factor(clustered ? 0 : c, th_new[c]);
      } catch (const NumericalError&) {
        g[c].reset();
      }
    }, 1);
    for (const auto& gc : g) ok = ok && gc;
    if (ok) {
      Eigen::MatrixXd f = field();
      v_new.resize(f.rows(), f.cols());
      std::vector<const SparseInvChol*> gp(q);
      for (std::size_t j = 0; j < q; ++j) {
        gp[j] = g[clustered ? state_.pi[j] : j].get();
        v_new.col(j) = gp[j]->whiten(Eigen::VectorXd(f.col(j)));
      }
      const double lr = whitened_loglik(v_new, model_->Q(), model_->log_det_q(), gp) + lp_new - cur;
      alpha = std::isfinite(lr) ? std::min(1.0, std::exp(lr)) : 0.0;
    }
  }
  std::uniform_real_distribution<double> unif;
  const bool accept = alpha > 0 && unif(rng_) < alpha;
  if (accept) {
    if (clustered) {
      state_.cluster_theta = th_new;
      cluster_factors_ = g;
      install_cluster_factors();
    } else {
      for (std::size_t j = 0; j < q; ++j) {
        model_->set_factor(j, th_new[j], g[j]);
        state_.theta[j] = th_new[j];
      }
    }
    v_ = v_new;
    ++accepted_[0];
  }
  if (adapt) prop.adapt(accept ? u_new : u, alpha);
  return accept;
}

Eigen::VectorXd Sampler::cluster_log_weights(std::size_t j) const {
  const std::size_t k = cluster_factors_.size();
  Eigen::VectorXd lw(static_cast<Eigen::Index>(k));
  Eigen::MatrixXd v = v_;
  Eigen::MatrixXd f = field();
  Eigen::VectorXd fj = f.col(j);
  for (std::size_t c = 0; c < k; ++c) {
    v.col(j) = cluster_factors_[c]->whiten(fj);
    const double ll = model_->conditional_loglik(j, v, *cluster_factors_[c]);
    lw(c) = std::isfinite(ll) ? ll : kNegInf;
  }
  return lw;
}

void Sampler::update_cluster_assignments() {
  if (cfg_.theta_mode == ThetaMode::Full) throw ValidationError("cluster assignments need grid or cluster mode");
  Eigen::MatrixXd f = field();
  for (std::size_t j = 0; j < data_.q(); ++j) {
    const Eigen::VectorXd lw = cluster_log_weights(j);
    const auto c = static_cast<int>(draw_categorical_log(lw, rng_));
    state_.pi[j] = c;
    state_.theta[j] = state_.cluster_theta[c];
    model_->set_factor(j, state_.theta[j], cluster_factors_[c]);
    v_.col(j) = cluster_factors_[c]->whiten(Eigen::VectorXd(f.col(j)));
  }
}

void Sampler::update_theta(bool adapt) {
  switch (cfg_.theta_mode) {
    case ThetaMode::Full:
      if (cfg_.theta_update == ThetaUpdate::Block)
        for (std::size_t j = 0; j < data_.q(); ++j) update_theta_block(j, adapt);
      else
        update_theta_joint(adapt);
      break;
    case ThetaMode::Cluster:
      update_theta_joint(adapt);
      update_cluster_assignments();
      break;
    case ThetaMode::Grid:
      update_cluster_assignments();
      break;
  }
}

// --- Sigma, beta, Delta ------------------------------------------------------

void Sampler::update_sigma() {
  Eigen::MatrixXd s = draw_sigma_conditional(v_, priors_.sigma_df, priors_.sigma_scale, rng_);
  model_->set_sigma(s);
  state_.Sigma = model_->sigma();
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> Sampler::beta_response_system() const {
  const std::size_t q = data_.q();
  const auto p = static_cast<Eigen::Index>(data_.p());
  const auto n = static_cast<Eigen::Index>(s_.size());
  std::vector<Eigen::MatrixXd> z(q, Eigen::MatrixXd(n, p));
  Eigen::MatrixXd yw(n, static_cast<Eigen::Index>(q));
  parallel_for(0, q, [&](std::size_t j) {
    const SparseInvChol& g = model_->factor(j);
    for (Eigen::Index a = 0; a < p; ++a)
      g.whiten({data_.x.col(a).data(), static_cast<std::size_t>(n)}, {z[j].col(a).data(), static_cast<std::size_t>(n)});
    g.whiten({data_.y.col(j).data(), static_cast<std::size_t>(n)}, {yw.col(j).data(), static_cast<std::size_t>(n)});
  }, 1);
  const Eigen::MatrixXd& Q = model_->Q();
  Eigen::MatrixXd prec = priors_.beta_precision;
  Eigen::VectorXd rhs = priors_.beta_precision * priors_.beta_mean;
  for (std::size_t j = 0; j < q; ++j) {
    for (std::size_t k = 0; k < q; ++k) {
      prec.block(j * p, k * p, p, p) += Q(j, k) * (z[j].transpose() * z[k]);
      rhs.segment(j * p, p) += Q(j, k) * (z[j].transpose() * yw.col(k));
    }
  }
  return {0.5 * (prec + prec.transpose()), rhs};
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> Sampler::beta_latent_system() const {
  const std::size_t q = data_.q();
  const auto p = static_cast<Eigen::Index>(data_.p());
  Eigen::MatrixXd xtx = data_.x.transpose() * data_.x;
  Eigen::MatrixXd prec = priors_.beta_precision;
  Eigen::VectorXd rhs = priors_.beta_precision * priors_.beta_mean;
  for (std::size_t j = 0; j < q; ++j) {
    prec.block(j * p, j * p, p, p) += xtx / state_.delta(j);
    rhs.segment(j * p, p) += data_.x.transpose() * (data_.y.col(j) - state_.W.col(j)) / state_.delta(j);
  }
  return {prec, rhs};
}

void Sampler::update_beta() {
  if (data_.p() == 0) return;
  if (cfg_.model == ModelKind::Response)
    update_beta_response();
  else
    update_beta_latent();
}

void Sampler::update_beta_response() {
  if (data_.p() == 0) return;
  auto [prec, rhs] = beta_response_system();
  Eigen::VectorXd b = draw_mvn_precision(prec, rhs, rng_);
  state_.B = Eigen::Map<Eigen::MatrixXd>(b.data(), static_cast<Eigen::Index>(data_.p()),
                                         static_cast<Eigen::Index>(data_.q()));
  refresh_whitened();
}

void Sampler::update_beta_latent() {
  if (data_.p() == 0) return;
  auto [prec, rhs] = beta_latent_system();
  Eigen::VectorXd b = draw_mvn_precision(prec, rhs, rng_);
  state_.B = Eigen::Map<Eigen::MatrixXd>(b.data(), static_cast<Eigen::Index>(data_.p()),
                                         static_cast<Eigen::Index>(data_.q()));
}

void Sampler::update_delta() {
  if (cfg_.model != ModelKind::Latent) throw ValidationError("noise variances exist only in the latent model");
  Eigen::MatrixXd r = data_.y - state_.W;
  if (data_.p() > 0) r -= data_.x * state_.B;
  state_.delta = draw_delta_conditional(r, priors_.delta_shape, priors_.delta_scale, rng_);
}

// --- latent field ------------------------------------------------------------

std::vector<double> Sampler::column_sq_norms(const SparseInvChol& g) const {
  const std::size_t n = g.size();
  std::vector<double> cs(n);
  const NeighborDag& dag = g.dag();
  for (std::size_t i = 0; i < n; ++i) {
    double acc = g.diag(static_cast<Index>(i)) * g.diag(static_cast<Index>(i));
    for (std::size_t slot : dag.child_slots(static_cast<Index>(i))) acc += g.slot_value(slot) * g.slot_value(slot);
    cs[i] = acc;
  }
  return cs;
}

Eigen::VectorXd Sampler::w_outcome_apply(std::size_t j, const Eigen::VectorXd& x) const {
  const SparseInvChol& g = model_->factor(j);
  return model_->Q()(j, j) * g.apply_transpose(g.whiten(x)) + x / state_.delta(j);
}

Eigen::VectorXd Sampler::w_outcome_rhs(std::size_t j) const {
  const Eigen::MatrixXd& Q = model_->Q();
  const auto n = static_cast<Eigen::Index>(s_.size());
  Eigen::VectorXd s = Eigen::VectorXd::Zero(n);
  for (std::size_t r = 0; r < data_.q(); ++r)
    if (r != j) s += Q(j, r) * v_.col(r);
  Eigen::VectorXd resid = data_.y.col(j);
  if (data_.p() > 0) resid -= data_.x * state_.B.col(j);
  return -model_->factor(j).apply_transpose(s) + resid / state_.delta(j);
}

Eigen::VectorXd Sampler::w_outcome_mean(std::size_t j) const {
  const auto cs = column_sq_norms(model_->factor(j));
  const double qjj = model_->Q()(j, j);
  Eigen::VectorXd d(static_cast<Eigen::Index>(cs.size()));
  for (std::size_t i = 0; i < cs.size(); ++i) d(i) = qjj * cs[i] + 1.0 / state_.delta(j);
  Eigen::VectorXd x = state_.W.col(j);
  pcg_solve([&](const Eigen::VectorXd& a, Eigen::VectorXd& out) { out = w_outcome_apply(j, a); }, d,
            w_outcome_rhs(j), x, 1e-12, static_cast<int>(20 * cs.size()));
  return x;
}

void Sampler::update_w_single_outcome(std::size_t j) {
  if (cfg_.model != ModelKind::Latent) throw ValidationError("latent field updates need the latent model");
  const SparseInvChol& g = model_->factor(j);
  const auto n = static_cast<Eigen::Index>(s_.size());
  const double qjj = model_->Q()(j, j), dj = state_.delta(j);
  const auto cs = column_sq_norms(g);
  Eigen::VectorXd d(n);
  for (Eigen::Index i = 0; i < n; ++i) d(i) = qjj * cs[i] + 1.0 / dj;
  // b + z with z ~ N(0, A): the solution is then a draw from N(A^-1 b, A^-1).
  Eigen::VectorXd e1 = draw_normal(n, rng_);
  Eigen::VectorXd e2 = draw_normal(n, rng_);
  Eigen::VectorXd b = w_outcome_rhs(j) + std::sqrt(qjj) * g.apply_transpose(e1) + e2 / std::sqrt(dj);
  Eigen::VectorXd x = state_.W.col(j);
  pcg_solve([&](const Eigen::VectorXd& a, Eigen::VectorXd& out) { out = w_outcome_apply(j, a); }, d, b, x,
            cfg_.pcg_tol, static_cast<int>(5 * n));
  state_.W.col(j) = x;
  v_.col(j) = g.whiten(x);
}

std::pair<Eigen::MatrixXd, Eigen::VectorXd> Sampler::w_site_system(std::size_t i) const {
  if (!shared_dag()) throw ValidationError("single-site updates need one DAG shared by all outcomes");
  const std::size_t q = data_.q();
  const auto node = static_cast<Index>(i);
  const NeighborDag& dag = *model_->dag(0);
  auto children = dag.children(node);
  auto slots = dag.child_slots(node);
  const std::size_t nc = children.size() + 1;
  // gam(k, r) = Gamma_r[c_k, i] over c = {i} + children(i).
  Eigen::MatrixXd gam(static_cast<Eigen::Index>(nc), static_cast<Eigen::Index>(q));
  Eigen::MatrixXd u(static_cast<Eigen::Index>(nc), static_cast<Eigen::Index>(q));
  for (std::size_t r = 0; r < q; ++r) {
    const SparseInvChol& g = model_->factor(r);
    gam(0, r) = g.diag(node);
    u(0, r) = v_(node, r);
    for (std::size_t k = 0; k < children.size(); ++k) {
      gam(k + 1, r) = g.slot_value(slots[k]);
      u(k + 1, r) = v_(children[k], r);
    }
  }
  const Eigen::MatrixXd& Q = model_->Q();
  Eigen::MatrixXd pii = Q.cwiseProduct(gam.transpose() * gam);
  // (P w)_i = (Q o [gam_r^T u_s]) 1, which includes the P(i,i) w_i term.
  Eigen::VectorXd pw = Q.cwiseProduct(gam.transpose() * u).rowwise().sum();
  Eigen::VectorXd wi = state_.W.row(i).transpose();
  Eigen::VectorXd yi = data_.y.row(i).transpose();
  if (data_.p() > 0) yi -= state_.B.transpose() * data_.x.row(i).transpose();
  Eigen::VectorXd dinv = state_.delta.cwiseInverse();
  Eigen::MatrixXd G = pii;
  G.diagonal() += dinv;
  Eigen::VectorXd rhs = -pw + pii * wi + dinv.cwiseProduct(yi);
  return {G, rhs};
}

void Sampler::update_w_single_site(std::size_t i) {
  if (cfg_.model != ModelKind::Latent) throw ValidationError("latent field updates need the latent model");
  auto [G, rhs] = w_site_system(i);
  Eigen::VectorXd w_new = draw_mvn_precision(G, rhs, rng_);
  Eigen::VectorXd dw = w_new - state_.W.row(i).transpose();
  const auto node = static_cast<Index>(i);
  const NeighborDag& dag = *model_->dag(0);
  auto children = dag.children(node);
  auto slots = dag.child_slots(node);
  for (std::size_t r = 0; r < data_.q(); ++r) {
    const SparseInvChol& g = model_->factor(r);
    v_(node, r) += g.diag(node) * dw(r);
    for (std::size_t k = 0; k < children.size(); ++k) v_(children[k], r) += g.slot_value(slots[k]) * dw(r);
  }
  state_.W.row(i) = w_new.transpose();
}

void Sampler::update_w() {
  if (cfg_.latent_update == LatentUpdate::SingleOutcome) {
    for (std::size_t j = 0; j < data_.q(); ++j) update_w_single_outcome(j);
  } else {
    if (!shared_dag()) throw ValidationError("single-site updates need one DAG shared by all outcomes");
    for (std::size_t i = 0; i < s_.size(); ++i) update_w_single_site(i);
  }
}

// --- driver ------------------------------------------------------------------

void Sampler::step(bool adapt) {
  const bool latent = cfg_.model == ModelKind::Latent;
  if (cfg_.sample_theta) {
    Stopwatch sw(seconds_["theta"]);
    guarded("theta", [&] { update_theta(adapt); });
  }
  if (cfg_.sample_sigma) {
    Stopwatch sw(seconds_["sigma"]);
    guarded("Sigma", [&] { update_sigma(); });
  }
  if (cfg_.sample_beta && data_.p() > 0) {
    Stopwatch sw(seconds_["beta"]);
    guarded("beta", [&] { update_beta(); });
  }
  if (latent && cfg_.sample_w) {
    Stopwatch sw(seconds_["w"]);
    guarded("w", [&] { update_w(); });
  }
  if (latent && cfg_.sample_delta) {
    Stopwatch sw(seconds_["delta"]);
    guarded("Delta", [&] { update_delta(); });
  }
  guarded("state check", [&] { check_state(); });
}

Draw Sampler::snapshot(std::size_t iteration) const {
  Draw d;
  d.iteration = iteration;
  d.B = state_.B;
  d.Sigma = state_.Sigma;
  d.theta = state_.theta;
  d.cluster_theta = state_.cluster_theta;
  d.pi = state_.pi;
  if (cfg_.model == ModelKind::Latent) {
    d.delta = state_.delta;
    if (cfg_.store_w) d.W = state_.W;
  }
  d.rho = model_->zero_distance_cross_corr(probe_);
  d.loglik = model_->loglik_whitened(v_);
  return d;
}

Chain run_chain(const LocationSet& s, const OutcomeMatrix& data, const Priors& priors, const ChainConfig& cfg,
                std::size_t index) {
  const auto t0 = std::chrono::steady_clock::now();
  Sampler sampler(s, data, priors, cfg, index);
  Chain chain;
  chain.index = index;
  chain.seed = cfg.seed;
  chain.block_names = sampler.block_names();
  if (cfg.burn == 0) sampler.freeze_adaptation();
  for (std::size_t t = 0; t < cfg.iters; ++t) {
    if (t == cfg.burn) sampler.freeze_adaptation();
    guarded("iteration " + std::to_string(t), [&] { sampler.step(t < cfg.burn); });
    if (t >= cfg.burn && (t - cfg.burn + 1) % cfg.thin == 0) chain.draws.push_back(sampler.snapshot(t));
  }
  chain.accepted = sampler.accepted();
  chain.proposed = sampler.proposed();
  chain.seconds = sampler.seconds();
  chain.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return chain;
}

std::vector<Chain> run_chains(const LocationSet& s, const OutcomeMatrix& data, const Priors& priors,
                              const ChainConfig& cfg, std::size_t count) {
  std::vector<Chain> out(count);
  std::vector<std::exception_ptr> err(count);
  std::vector<std::thread> threads;
  for (std::size_t c = 0; c < count; ++c)
    threads.emplace_back([&, c] {
      try {
        out[c] = run_chain(s, data, priors, cfg, c);
      } catch (...) {
        err[c] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : err)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace spiox
