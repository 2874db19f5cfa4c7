#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "spiox/ioxcore.hpp"
#include "spiox/samplers.hpp"

namespace spiox {

enum class ModelKind { Response, Latent };
// Full: free parameters per outcome. Grid: each outcome picks from a fixed
// menu of parameter values. Cluster: k1 free parameter sets and a cluster
// label per outcome.
enum class ThetaMode { Full, Grid, Cluster };
enum class ThetaUpdate { Block, Joint };
enum class LatentUpdate { SingleOutcome, SingleSite };

// Prior on one kernel parameter: uniform on [lo, hi], or uniform on the log
// scale, or held fixed at `value`.
struct ParamPrior {
  double lo = 0.0, hi = 1.0;
  bool log_uniform = false;
  bool fixed = false;
  double value = 0.0;

  static ParamPrior uniform(double lo, double hi) { return {lo, hi, false, false, 0.0}; }
  static ParamPrior log_uniform_on(double lo, double hi) { return {lo, hi, true, false, 0.0}; }
  static ParamPrior fixed_at(double v) { return {v, v, false, true, v}; }
  bool contains(double x) const { return fixed ? x == value : (x >= lo && x <= hi); }
};

struct ThetaPrior {
  ParamPrior phi, nu, tau2;

  // Number of free components.
  int free_count() const;
  // Log of the free components, in the order phi, nu, tau2.
  Eigen::VectorXd pack(const KernelParams& p) const;
  KernelParams unpack(const Eigen::VectorXd& u) const;
  // Log density of the free log-components (Jacobian included); -inf
  // outside the support.
  double log_density(const Eigen::VectorXd& u) const;
};

struct Priors {
  Eigen::VectorXd beta_mean;       // length p*q, vec(B) by outcome
  Eigen::MatrixXd beta_precision;  // (p*q) x (p*q)
  double sigma_df = 0.0;
  Eigen::MatrixXd sigma_scale;
  double delta_shape = 2.0, delta_scale = 1.0;
  ThetaPrior theta;
  // Candidate parameter values for the grid mode.
  std::vector<KernelParams> grid;

  // beta ~ N(0, 100 I), Sigma ~ IW(q + 2, I), delta ~ IG(2, 1); phi uniform
  // on [1, 300] / diameter(S), nu uniform on [0.25, 3], tau2 log-uniform on
  // [1e-6, 1].
  static Priors defaults(const LocationSet& s, std::size_t q, std::size_t p);
  void validate(std::size_t q, std::size_t p) const;
};

struct McmcState {
  Eigen::MatrixXd B;      // p x q
  Eigen::MatrixXd Sigma;  // q x q
  std::vector<KernelParams> theta;          // per outcome
  std::vector<KernelParams> cluster_theta;  // grid and cluster modes
  std::vector<int> pi;                      // outcome -> cluster
  Eigen::VectorXd delta;                    // latent model
  Eigen::MatrixXd W;                        // latent model, n x q
};

struct ChainConfig {
  ModelKind model = ModelKind::Response;
  ThetaMode theta_mode = ThetaMode::Full;
  ThetaUpdate theta_update = ThetaUpdate::Block;
  LatentUpdate latent_update = LatentUpdate::SingleOutcome;
  std::size_t k1 = 2;
  IoxOptions iox;
  std::size_t iters = 1000, burn = 500, thin = 1;
  std::uint64_t seed = 1;
  // Switches for holding blocks at their initial values.
  bool sample_theta = true, sample_sigma = true, sample_beta = true, sample_w = true,
       sample_delta = true;
  double target_block = 0.44, target_joint = 0.23;
  double pcg_tol = 1e-8;
  // Reference sites used for the stored zero-distance cross-correlation.
  std::size_t probe_sites = 100;
  bool store_w = true;
  std::optional<McmcState> init;

  void validate() const;
};

struct Draw {
  std::size_t iteration = 0;
  Eigen::MatrixXd B, Sigma;
  std::vector<KernelParams> theta, cluster_theta;
  std::vector<int> pi;
  Eigen::VectorXd delta;
  Eigen::MatrixXd W;
  Eigen::MatrixXd rho;  // zero-distance cross-correlation over the probe sites
  double loglik = 0.0;
};

struct Chain {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  std::vector<Draw> draws;
  std::vector<std::string> block_names;
  std::vector<std::size_t> accepted, proposed;
  std::map<std::string, double> seconds;
  double wall_seconds = 0.0;

  double acceptance_rate(std::size_t k) const {
    return proposed[k] ? static_cast<double>(accepted[k]) / static_cast<double>(proposed[k]) : 0.0;
  }
};

// Random-walk Metropolis proposal with Robbins-Monro scale adaptation toward
// a target acceptance rate and an empirical-covariance shape once enough
// states have been seen.
class AdaptiveRwm {
 public:
  AdaptiveRwm(int dim, double target, double init_sd = 0.1);
  int dim() const { return dim_; }
  Eigen::VectorXd propose(const Eigen::VectorXd& x, Rng& rng) const;
  void adapt(const Eigen::VectorXd& x, double accept_prob);
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  double scale() const { return std::exp(log_scale_); }

 private:
  void refresh();
  int dim_;
  double target_, init_sd_;
  double log_scale_ = 0.0;
  long count_ = 0;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd m2_;
  Eigen::MatrixXd chol_;
  bool frozen_ = false;
};

// Draw from the inverse-Wishart full conditional IW(df + n, scale + V^T V).
Eigen::MatrixXd draw_sigma_conditional(const Eigen::MatrixXd& v, double df, const Eigen::MatrixXd& scale,
                                       Rng& rng);
// Independent inverse-gamma draws IG(a + n/2, b + |r_j|^2 / 2) per column of r.
Eigen::VectorXd draw_delta_conditional(const Eigen::MatrixXd& resid, double a, double b, Rng& rng);

// One MCMC chain's state and all full-conditional updates. The whitened
// matrix V (column j = Gamma_j times the current spatial field of outcome j)
// is kept in step with every update.
class Sampler {
 public:
  Sampler(LocationSet s, OutcomeMatrix data, Priors priors, ChainConfig cfg, std::uint64_t stream = 0);

  const IoxModel& model() const { return *model_; }
  const McmcState& state() const { return state_; }
  const OutcomeMatrix& data() const { return data_; }
  const Priors& priors() const { return priors_; }
  const ChainConfig& config() const { return cfg_; }
  Rng& rng() { return rng_; }

  // The field being whitened: Y - XB (response) or W (latent).
  Eigen::MatrixXd field() const;
  const Eigen::MatrixXd& whitened() const { return v_; }
  Eigen::MatrixXd whitened_from_scratch() const { return model_->whiten(field()); }

  // Replaces the state and rebuilds all factors.
  void set_state(const McmcState& st);

  // Full scan in the order theta/Pi, Sigma, beta, w, Delta. `adapt` lets the
  // Metropolis proposals learn.
  void step(bool adapt = true);

  void update_beta();
  void update_beta_response();
  void update_beta_latent();
  void update_sigma();
  void update_delta();
  void update_theta(bool adapt = true);
  bool update_theta_block(std::size_t j, bool adapt = true);
  bool update_theta_joint(bool adapt = true);
  void update_cluster_assignments();
  void update_w();
  void update_w_single_outcome(std::size_t j);
  void update_w_single_site(std::size_t i);

  void freeze_adaptation();
  // Log target of a block update for outcome j at p: conditional log density
  // of outcome j given the others plus the log prior on log-parameters.
  double log_target_block(std::size_t j, const KernelParams& p) const;
  // Log target of a joint update (full log-likelihood plus log priors).
  double log_target_joint(const std::vector<KernelParams>& theta) const;
  // Log posterior weight of assigning outcome j to cluster c.
  Eigen::VectorXd cluster_log_weights(std::size_t j) const;

  // Linear systems of the Gaussian full conditionals: precision and
  // canonical mean (P, b) with mean P^-1 b.
  std::pair<Eigen::MatrixXd, Eigen::VectorXd> beta_response_system() const;
  std::pair<Eigen::MatrixXd, Eigen::VectorXd> beta_latent_system() const;
  // Single-outcome w system: x -> (Q_jj Gamma^T Gamma + I/delta_j) x and b.
  Eigen::VectorXd w_outcome_apply(std::size_t j, const Eigen::VectorXd& x) const;
  Eigen::VectorXd w_outcome_rhs(std::size_t j) const;
  Eigen::VectorXd w_outcome_mean(std::size_t j) const;
  // Single-site system for site i: (G_i, G_i g_i).
  std::pair<Eigen::MatrixXd, Eigen::VectorXd> w_site_system(std::size_t i) const;

  // Proposal blocks: one per outcome (block mode) or one in joint mode.
  std::size_t proposal_count() const { return rwm_.size(); }
  const AdaptiveRwm& proposal(std::size_t k) const { return rwm_[k]; }
  std::vector<std::string> block_names() const;
  const std::vector<std::size_t>& accepted() const { return accepted_; }
  const std::vector<std::size_t>& proposed() const { return proposed_; }

  Draw snapshot(std::size_t iteration) const;
  const std::map<std::string, double>& seconds() const { return seconds_; }

 private:
  std::vector<double> column_sq_norms(const SparseInvChol& g) const;
  void refresh_whitened();
  void install_cluster_factors();
  void check_state() const;
  bool shared_dag() const;

  LocationSet s_;
  OutcomeMatrix data_;
  Priors priors_;
  ChainConfig cfg_;
  Rng rng_;
  std::unique_ptr<IoxModel> model_;
  McmcState state_;
  Eigen::MatrixXd v_;
  std::vector<std::shared_ptr<const SparseInvChol>> cluster_factors_;
  std::vector<AdaptiveRwm> rwm_;
  std::vector<std::size_t> accepted_, proposed_;
  LocationSet probe_;
  std::map<std::string, double> seconds_;
};

// Runs one chain. The random stream is derived from (cfg.seed, index), so
// chains with different indices are independent and each is reproducible.
Chain run_chain(const LocationSet& s, const OutcomeMatrix& data, const Priors& priors,
                const ChainConfig& cfg, std::size_t index = 0);
// Runs chains 0..count-1 concurrently.
std::vector<Chain> run_chains(const LocationSet& s, const OutcomeMatrix& data, const Priors& priors,
                              const ChainConfig& cfg, std::size_t count);

// Diagonal of the bounding box of S (1 when S is a single point).
double domain_diameter(const LocationSet& s);

}  // namespace spiox
