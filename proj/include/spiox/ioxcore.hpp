#pragma once

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "spiox/geom.hpp"
#include "spiox/kernels.hpp"
#include "spiox/vecchia.hpp"

namespace spiox {

struct IoxOptions {
  // Parent count for every outcome's DAG; 0 selects the exact dense path.
  std::size_t m = 15;
  // Optional per-outcome override of m (length q when present).
  std::vector<std::size_t> outcome_m;
  OrderScheme order = OrderScheme::random(0);
  std::size_t dense_cap = kDefaultDenseCap;
};

// Observations at the reference set: y is n x q, x is n x p (p may be 0).
// Coefficients B (p x q) live with the sampler state.
struct OutcomeMatrix {
  Eigen::MatrixXd y;
  Eigen::MatrixXd x;

  std::size_t n() const { return static_cast<std::size_t>(y.rows()); }
  std::size_t q() const { return static_cast<std::size_t>(y.cols()); }
  std::size_t p() const { return static_cast<std::size_t>(x.cols()); }
  // Checks shapes against n reference sites and that every entry is finite.
  void validate(std::size_t n) const;
};

// Regression weights of an outcome at one location onto the reference set:
// h(l) as a sparse row (indices into S) and the residual variance r(l).
struct Projection {
  std::vector<Index> idx;
  std::vector<double> w;
  double r = 0.0;
};

// Cholesky-based SPD check and inverse. Throws ValidationError when `s` is
// not symmetric positive definite.
Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& s, const char* what = "matrix");

// The IOX model over a reference set: Sigma, per-outcome Matérn parameters and
// the per-outcome sparse inverse Cholesky factors built from them.
class IoxModel {
 public:
  IoxModel(LocationSet s, std::vector<KernelParams> theta, Eigen::MatrixXd sigma,
           const IoxOptions& opt = {});

  std::size_t n() const { return s_.size(); }
  std::size_t q() const { return theta_.size(); }
  const LocationSet& locations() const { return s_; }
  const KdTree& tree() const { return *tree_; }
  const IoxOptions& options() const { return opt_; }

  const KernelParams& theta(std::size_t j) const { return theta_[j]; }
  const std::vector<KernelParams>& theta() const { return theta_; }
  const Eigen::MatrixXd& sigma() const { return sigma_; }
  const Eigen::MatrixXd& Q() const { return q_; }
  double log_det_q() const { return log_det_q_; }

  // m used for outcome j (0 = exact).
  std::size_t outcome_m(std::size_t j) const { return m_[j]; }
  bool exact(std::size_t j) const { return m_[j] == 0; }
  const std::shared_ptr<const NeighborDag>& dag(std::size_t j) const { return dags_[j]; }

  const SparseInvChol& factor(std::size_t j) const { return *factors_[j]; }
  const std::shared_ptr<const SparseInvChol>& factor_ptr(std::size_t j) const { return factors_[j]; }

  void set_sigma(const Eigen::MatrixXd& sigma);
  // Rebuilds factor j.
  void set_theta(std::size_t j, const KernelParams& p);
  // Installs a prebuilt factor (must come from build_factor(j, p) or share
  // outcome j's DAG).
  void set_factor(std::size_t j, const KernelParams& p, std::shared_ptr<const SparseInvChol> g);
  // Builds outcome j's factor for p without installing it.
  std::shared_ptr<const SparseInvChol> build_factor(std::size_t j, const KernelParams& p) const;

  // h_j(l) and r_j(l). Coincident locations project onto their reference
  // site with r = 0. Vecchia outcomes use the m nearest reference sites (all of
  // S once m >= n - 1).
  Projection h_and_r(std::span<const double> l, std::size_t j) const;
  Projection h_and_r(std::span<const double> l, std::size_t j, const KernelParams& p,
                     const SparseInvChol& g) const;

  // L_j^T h_j(l)^T as a dense n-vector.
  Eigen::VectorXd lifted(const Projection& h, std::size_t j) const;

  Eigen::MatrixXd cross_cov_point(std::span<const double> l, std::span<const double> lp) const;
  // Dense (Nq)x(Nq) covariance over T, outcome-major (index j*N + t).
  Eigen::MatrixXd cross_cov_set(const LocationSet& t, std::size_t max_size = 5000) const;

  // Whitened residual matrix V; column j = Gamma_j * ytilde_j.
  Eigen::MatrixXd whiten(const Eigen::MatrixXd& ytilde) const;

  double loglik(const Eigen::MatrixXd& ytilde) const;
  double loglik_whitened(const Eigen::MatrixXd& v) const;
  // Exact log density of y_j given the other outcomes, from V with column j
  // computed under factor g.
  double conditional_loglik(std::size_t j, const Eigen::MatrixXd& v, const SparseInvChol& g) const;
  double conditional_loglik(std::size_t j, const Eigen::MatrixXd& v) const {
    return conditional_loglik(j, v, factor(j));
  }

  // Averaged cross-covariance over probe sites T and n_a displacement angles
  // with horizontal/vertical magnitudes h. Requires d = 2 unless h = 0.
  double avg_cross_cov(std::size_t i, std::size_t j, double hx, double hy, int n_angles,
                       const LocationSet& t) const;
  // q x q matrix of averaged zero-distance covariances over T.
  Eigen::MatrixXd zero_distance_cross_cov(const LocationSet& t) const;
  // The same, normalized to a correlation matrix.
  Eigen::MatrixXd zero_distance_cross_corr(const LocationSet& t) const;

 private:
  LocationSet s_;
  std::vector<KernelParams> theta_;
  Eigen::MatrixXd sigma_, q_;
  double log_det_q_ = 0.0;
  IoxOptions opt_;
  std::vector<std::size_t> m_;
  std::vector<std::shared_ptr<const NeighborDag>> dags_;
  std::vector<std::shared_ptr<const DagGeometry>> geo_;
  std::vector<std::shared_ptr<const SparseInvChol>> factors_;
  std::shared_ptr<const KdTree> tree_;
};

// Zero-distance cross-correlation of a multivariate Matérn with smoothness
// (nu_i, nu_j), average cross-smoothness and cross-scale sigma_ij.
double matern_zero_cross_corr(double nu_i, double nu_j, double sigma_ij);

// Evenly spaced subset of at most k reference sites, for summaries.
LocationSet probe_subset(const LocationSet& s, std::size_t k);

}  // namespace spiox
