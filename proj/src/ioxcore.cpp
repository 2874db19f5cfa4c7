#include "spiox/ioxcore.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "spiox/error.hpp"
#include "spiox/parallel.hpp"

namespace spiox {

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& s, const char* what) {
  if (s.rows() != s.cols() || s.rows() == 0)
    throw ValidationError(std::string(what) + ": must be a non-empty square matrix");
  if (!s.allFinite()) throw ValidationError(std::string(what) + ": non-finite entries");
  const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
    throw ValidationError(std::string(what) + ": not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(s);
  if (llt.info() != Eigen::Success || !(Eigen::MatrixXd(llt.matrixL()).diagonal().array() > 0).all())
    throw ValidationError(std::string(what) + ": not positive definite");
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(s.rows(), s.cols()));
  return 0.5 * (inv + inv.transpose());
}

void OutcomeMatrix::validate(std::size_t n_sites) const {
  if (n() != n_sites)
    throw ValidationError("data: " + std::to_string(n()) + " outcome rows for " + std::to_string(n_sites) +
                          " reference sites");
  if (q() == 0) throw ValidationError("data: no outcome columns");
  if (p() > 0 && static_cast<std::size_t>(x.rows()) != n_sites)
    throw ValidationError("data: predictor rows do not match outcome rows");
  for (Eigen::Index j = 0; j < y.cols(); ++j)
    for (Eigen::Index i = 0; i < y.rows(); ++i)
      if (!std::isfinite(y(i, j)))
        throw ValidationError("data: non-finite outcome at row " + std::to_string(i) + ", column " +
                              std::to_string(j));
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      if (!std::isfinite(x(i, j)))
        throw ValidationError("data: non-finite predictor at row " + std::to_string(i) + ", column " +
                              std::to_string(j));
}

IoxModel::IoxModel(LocationSet s, std::vector<KernelParams> theta, Eigen::MatrixXd sigma,
                   const IoxOptions& opt)
    : s_(std::move(s)), theta_(std::move(theta)), opt_(opt) {
  const std::size_t q = theta_.size();
  if (q == 0) throw ValidationError("model: at least one outcome required");
  if (!opt_.outcome_m.empty() && opt_.outcome_m.size() != q)
    throw ValidationError("model: per-outcome m list must have one entry per outcome");
  for (const auto& p : theta_) validate(p);
  set_sigma(sigma);

  const std::size_t n = s_.size();
  m_.resize(q);
  for (std::size_t j = 0; j < q; ++j) m_[j] = opt_.outcome_m.empty() ? opt_.m : opt_.outcome_m[j];

  auto order = order_locations(s_, opt_.order);
  tree_ = std::make_shared<const KdTree>(s_);
  dags_.resize(q);
  geo_.resize(q);
  factors_.resize(q);
  // Outcomes with equal m share one DAG and its distance cache.
  for (std::size_t j = 0; j < q; ++j) {
    std::size_t eff = m_[j] == 0 ? (n > 0 ? n - 1 : 0) : std::min(m_[j], n > 0 ? n - 1 : 0);
    for (std::size_t k = 0; k < j; ++k) {
      std::size_t effk = m_[k] == 0 ? n - 1 : std::min(m_[k], n - 1);
      if (effk == eff && (m_[k] == 0) == (m_[j] == 0)) {
        dags_[j] = dags_[k];
        geo_[j] = geo_[k];
        break;
      }
    }
    if (!dags_[j]) {
      if (m_[j] == 0 && n > opt_.dense_cap)
        throw ValidationError("model: exact path requested with n=" + std::to_string(n) +
                              " above the dense cap " + std::to_string(opt_.dense_cap));
      dags_[j] = std::make_shared<const NeighborDag>(build_nn_dag(s_, eff, order));
      if (m_[j] != 0) geo_[j] = std::make_shared<const DagGeometry>(s_, dags_[j]);
    }
  }
  parallel_for(0, q, [&](std::size_t j) { factors_[j] = build_factor(j, theta_[j]); }, 1);
}

void IoxModel::set_sigma(const Eigen::MatrixXd& sigma) {
  if (!theta_.empty() && static_cast<std::size_t>(sigma.rows()) != theta_.size())
    throw ValidationError("model: Sigma dimension does not match outcome count");
  Eigen::MatrixXd qm = spd_inverse(sigma, "Sigma");
  sigma_ = 0.5 * (sigma + sigma.transpose());
  q_ = qm;
  Eigen::LLT<Eigen::MatrixXd> llt(q_);
  log_det_q_ = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
}

std::shared_ptr<const SparseInvChol> IoxModel::build_factor(std::size_t j, const KernelParams& p) const {
  validate(p);
  if (m_[j] == 0)
    return std::make_shared<const SparseInvChol>(exact_sparse_inv_chol(s_, dags_[j], p, opt_.dense_cap));
  return std::make_shared<const SparseInvChol>(build_sparse_inv_chol(*geo_[j], p));
}

void IoxModel::set_theta(std::size_t j, const KernelParams& p) {
  auto g = build_factor(j, p);
  theta_[j] = p;
  factors_[j] = std::move(g);
}

void IoxModel::set_factor(std::size_t j, const KernelParams& p, std::shared_ptr<const SparseInvChol> g) {
  if (g->dag_ptr() != dags_[j]) throw ValidationError("model: factor was built on a different DAG");
  theta_[j] = p;
  factors_[j] = std::move(g);
}

Projection IoxModel::h_and_r(std::span<const double> l, std::size_t j) const {
  return h_and_r(l, j, theta_[j], *factors_[j]);
}

Projection IoxModel::h_and_r(std::span<const double> l, std::size_t j, const KernelParams& p,
                             const SparseInvChol& g) const {
  if (l.size() != s_.dim()) throw ValidationError("h_and_r: coordinate dimension mismatch");
  Projection out;
  const Index k = tree_->find_coincident(l, kZeroDistance);
  if (k >= 0) {
    out.idx = {k};
    out.w = {1.0};
    out.r = 0.0;
    return out;
  }
  const Matern kern(p, false);
  const double c0 = 1.0 + p.tau2;
  const std::size_t n = s_.size();
  if (m_[j] == 0) {
    // h = rho(l,S) Gamma^T Gamma, r = rho(l,l) - |Gamma rho(S,l)|^2.
    Eigen::VectorXd c(n);
    for (std::size_t i = 0; i < n; ++i) c(i) = kern(distance(l, s_.point(i)));
    Eigen::VectorXd u = g.whiten(c);
    Eigen::VectorXd h = g.apply_transpose(u);
    out.idx.resize(n);
    out.w.assign(h.data(), h.data() + n);
    for (std::size_t i = 0; i < n; ++i) out.idx[i] = static_cast<Index>(i);
    out.r = std::max(0.0, c0 - u.squaredNorm());
    return out;
  }
  // A saturated DAG (every node conditioned on all predecessors) is exact, so
  // new sites condition on all of S too.
  out.idx = tree_->knn(l, m_[j] + 1 >= n ? n : m_[j]);
  const auto kk = static_cast<Eigen::Index>(out.idx.size());
  Eigen::MatrixXd K(kk, kk);
  Eigen::VectorXd c(kk);
  for (Eigen::Index a = 0; a < kk; ++a) {
    c(a) = kern(distance(l, s_.point(out.idx[a])));
    K(a, a) = c0;
    for (Eigen::Index b = 0; b < a; ++b) {
      K(a, b) = kern(distance(s_.point(out.idx[a]), s_.point(out.idx[b])));
      K(b, a) = K(a, b);
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Eigen::MatrixXd Kj = K;
    if (attempt > 0) Kj.diagonal().array() += 1e-10 * std::pow(10.0, attempt - 1);
    llt.compute(Kj);
    if (llt.info() == Eigen::Success) break;
    if (attempt == 3) throw NumericalError("h_and_r: singular parent block for outcome " + std::to_string(j));
  }
  Eigen::VectorXd h = llt.solve(c);
  out.w.assign(h.data(), h.data() + kk);
  out.r = std::max(0.0, c0 - c.dot(h));
  return out;
}

Eigen::VectorXd IoxModel::lifted(const Projection& h, std::size_t j) const {
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n()));
  for (std::size_t a = 0; a < h.idx.size(); ++a) b(h.idx[a]) += h.w[a];
  return factors_[j]->solve_transpose(b);
}

Eigen::MatrixXd IoxModel::cross_cov_point(std::span<const double> l, std::span<const double> lp) const {
  const std::size_t q = this->q();
  const bool same = distance(l, lp) < kZeroDistance;
  std::vector<Eigen::VectorXd> a(q), b(q);
  std::vector<double> r(q);
  for (std::size_t j = 0; j < q; ++j) {
    Projection pl = h_and_r(l, j);
    a[j] = lifted(pl, j);
    r[j] = pl.r;
    b[j] = same ? a[j] : lifted(h_and_r(lp, j), j);
  }
  Eigen::MatrixXd c(q, q);
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < q; ++j)
      c(i, j) = sigma_(i, j) * (a[i].dot(b[j]) + (same ? std::sqrt(r[i] * r[j]) : 0.0));
  return c;
}

Eigen::MatrixXd IoxModel::cross_cov_set(const LocationSet& t, std::size_t max_size) const {
  const std::size_t nt = t.size(), q = this->q();
  if (nt * q > max_size)
    throw ValidationError("cross_cov_set: N*q=" + std::to_string(nt * q) + " exceeds the limit " +
                          std::to_string(max_size));
  const auto N = static_cast<Eigen::Index>(nt);
  std::vector<Eigen::MatrixXd> A(q, Eigen::MatrixXd(n(), N));
  std::vector<Eigen::VectorXd> r(q, Eigen::VectorXd(N));
  for (std::size_t j = 0; j < q; ++j) {
    for (Eigen::Index k = 0; k < N; ++k) {
      Projection p = h_and_r(t.point(k), j);
      A[j].col(k) = lifted(p, j);
      r[j](k) = p.r;
    }
  }
  Eigen::MatrixXd c(N * q, N * q);
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = i; j < q; ++j) {
      Eigen::MatrixXd blk = A[i].transpose() * A[j];
      blk.diagonal() += (r[i].array() * r[j].array()).sqrt().matrix();
      blk *= sigma_(i, j);
      c.block(i * N, j * N, N, N) = blk;
      if (j != i) c.block(j * N, i * N, N, N) = blk.transpose();
    }
  }
  return c;
}

Eigen::MatrixXd IoxModel::whiten(const Eigen::MatrixXd& ytilde) const {
  if (static_cast<std::size_t>(ytilde.rows()) != n() || static_cast<std::size_t>(ytilde.cols()) != q())
    throw ValidationError("whiten: data must be n x q");
  Eigen::MatrixXd v(ytilde.rows(), ytilde.cols());
  const std::size_t nn = n();
  parallel_for(0, q(), [&](std::size_t j) {
    factors_[j]->whiten({ytilde.col(j).data(), nn}, {v.col(j).data(), nn});
  }, 1);
  return v;
}

double IoxModel::loglik_whitened(const Eigen::MatrixXd& v) const {
  const double nd = static_cast<double>(n());
  double logdiag = 0.0;
  for (std::size_t j = 0; j < q(); ++j) {
    double lj = factors_[j]->log_diag_sum();
    if (!std::isfinite(lj) || !v.col(j).allFinite())
      throw NumericalError("loglik: non-finite value from the factor of outcome " + std::to_string(j));
    logdiag += lj;
  }
  Eigen::MatrixXd vtv = v.transpose() * v;
  const double quad = (q_.array() * vtv.array()).sum();
  const double ll = -0.5 * nd * q() * std::log(2.0 * std::numbers::pi) + 0.5 * nd * log_det_q_ +
                    logdiag - 0.5 * quad;
  if (!std::isfinite(ll)) throw NumericalError("loglik: non-finite result");
  return ll;
}

double IoxModel::loglik(const Eigen::MatrixXd& ytilde) const { return loglik_whitened(whiten(ytilde)); }

double IoxModel::conditional_loglik(std::size_t j, const Eigen::MatrixXd& v, const SparseInvChol& g) const {
  const double nd = static_cast<double>(n());
  const double qjj = q_(j, j);
  const double quad = (v * q_.col(j)).squaredNorm();
  return -0.5 * nd * std::log(2.0 * std::numbers::pi) + 0.5 * nd * std::log(qjj) + g.log_diag_sum() -
         0.5 * quad / qjj;
}

Eigen::MatrixXd IoxModel::zero_distance_cross_cov(const LocationSet& t) const {
  const std::size_t q = this->q();
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(q, q);
  std::vector<Eigen::VectorXd> a(q);
  std::vector<double> r(q);
  for (std::size_t k = 0; k < t.size(); ++k) {
    for (std::size_t j = 0; j < q; ++j) {
      Projection p = h_and_r(t.point(k), j);
      a[j] = lifted(p, j);
      r[j] = p.r;
    }
    for (std::size_t i = 0; i < q; ++i)
      for (std::size_t j = i; j < q; ++j) acc(i, j) += a[i].dot(a[j]) + std::sqrt(r[i] * r[j]);
  }
  acc /= static_cast<double>(t.size());
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < i; ++j) acc(i, j) = acc(j, i);
  return sigma_.cwiseProduct(acc);
}

Eigen::MatrixXd IoxModel::zero_distance_cross_corr(const LocationSet& t) const {
  Eigen::MatrixXd c = zero_distance_cross_cov(t);
  Eigen::VectorXd d = c.diagonal().cwiseSqrt().cwiseInverse();
  return d.asDiagonal() * c * d.asDiagonal();
}

double IoxModel::avg_cross_cov(std::size_t i, std::size_t j, double hx, double hy, int n_angles,
                               const LocationSet& t) const {
  if (i >= q() || j >= q()) throw ValidationError("avg_cross_cov: outcome index out of range");
  if (hx == 0.0 && hy == 0.0) return zero_distance_cross_cov(t)(i, j);
  if (t.dim() != 2) throw ValidationError("avg_cross_cov: displacements require d = 2");
  if (n_angles < 1) throw ValidationError("avg_cross_cov: at least one angle required");
  double acc = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    auto l = t.point(k);
    Projection pi = h_and_r(l, i);
    Eigen::VectorXd ai = lifted(pi, i);
    for (int a = 1; a <= n_angles; ++a) {
      const double ang = 2.0 * std::numbers::pi * a / n_angles;
      const double lp[2] = {l[0] + hx * std::cos(ang), l[1] + hy * std::sin(ang)};
      Projection pj = h_and_r(lp, j);
      double v = ai.dot(lifted(pj, j));
      if (distance(l, lp) < kZeroDistance) v += std::sqrt(pi.r * pj.r);
      acc += v;
    }
  }
  return sigma_(i, j) * acc / (static_cast<double>(t.size()) * n_angles);
}

double matern_zero_cross_corr(double nu_i, double nu_j, double sigma_ij) {
  if (!(nu_i > 0) || !(nu_j > 0)) throw ValidationError("matern_zero_cross_corr: smoothness must be positive");
  if (sigma_ij == 0.0) return 0.0;
  const double m = 0.5 * (nu_i + nu_j);
  const double lg = 0.5 * (std::lgamma(nu_i + 1) - std::lgamma(nu_i)) +
                    0.5 * (std::lgamma(nu_j + 1) - std::lgamma(nu_j)) + std::lgamma(m) - std::lgamma(m + 1);
  return sigma_ij * std::exp(lg);
}

LocationSet probe_subset(const LocationSet& s, std::size_t k) {
  const std::size_t n = s.size();
  if (k == 0 || k >= n) return s;
  std::vector<Index> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = static_cast<Index>(i * n / k);
  return s.subset(idx);
}

}  // namespace spiox
