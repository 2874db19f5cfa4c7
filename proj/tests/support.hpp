#pragma once

// Shared helpers for tests: random inputs and dense-linear-algebra oracles
// that do not go through the library's sparse code paths.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include "spiox/geom.hpp"

namespace testing {

inline spiox::LocationSet random_locations(std::size_t n, std::size_t d, std::uint64_t seed,
                                           double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> xs(n * d);
  for (auto& v : xs) v = u(rng);
  return spiox::LocationSet(std::move(xs), d);
}

inline Eigen::MatrixXd random_spd(int q, std::uint64_t seed, double ridge = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  Eigen::MatrixXd a(q, q);
  for (int i = 0; i < q; ++i)
    for (int j = 0; j < q; ++j) a(i, j) = z(rng);
  Eigen::MatrixXd s = a * a.transpose() / q + ridge * Eigen::MatrixXd::Identity(q, q);
  return s;
}

inline Eigen::MatrixXd to_correlation(const Eigen::MatrixXd& s) {
  Eigen::VectorXd d = s.diagonal().cwiseSqrt().cwiseInverse();
  return d.asDiagonal() * s * d.asDiagonal();
}

inline Eigen::VectorXd random_normal(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z;
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = z(rng);
  return v;
}

// Dense multivariate normal log density via LDLT-free Cholesky.
inline double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                         const Eigen::MatrixXd& cov) {
  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  Eigen::VectorXd r = llt.matrixL().solve(x - mean);
  double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return -0.5 * x.size() * std::log(2.0 * std::numbers::pi) - 0.5 * logdet - 0.5 * r.squaredNorm();
}

inline double min_eigenvalue(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()),
                                                    Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

inline double rel_err(double a, double b) { return std::fabs(a - b) / std::max(1.0, std::fabs(b)); }

inline double frob_rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(1e-300, b.norm());
}

// Gaussian conditioning: law of x_a given x_b = xb under N(mu, K).
struct Conditional {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline Conditional condition(const Eigen::VectorXd& mu, const Eigen::MatrixXd& k,
                             const std::vector<int>& a, const std::vector<int>& b,
                             const Eigen::VectorXd& xb) {
  const int na = static_cast<int>(a.size()), nb = static_cast<int>(b.size());
  Eigen::MatrixXd kaa(na, na), kab(na, nb), kbb(nb, nb);
  Eigen::VectorXd ma(na), mb(nb);
  for (int i = 0; i < na; ++i) {
    ma(i) = mu(a[i]);
    for (int j = 0; j < na; ++j) kaa(i, j) = k(a[i], a[j]);
    for (int j = 0; j < nb; ++j) kab(i, j) = k(a[i], b[j]);
  }
  for (int i = 0; i < nb; ++i) {
    mb(i) = mu(b[i]);
    for (int j = 0; j < nb; ++j) kbb(i, j) = k(b[i], b[j]);
  }
  Eigen::LDLT<Eigen::MatrixXd> f(kbb);
  Conditional c;
  c.mean = ma + kab * f.solve(xb - mb);
  c.cov = kaa - kab * f.solve(kab.transpose());
  return c;
}

}  // namespace testing

#include "spiox/kernels.hpp"

namespace testing {

// Dense IOX oracle built directly from correlation matrices and Eigen's LLT;
// no sparse factor code involved.
struct DenseIox {
  spiox::LocationSet s;
  std::vector<spiox::KernelParams> theta;
  Eigen::MatrixXd sigma;
  std::vector<Eigen::MatrixXd> L;    // lower Cholesky factors of rho_j(S)
  std::vector<Eigen::MatrixXd> rho;  // rho_j(S)

  // The Cholesky factor depends on the ordering of S; `order` lists node ids
  // in factorization order (identity when empty). L is stored with rows by
  // node id.
  DenseIox(spiox::LocationSet s_, std::vector<spiox::KernelParams> th, Eigen::MatrixXd sg,
           const std::vector<spiox::Index>& order = {})
      : s(std::move(s_)), theta(std::move(th)), sigma(std::move(sg)) {
    const int n = static_cast<int>(s.size());
    Eigen::MatrixXd P = Eigen::MatrixXd::Identity(n, n);
    if (!order.empty()) {
      P.setZero();
      for (int k = 0; k < n; ++k) P(k, order[k]) = 1.0;
    }
    for (const auto& p : theta) {
      rho.push_back(spiox::corr_matrix(s, p));
      Eigen::LLT<Eigen::MatrixXd> llt(P * rho.back() * P.transpose());
      L.push_back(P.transpose() * Eigen::MatrixXd(llt.matrixL()));
    }
  }

  int n() const { return static_cast<int>(s.size()); }
  int q() const { return static_cast<int>(theta.size()); }

  // Outcome-major C(S).
  Eigen::MatrixXd cov_s() const {
    const int n = this->n(), q = this->q();
    Eigen::MatrixXd c(n * q, n * q);
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < q; ++j) c.block(i * n, j * n, n, n) = sigma(i, j) * L[i] * L[j].transpose();
    return c;
  }

  // h_j(t) (dense row) and r_j(t) by a direct solve against rho_j(S).
  std::pair<Eigen::RowVectorXd, double> hr(std::span<const double> t, int j) const {
    Eigen::RowVectorXd c(n());
    spiox::Matern k(theta[j], false);
    bool coincide = false;
    for (int i = 0; i < n(); ++i) {
      double d = spiox::distance(t, s.point(i));
      c(i) = k(d);
      coincide = coincide || d < spiox::kZeroDistance;
    }
    Eigen::RowVectorXd h = rho[j].llt().solve(c.transpose()).transpose();
    double r = 1.0 + theta[j].tau2 - h.dot(c);
    if (coincide) r = 0.0;
    return {h, r};
  }

  Eigen::MatrixXd cov_point(std::span<const double> a, std::span<const double> b) const {
    const int q = this->q();
    bool same = spiox::distance(a, b) < spiox::kZeroDistance;
    Eigen::MatrixXd c(q, q);
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < q; ++j) {
        auto [hi, ri] = hr(a, i);
        auto [hj, rj] = hr(b, j);
        c(i, j) = sigma(i, j) * ((hi * L[i] * L[j].transpose() * hj.transpose())(0, 0) +
                                 (same ? std::sqrt(std::max(0.0, ri) * std::max(0.0, rj)) : 0.0));
      }
    return c;
  }

  // Outcome-major log density of Y (n x q) under N(0, C(S)).
  double logpdf(const Eigen::MatrixXd& y) const {
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(y.data(), y.size());
    return mvn_logpdf(v, Eigen::VectorXd::Zero(v.size()), cov_s());
  }
};

// Exact draw of Y (n x q) from N(0, C(S)) by a dense Cholesky of C(S).
inline Eigen::MatrixXd sample_dense(const DenseIox& d, std::uint64_t seed) {
  Eigen::MatrixXd c = d.cov_s();
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  Eigen::VectorXd z = random_normal(static_cast<int>(c.rows()), seed);
  Eigen::VectorXd v = llt.matrixL() * z;
  return Eigen::Map<Eigen::MatrixXd>(v.data(), d.n(), d.q());
}

}  // namespace testing
