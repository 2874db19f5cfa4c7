#include "spiox/samplers.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "spiox/error.hpp"

namespace spiox {

double draw_normal(Rng& rng) {
  std::normal_distribution<double> z;
  return z(rng);
}

Eigen::VectorXd draw_normal(Eigen::Index n, Rng& rng) {
  std::normal_distribution<double> z;
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = z(rng);
  return v;
}

Eigen::MatrixXd draw_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = z(rng);
  return m;
}

double draw_gamma(double shape, double scale, Rng& rng) {
  if (!(shape > 0) || !(scale > 0)) throw ValidationError("gamma: shape and scale must be positive");
  std::gamma_distribution<double> g(shape, scale);
  return g(rng);
}

double draw_inverse_gamma(double shape, double scale, Rng& rng) {
  if (!(shape > 0) || !(scale > 0)) throw ValidationError("inverse gamma: shape and scale must be positive");
  return scale / draw_gamma(shape, 1.0, rng);
}

Eigen::MatrixXd draw_inverse_wishart(double nu, const Eigen::MatrixXd& psi, Rng& rng) {
  const Eigen::Index q = psi.rows();
  if (q == 0 || psi.cols() != q) throw ValidationError("inverse Wishart: scale must be square");
  if (!(nu > q - 1)) throw ValidationError("inverse Wishart: need nu > q - 1");
  Eigen::LLT<Eigen::MatrixXd> lp(psi);
  if (lp.info() != Eigen::Success) throw ValidationError("inverse Wishart: scale is not positive definite");
  // Bartlett: Sigma^-1 = Lw A A^T Lw^T for any Lw Lw^T = Psi^-1. With
  // Psi = Lp Lp^T take Lw = Lp^-T, so Sigma = (Lp A^-T)(Lp A^-T)^T.
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(q, q);
  for (Eigen::Index i = 0; i < q; ++i) {
    a(i, i) = std::sqrt(2.0 * draw_gamma(0.5 * (nu - static_cast<double>(i)), 1.0, rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = draw_normal(rng);
  }
  Eigen::MatrixXd ainvT = a.transpose().triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(q, q));
  Eigen::MatrixXd m = Eigen::MatrixXd(lp.matrixL()) * ainvT;
  Eigen::MatrixXd s = m * m.transpose();
  return 0.5 * (s + s.transpose());
}

Eigen::VectorXd draw_mvn_precision(const Eigen::MatrixXd& prec, const Eigen::VectorXd& b, Rng& rng) {
  const Eigen::Index k = prec.rows();
  Eigen::LLT<Eigen::MatrixXd> llt;
  const double scale = k > 0 ? prec.diagonal().cwiseAbs().maxCoeff() : 1.0;
  for (int attempt = 0;; ++attempt) {
    Eigen::MatrixXd p = prec;
    if (attempt > 0) p.diagonal().array() += scale * 1e-12 * std::pow(10.0, attempt - 1);
    llt.compute(p);
    if (llt.info() == Eigen::Success) break;
    if (attempt == 4) throw NumericalError("Gaussian draw: precision matrix is not positive definite");
  }
  Eigen::VectorXd mean = llt.solve(b);
  Eigen::VectorXd z = draw_normal(k, rng);
  return mean + llt.matrixU().solve(z);
}

Eigen::VectorXd draw_mvn_cov(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, Rng& rng) {
  const Eigen::Index k = mean.size();
  Eigen::VectorXd z = draw_normal(k, rng);
  if (k == 0) return mean;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()));
  Eigen::VectorXd sd = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return mean + es.eigenvectors() * sd.cwiseProduct(z);
}

std::size_t draw_categorical_log(const Eigen::VectorXd& logw, Rng& rng) {
  const double mx = logw.maxCoeff();
  if (!std::isfinite(mx)) throw NumericalError("categorical draw: no finite log weight");
  Eigen::VectorXd w = (logw.array() - mx).exp();
  std::uniform_real_distribution<double> u(0.0, w.sum());
  double x = u(rng), acc = 0.0;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    acc += w(i);
    if (x < acc) return static_cast<std::size_t>(i);
  }
  for (Eigen::Index i = w.size() - 1; i >= 0; --i)
    if (w(i) > 0) return static_cast<std::size_t>(i);
  return 0;
}

}  // namespace spiox
