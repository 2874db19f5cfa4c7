#include "spiox/pcg.hpp"

#include <cmath>
#include <sstream>

#include "spiox/error.hpp"

namespace spiox {

PcgResult pcg_solve(const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>& apply,
                    const Eigen::VectorXd& diag, const Eigen::VectorXd& b, Eigen::VectorXd& x,
                    double tol, int max_iter) {
  const Eigen::Index n = b.size();
  if (diag.size() != n) throw ValidationError("pcg: preconditioner size mismatch");
  if (x.size() != n) x = Eigen::VectorXd::Zero(n);
  if (max_iter < 0) max_iter = static_cast<int>(5 * n);
  PcgResult res;
  const double bnorm = b.norm();
  if (bnorm == 0.0) {
    x.setZero();
    return res;
  }
  Eigen::VectorXd minv = diag.cwiseInverse();
  Eigen::VectorXd ax(n), r(n), z(n), p(n), ap(n);
  apply(x, ax);
  r = b - ax;
  res.rel_residual = r.norm() / bnorm;
  if (res.rel_residual <= tol) return res;
  z = minv.cwiseProduct(r);
  p = z;
  double rz = r.dot(z);
  for (int it = 1; it <= max_iter; ++it) {
    apply(p, ap);
    const double pap = p.dot(ap);
    if (!(pap > 0)) {
      std::ostringstream os;
      os << "pcg: operator not positive definite at iteration " << it << " (residual norm "
         << r.norm() << ")";
      throw NumericalError(os.str());
    }
    const double alpha = rz / pap;
    x += alpha * p;
    r -= alpha * ap;
    res.iterations = it;
    res.rel_residual = r.norm() / bnorm;
    if (res.rel_residual <= tol) return res;
    z = minv.cwiseProduct(r);
    const double rz_new = r.dot(z);
    p = z + (rz_new / rz) * p;
    rz = rz_new;
  }
  std::ostringstream os;
  os << "pcg: no convergence after " << max_iter << " iterations (residual norm " << r.norm()
     << ", relative " << res.rel_residual << ")";
  throw NumericalError(os.str());
}

}  // namespace spiox
