#pragma once

#include <Eigen/Dense>
#include <functional>

namespace spiox {

struct PcgResult {
  int iterations = 0;
  double rel_residual = 0.0;
};

// Preconditioned conjugate gradient for an SPD operator given as a matvec,
// with a diagonal (Jacobi) preconditioner. `x` carries the initial guess in
// and the solution out. Throws NumericalError, reporting the residual norm,
// when the relative residual is still above `tol` after `max_iter` steps.
PcgResult pcg_solve(const std::function<void(const Eigen::VectorXd&, Eigen::VectorXd&)>& apply,
                    const Eigen::VectorXd& diag, const Eigen::VectorXd& b, Eigen::VectorXd& x,
                    double tol = 1e-8, int max_iter = -1);

}  // namespace spiox
