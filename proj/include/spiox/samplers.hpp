#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>

namespace spiox {

using Rng = std::mt19937_64;

double draw_normal(Rng& rng);
Eigen::VectorXd draw_normal(Eigen::Index n, Rng& rng);
Eigen::MatrixXd draw_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// Gamma with the given shape and scale.
double draw_gamma(double shape, double scale, Rng& rng);
// Inverse gamma with density proportional to x^-(shape+1) exp(-scale/x);
// mean scale/(shape-1).
double draw_inverse_gamma(double shape, double scale, Rng& rng);

// Inverse Wishart with degrees of freedom nu and scale Psi; mean
// Psi/(nu - q - 1). Uses the Bartlett decomposition of the Wishart(nu, Psi^-1)
// precision. Requires nu > q - 1 and Psi SPD.
Eigen::MatrixXd draw_inverse_wishart(double nu, const Eigen::MatrixXd& psi, Rng& rng);

// Draw from N(P^-1 b, P^-1) given the precision P. Retries with a growing
// diagonal jitter; throws NumericalError if P stays indefinite.
Eigen::VectorXd draw_mvn_precision(const Eigen::MatrixXd& prec, const Eigen::VectorXd& b, Rng& rng);
// Draw from N(mean, cov) for a PSD covariance (zero-variance directions allowed).
Eigen::VectorXd draw_mvn_cov(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov, Rng& rng);

// Index drawn with probability proportional to exp(logw).
std::size_t draw_categorical_log(const Eigen::VectorXd& logw, Rng& rng);

}  // namespace spiox
