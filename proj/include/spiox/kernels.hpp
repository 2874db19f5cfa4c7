#pragma once

#include <Eigen/Dense>
#include <memory>
#include <vector>

#include "spiox/bessel.hpp"
#include "spiox/geom.hpp"

namespace spiox {

// Distances below this are treated as coincident locations.
inline constexpr double kZeroDistance = 1e-14;

// Matérn correlation parameters plus a nugget. The correlation at zero
// distance is 1 + tau2.
struct KernelParams {
  double phi = 1.0;   // decay, 1/distance
  double nu = 0.5;    // smoothness
  double tau2 = 0.0;  // nugget relative to unit sill

  bool operator==(const KernelParams&) const = default;
};

bool valid(const KernelParams& p);
void validate(const KernelParams& p);

// Evaluator with the order-dependent constants precomputed. For smoothness
// values without a closed form, `tabulate` fits a per-octave Chebyshev table
// to the Bessel evaluation so that repeated calls are cheap; this costs a few
// hundred direct evaluations up front.
class Matern {
 public:
  explicit Matern(const KernelParams& p, bool tabulate = true);

  const KernelParams& params() const { return p_; }
  double operator()(double dist) const;
  // Correlation without the nugget; 1 at dist = 0.
  double smooth(double dist) const;

 private:
  enum class Form { Half1, Half3, Half5, General };
  KernelParams p_;
  Form form_;
  BesselK bk_;
  double log_norm_;  // (1 - nu) log 2 - lgamma(nu)
  double norm_;
  std::shared_ptr<const std::vector<double>> table_;

  double scaled_direct(double x) const;
  double scaled_general(double x) const;
  void build_table();
};

double matern(double dist, const KernelParams& p);

Eigen::MatrixXd corr_matrix(const LocationSet& a, const LocationSet& b, const KernelParams& p);
Eigen::MatrixXd corr_matrix(const LocationSet& a, const KernelParams& p);

}  // namespace spiox
