#include "spiox/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "spiox/error.hpp"

namespace spiox {

bool valid(const KernelParams& p) {
  return std::isfinite(p.phi) && std::isfinite(p.nu) && std::isfinite(p.tau2) && p.phi > 0 &&
         p.nu > 0 && p.tau2 >= 0;
}

void validate(const KernelParams& p) {
  if (!valid(p))
    throw ValidationError("kernel parameters invalid: phi=" + std::to_string(p.phi) +
                          " nu=" + std::to_string(p.nu) + " tau2=" + std::to_string(p.tau2));
}

namespace {
bool near(double a, double b) { return std::fabs(a - b) < 1e-14; }

// Octave table: segment e covers x in [2^e, 2^(e+1)).
constexpr int kMinExp = -10;
constexpr int kMaxExp = 9;
constexpr int kSegments = kMaxExp - kMinExp + 1;
constexpr int kDegree = 22;
constexpr double kTableLo = 1.0 / (1 << -kMinExp);
constexpr double kTableHi = static_cast<double>(1 << (kMaxExp + 1));
}  // namespace

Matern::Matern(const KernelParams& p, bool tabulate)
    : p_(p), form_(Form::General), bk_((validate(p), p.nu)) {
  if (near(p.nu, 0.5))
    form_ = Form::Half1;
  else if (near(p.nu, 1.5))
    form_ = Form::Half3;
  else if (near(p.nu, 2.5))
    form_ = Form::Half5;
  log_norm_ = (1.0 - p.nu) * std::numbers::ln2 - std::lgamma(p.nu);
  norm_ = std::exp(log_norm_);
  if (form_ == Form::General && tabulate) build_table();
}

// e^x rho(x), computed from the Bessel evaluator.
double Matern::scaled_direct(double x) const {
  // Near the origin x^nu K_nu(x) is O(1); the log form would lose digits to
  // the large cancelling terms.
  if (x < 2.0) return norm_ * std::pow(x, p_.nu) * bk_.scaled(x);
  return std::exp(log_norm_ + p_.nu * std::log(x)) * bk_.scaled(x);
}

void Matern::build_table() {
  // Chebyshev interpolant of e^x rho(x) on each octave. The function is
  // analytic away from x = 0, so per-octave convergence is geometric.
  constexpr int n = kDegree + 1;
  auto table = std::make_shared<std::vector<double>>(static_cast<std::size_t>(kSegments) * n);
  std::vector<double> f(n);
  for (int seg = 0; seg < kSegments; ++seg) {
    const double lo = std::ldexp(1.0, kMinExp + seg);
    for (int k = 0; k < n; ++k) {
      const double u = std::cos(std::numbers::pi * (k + 0.5) / n);
      f[k] = scaled_direct(lo * (1.5 + 0.5 * u));
    }
    double* c = table->data() + static_cast<std::size_t>(seg) * n;
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) acc += f[k] * std::cos(std::numbers::pi * j * (k + 0.5) / n);
      c[j] = (j == 0 ? 1.0 : 2.0) * acc / n;
    }
  }
  table_ = std::move(table);
}

double Matern::scaled_general(double x) const {
  if (table_ && x >= kTableLo && x < kTableHi) {
    // Exponent and mantissa straight from the bit pattern; x is normal here.
    const auto bits = std::bit_cast<std::uint64_t>(x);
    const int e = static_cast<int>((bits >> 52) & 0x7ff) - 1023;
    const double u = std::bit_cast<double>((bits & 0x000fffffffffffffULL) | 0x4000000000000000ULL) - 3.0;
    const double* c = table_->data() + static_cast<std::size_t>(e - kMinExp) * (kDegree + 1);
    double b1 = 0.0, b2 = 0.0;
    for (int j = kDegree; j >= 1; --j) {
      const double t = 2.0 * u * b1 - b2 + c[j];
      b2 = b1;
      b1 = t;
    }
    return u * b1 - b2 + c[0];
  }
  return scaled_direct(x);
}

double Matern::smooth(double dist) const {
  if (!(dist >= 0.0) || !std::isfinite(dist))
    throw ValidationError("matern: distance must be finite and non-negative");
  if (dist < kZeroDistance) return 1.0;
  const double x = p_.phi * dist;
  switch (form_) {
    case Form::Half1:
      return std::exp(-x);
    case Form::Half3:
      return (1.0 + x) * std::exp(-x);
    case Form::Half5:
      return (1.0 + x + x * x / 3.0) * std::exp(-x);
    case Form::General:
      break;
  }
  return std::min(scaled_general(x) * std::exp(-x), 1.0);
}

double Matern::operator()(double dist) const {
  const double v = smooth(dist);
  return dist < kZeroDistance ? v + p_.tau2 : v;
}

double matern(double dist, const KernelParams& p) { return Matern(p, false)(dist); }

Eigen::MatrixXd corr_matrix(const LocationSet& a, const LocationSet& b, const KernelParams& p) {
  if (a.dim() != b.dim()) throw ValidationError("corr_matrix: dimension mismatch");
  Matern k(p);
  Eigen::MatrixXd out(a.size(), b.size());
  for (std::size_t j = 0; j < b.size(); ++j)
    for (std::size_t i = 0; i < a.size(); ++i) out(i, j) = k(distance(a.point(i), b.point(j)));
  return out;
}

Eigen::MatrixXd corr_matrix(const LocationSet& a, const KernelParams& p) {
  Matern k(p);
  const auto n = static_cast<Eigen::Index>(a.size());
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    out(j, j) = 1.0 + p.tau2;
    for (Eigen::Index i = j + 1; i < n; ++i) {
      double v = k(distance(a.point(i), a.point(j)));
      out(i, j) = v;
      out(j, i) = v;
    }
  }
  return out;
}

}  // namespace spiox
