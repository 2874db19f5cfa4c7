#include "spiox/bessel.hpp"

#include <cmath>
#include <numbers>

#include "spiox/error.hpp"

namespace spiox {

namespace {

// Taylor coefficients of 1/Gamma(1+z) about z = 0.
constexpr double kRecipGamma[] = {
    1.0,
    0.57721566490153286061,
    -0.65587807152025388108,
    -0.042002635034095235529,
    0.1665386113822914895,
    -0.042197734555544336748,
    -0.0096219715278769735621,
    0.0072189432466630995424,
    -0.0011651675918590651121,
    -0.00021524167411495097282,
    0.00012805028238811618615,
    -0.000020134854780788238656,
    -1.2504934821426706573e-6,
    1.1330272319816958824e-6,
    -2.0563384169776071035e-7,
    6.1160951044814158179e-9,
    5.0020076444692229301e-9,
    -1.1812745704870201446e-9,
    1.0434267116911005105e-10,
    7.782263439905071254e-12,
    -3.6968056186422057082e-12,
    5.100370287454475979e-13,
    -2.0583260535665067832e-14,
    -5.3481225394230179824e-15,
    1.2267786282382607902e-15,
    -1.1812593016974587695e-16,
    1.1866922547516003326e-18,
};
constexpr int kNumCoef = sizeof(kRecipGamma) / sizeof(double);

double recip_gamma_1p(double z) {
  double s = 0.0;
  for (int k = kNumCoef - 1; k >= 0; --k) s = s * z + kRecipGamma[k];
  return s;
}

constexpr double kEps = 1e-16;
constexpr double kSwitch = 2.0;
constexpr int kMaxIter = 10000;

}  // namespace

BesselK::BesselK(double nu) : nu_(nu) {
  if (!(nu >= 0.0) || !std::isfinite(nu)) throw ValidationError("bessel: order must be finite and >= 0");
  nl_ = static_cast<int>(nu + 0.5);
  mu_ = nu - nl_;
  const double mu2 = mu_ * mu_;
  // gam1 = (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu), taken from the odd part.
  double odd = 0.0, p = 1.0;
  for (int k = 1; k < kNumCoef; k += 2) {
    odd += kRecipGamma[k] * p;
    p *= mu2;
  }
  gam1_ = -odd;
  gampl_ = recip_gamma_1p(mu_);
  gammi_ = recip_gamma_1p(-mu_);
  gam2_ = 0.5 * (gampl_ + gammi_);
  const double pimu = std::numbers::pi * mu_;
  fact_ = std::fabs(pimu) < kEps ? 1.0 : pimu / std::sin(pimu);
}

double BesselK::scaled(double x) const {
  if (!(x > 0.0)) throw ValidationError("bessel: argument must be positive");
  const double mu = mu_, mu2 = mu_ * mu_;
  const double xi = 1.0 / x, xi2 = 2.0 * xi;
  double rkmu, rk1;
  if (x < kSwitch) {
    const double x2 = 0.5 * x;
    double d = -std::log(x2);
    double e = mu * d;
    const double fact2 = std::fabs(e) < kEps ? 1.0 : std::sinh(e) / e;
    double ff = fact_ * (gam1_ * std::cosh(e) + gam2_ * fact2 * d);
    double sum = ff;
    e = std::exp(e);
    double p = 0.5 * e / gampl_;
    double q = 0.5 / (e * gammi_);
    double c = 1.0;
    d = x2 * x2;
    double sum1 = p;
    int i = 1;
    for (; i <= kMaxIter; ++i) {
      ff = (i * ff + p + q) / (i * static_cast<double>(i) - mu2);
      c *= d / i;
      p /= i - mu;
      q /= i + mu;
      const double del = c * ff;
      sum += del;
      sum1 += c * (p - i * ff);
      if (std::fabs(del) < std::fabs(sum) * kEps) break;
    }
    if (i > kMaxIter) throw NumericalError("bessel: series did not converge");
    const double ex = std::exp(x);
    rkmu = sum * ex;
    rk1 = sum1 * xi2 * ex;
  } else {
    double b = 2.0 * (1.0 + x);
    double d = 1.0 / b;
    double h = d, delh = d;
    double q1 = 0.0, q2 = 1.0;
    const double a1 = 0.25 - mu2;
    double q = a1, c = a1, a = -a1;
    double s = 1.0 + q * delh;
    int i = 1;
    for (; i <= kMaxIter; ++i) {
      a -= 2 * i;
      c = -a * c / (i + 1.0);
      const double qnew = (q1 - b * q2) / a;
      q1 = q2;
      q2 = qnew;
      q += c * qnew;
      b += 2.0;
      d = 1.0 / (b + a * d);
      delh = (b * d - 1.0) * delh;
      h += delh;
      const double dels = q * delh;
      s += dels;
      if (std::fabs(dels / s) < kEps) break;
    }
    if (i > kMaxIter) throw NumericalError("bessel: continued fraction did not converge");
    h = a1 * h;
    rkmu = std::sqrt(std::numbers::pi / (2.0 * x)) / s;
    rk1 = rkmu * (mu + x + 0.5 - h) * xi;
  }
  for (int i = 1; i <= nl_; ++i) {
    const double t = (mu + i) * xi2 * rk1 + rkmu;
    rkmu = rk1;
    rk1 = t;
  }
  return rkmu;
}

double BesselK::operator()(double x) const { return scaled(x) * std::exp(-x); }

double bessel_k(double nu, double x) { return BesselK(nu)(x); }

}  // namespace spiox
