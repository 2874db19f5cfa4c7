#pragma once

namespace spiox {

// Modified Bessel function of the second kind K_nu(x) for real nu >= 0 and
// x > 0. Temme's series below x = 2, Steed's continued fraction above, then
// forward recurrence in the order. Quantities that depend only on nu are
// computed once per object.
class BesselK {
 public:
  explicit BesselK(double nu);

  double nu() const { return nu_; }
  // e^x K_nu(x); finite for every x > 0.
  double scaled(double x) const;
  double operator()(double x) const;

 private:
  double nu_;
  double mu_;   // nu - round(nu), in [-1/2, 1/2]
  int nl_;      // number of recurrence steps
  double gam1_, gam2_, gampl_, gammi_;
  double fact_;
};

double bessel_k(double nu, double x);

}  // namespace spiox
