#include <doctest.h>

#include <cmath>

#include "spiox/error.hpp"
#include "spiox/ioxcore.hpp"
#include "support.hpp"

using namespace spiox;

namespace {

std::vector<KernelParams> trivariate_theta(double tau2 = 0.0) {
  return {{6.0, 0.5, tau2}, {9.0, 0.8, tau2}, {4.0, 1.2, tau2}};
}

Eigen::MatrixXd trivariate_sigma() {
  Eigen::MatrixXd s(3, 3);
  s << 1.0, -0.9, 0.7, -0.9, 1.0, -0.5, 0.7, -0.5, 1.0;
  return s;
}

IoxOptions exact_opts() {
  IoxOptions o;
  o.m = 0;
  o.order = OrderScheme::random(3);
  return o;
}

IoxOptions vecchia_opts(std::size_t m, std::uint64_t seed = 3) {
  IoxOptions o;
  o.m = m;
  o.order = OrderScheme::random(seed);
  return o;
}

Eigen::MatrixXd sample_y(const testing::DenseIox& d, std::uint64_t seed) {
  Eigen::MatrixXd c = d.cov_s();
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  Eigen::VectorXd z = testing::random_normal(static_cast<int>(c.rows()), seed);
  Eigen::VectorXd v = llt.matrixL() * z;
  return Eigen::Map<Eigen::MatrixXd>(v.data(), d.n(), d.q());
}

}  // namespace

TEST_CASE("spd_inverse validates input") {
  Eigen::MatrixXd a(2, 2);
  a << 2, 1, 1, 2;
  CHECK((spd_inverse(a) * a - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
  Eigen::MatrixXd b(2, 2);
  b << 1, 2, 2, 1;
  CHECK_THROWS_AS(spd_inverse(b), ValidationError);
  Eigen::MatrixXd c(2, 2);
  c << 1, 0.5, 0.4, 1;
  CHECK_THROWS_AS(spd_inverse(c), ValidationError);
}

TEST_CASE("h_and_r at reference sites, far away, and a 2-site hand solve") {
  auto s = testing::random_locations(12, 2, 1);
  IoxModel model(s, trivariate_theta(), trivariate_sigma(), exact_opts());
  for (std::size_t j = 0; j < 3; ++j) {
    auto p = model.h_and_r(s.point(3), j);
    REQUIRE(p.idx.size() == 1);
    CHECK(p.idx[0] == 3);
    CHECK(p.w[0] == 1.0);
    CHECK(p.r == 0.0);
    std::vector<double> far{500.0, 500.0};
    auto f = model.h_and_r(far, j);
    double hmax = 0.0;
    for (double w : f.w) hmax = std::max(hmax, std::fabs(w));
    CHECK(hmax < 1e-12);
    CHECK(f.r == doctest::Approx(1.0).epsilon(1e-12));
  }

  LocationSet two({0.0, 0.0, 0.1, 0.0}, 2);
  KernelParams p{10.0, 0.5, 0.0};
  IoxModel m2(two, {p}, Eigen::MatrixXd::Identity(1, 1), exact_opts());
  std::vector<double> l{0.05, 0.05};
  auto pr = m2.h_and_r(l, 0);
  // Explicit 2x2 solve.
  double a = std::exp(-1.0);
  double c0 = std::exp(-10.0 * std::hypot(0.05, 0.05)), c1 = c0;
  double det = 1.0 - a * a;
  double h0 = (c0 - a * c1) / det, h1 = (c1 - a * c0) / det;
  CHECK(pr.w[0] == doctest::Approx(h0).epsilon(1e-12));
  CHECK(pr.w[1] == doctest::Approx(h1).epsilon(1e-12));
  CHECK(pr.r == doctest::Approx(1.0 - h0 * c0 - h1 * c1).epsilon(1e-12));
}

TEST_CASE("Vecchia projection uses the nearest reference sites") {
  auto s = testing::random_locations(80, 2, 2);
  KernelParams p{12.0, 1.1, 0.01};
  IoxModel model(s, {p}, Eigen::MatrixXd::Identity(1, 1), vecchia_opts(6));
  std::vector<double> l{0.4321, 0.5678};
  auto pr = model.h_and_r(l, 0);
  auto nn = nearest_neighbors(l, s, 6);
  CHECK(pr.idx == nn);
  auto sub = s.subset(nn);
  Eigen::MatrixXd K = corr_matrix(sub, p);
  Eigen::VectorXd c(6);
  for (int a = 0; a < 6; ++a) c(a) = matern(distance(l, sub.point(a)), p);
  Eigen::VectorXd h = K.ldlt().solve(c);
  for (int a = 0; a < 6; ++a) CHECK(pr.w[a] == doctest::Approx(h(a)).epsilon(1e-10));
  CHECK(pr.r == doctest::Approx(1.01 - c.dot(h)).epsilon(1e-10));
}

TEST_CASE("cross_cov_point matches the dense oracle, bounds and marginals") {
  auto s = testing::random_locations(15, 2, 4);
  auto theta = trivariate_theta();
  IoxModel model(s, theta, trivariate_sigma(), exact_opts());
  testing::DenseIox dense(s, theta, trivariate_sigma(), model.dag(0)->order());
  auto t = testing::random_locations(6, 2, 5);

  for (std::size_t a = 0; a < t.size(); ++a) {
    for (std::size_t b = 0; b < t.size(); ++b) {
      auto c = model.cross_cov_point(t.point(a), t.point(b));
      auto want = dense.cov_point(t.point(a), t.point(b));
      CHECK((c - want).cwiseAbs().maxCoeff() < 1e-9);
      auto ct = model.cross_cov_point(t.point(b), t.point(a));
      CHECK((c - ct.transpose()).cwiseAbs().maxCoeff() < 1e-12);
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(std::fabs(c(i, j)) <= std::fabs(model.sigma()(i, j)) + 1e-10);
    }
  }
  // Marginal covariance at reference sites.
  for (std::size_t k = 0; k < 5; ++k) {
    auto c = model.cross_cov_point(s.point(k), s.point(k));
    for (int i = 0; i < 3; ++i) CHECK(c(i, i) == doctest::Approx(model.sigma()(i, i)).epsilon(1e-10));
    for (std::size_t b = 0; b < t.size(); ++b) {
      auto cb = model.cross_cov_point(s.point(k), t.point(b));
      for (int i = 0; i < 3; ++i)
        CHECK(std::fabs(cb(i, i) - model.sigma()(i, i) * matern(distance(s.point(k), t.point(b)), theta[i])) <
              1e-10);
    }
  }
}

TEST_CASE("identical margins give sigma_ij at zero distance") {
  auto s = testing::random_locations(14, 2, 6);
  KernelParams p{7.0, 1.3, 0.0};
  IoxModel model(s, {p, p, p}, trivariate_sigma(), exact_opts());
  auto t = testing::random_locations(5, 2, 7);
  for (std::size_t a = 0; a < t.size(); ++a) {
    auto c = model.cross_cov_point(t.point(a), t.point(a));
    CHECK((c - model.sigma()).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK((model.zero_distance_cross_cov(t) - model.sigma()).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(model.avg_cross_cov(0, 1, 0.0, 0.0, 8, t) == doctest::Approx(-0.9).epsilon(1e-10));
}

TEST_CASE("cross_cov_set structure") {
  auto s = testing::random_locations(12, 2, 8);
  auto theta = trivariate_theta(0.02);
  IoxModel model(s, theta, trivariate_sigma(), exact_opts());

  // Mixed set: half reference sites, half new.
  std::vector<double> xs;
  for (std::size_t k = 0; k < 4; ++k) xs.insert(xs.end(), s.point(k).begin(), s.point(k).end());
  auto extra = testing::random_locations(5, 2, 9);
  xs.insert(xs.end(), extra.data().begin(), extra.data().end());
  LocationSet t(xs, 2);
  auto c = model.cross_cov_set(t);
  const auto N = static_cast<Eigen::Index>(t.size());
  CHECK((c - c.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(testing::min_eigenvalue(c) >= -1e-8 * static_cast<double>(c.rows()));
  for (Eigen::Index a = 0; a < N; ++a)
    for (Eigen::Index b = 0; b < N; ++b) {
      auto p = model.cross_cov_point(t.point(a), t.point(b));
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK(std::fabs(c(i * N + a, j * N + b) - p(i, j)) < 1e-12);
    }
  CHECK_THROWS_AS(model.cross_cov_set(t, 10), ValidationError);

  // Separable parameters at T = S.
  KernelParams p{5.0, 0.9, 0.0};
  IoxModel sep(s, {p, p, p}, trivariate_sigma(), exact_opts());
  Eigen::MatrixXd rho = corr_matrix(s, p);
  Eigen::MatrixXd kron(36, 36);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) kron.block(i * 12, j * 12, 12, 12) = trivariate_sigma()(i, j) * rho;
  CHECK((sep.cross_cov_set(s) - kron).cwiseAbs().maxCoeff() < 1e-10);

  // Single outcome scales by sigma_11.
  Eigen::MatrixXd s11(1, 1);
  s11 << 2.5;
  IoxModel uni(s, {theta[1]}, s11, exact_opts());
  IoxModel unit(s, {theta[1]}, Eigen::MatrixXd::Identity(1, 1), exact_opts());
  CHECK((uni.cross_cov_set(t) - 2.5 * unit.cross_cov_set(t)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("Schur complement of C(S) vanishes between distinct new sites") {
  auto s = testing::random_locations(10, 2, 10);
  auto theta = trivariate_theta(0.01);
  IoxModel model(s, theta, trivariate_sigma(), exact_opts());
  auto t = testing::random_locations(4, 2, 11);
  Eigen::MatrixXd cs = model.cross_cov_set(s);
  const int n = 10;
  auto cross = [&](std::span<const double> l) {
    Eigen::MatrixXd c(3, 3 * n);
    for (int k = 0; k < n; ++k) {
      auto b = model.cross_cov_point(l, s.point(k));
      for (int j = 0; j < 3; ++j) c.col(j * n + k) = b.col(j);
    }
    return c;
  };
  for (std::size_t a = 0; a < t.size(); ++a)
    for (std::size_t b = 0; b < t.size(); ++b) {
      if (a == b) continue;
      Eigen::MatrixXd ca = cross(t.point(a)), cb = cross(t.point(b));
      Eigen::MatrixXd resid = model.cross_cov_point(t.point(a), t.point(b)) - ca * cs.ldlt().solve(cb.transpose());
      CHECK(resid.cwiseAbs().maxCoeff() <= 1e-8);
    }
}

TEST_CASE("loglik against dense oracles") {
  SUBCASE("single outcome with unit Sigma") {
    auto s = testing::random_locations(18, 2, 12);
    KernelParams p{8.0, 0.7, 0.05};
    IoxModel model(s, {p}, Eigen::MatrixXd::Identity(1, 1), vecchia_opts(17));
    Eigen::VectorXd y = testing::random_normal(18, 1);
    double want = testing::mvn_logpdf(y, Eigen::VectorXd::Zero(18), corr_matrix(s, p));
    CHECK(model.loglik(y) == doctest::Approx(want).epsilon(1e-10));
  }
  SUBCASE("trivariate, saturated Vecchia and exact paths") {
    auto s = testing::random_locations(20, 2, 13);
    auto theta = trivariate_theta(0.01);
    IoxModel vm(s, theta, trivariate_sigma(), vecchia_opts(19));
    IoxModel em(s, theta, trivariate_sigma(), vecchia_opts(0));
    testing::DenseIox dense(s, theta, trivariate_sigma(), vm.dag(0)->order());
    Eigen::MatrixXd y = sample_y(dense, 2);
    double want = dense.logpdf(y);
    CHECK(testing::rel_err(vm.loglik(y), want) <= 1e-8);
    CHECK(testing::rel_err(em.loglik(y), want) <= 1e-8);
  }
  SUBCASE("separable case equals the matrix-normal density") {
    auto s = testing::random_locations(16, 2, 14);
    KernelParams p{6.0, 1.4, 0.0};
    Eigen::MatrixXd sig = testing::random_spd(3, 5);
    IoxModel model(s, {p, p, p}, sig, exact_opts());
    Eigen::MatrixXd y(16, 3);
    for (int j = 0; j < 3; ++j) y.col(j) = testing::random_normal(16, 20 + j);
    // Kronecker oracle: vec(Y) ~ N(0, Sigma (x) rho).
    Eigen::MatrixXd rho = corr_matrix(s, p);
    Eigen::MatrixXd kron(48, 48);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) kron.block(i * 16, j * 16, 16, 16) = sig(i, j) * rho;
    Eigen::VectorXd v = Eigen::Map<Eigen::VectorXd>(y.data(), 48);
    CHECK(testing::rel_err(model.loglik(y), testing::mvn_logpdf(v, Eigen::VectorXd::Zero(48), kron)) <= 1e-10);
  }
}

TEST_CASE("loglik is invariant to relabeling outcomes") {
  auto s = testing::random_locations(40, 2, 15);
  auto theta = trivariate_theta(0.01);
  Eigen::MatrixXd sig = trivariate_sigma();
  IoxModel model(s, theta, sig, vecchia_opts(8));
  Eigen::MatrixXd y(40, 3);
  for (int j = 0; j < 3; ++j) y.col(j) = testing::random_normal(40, 30 + j);
  std::vector<int> perm{2, 0, 1};
  Eigen::MatrixXd yp(40, 3), sp(3, 3);
  std::vector<KernelParams> tp(3);
  for (int a = 0; a < 3; ++a) {
    yp.col(a) = y.col(perm[a]);
    tp[a] = theta[perm[a]];
    for (int b = 0; b < 3; ++b) sp(a, b) = sig(perm[a], perm[b]);
  }
  IoxModel permuted(s, tp, sp, vecchia_opts(8));
  CHECK(std::fabs(model.loglik(y) - permuted.loglik(yp)) <= 1e-10 * std::fabs(model.loglik(y)));
}

TEST_CASE("conditional log density") {
  SUBCASE("single outcome ratios equal joint ratios") {
    auto s = testing::random_locations(25, 2, 16);
    KernelParams a{8.0, 0.7, 0.01}, b{11.0, 1.1, 0.03};
    IoxModel model(s, {a}, Eigen::MatrixXd::Constant(1, 1, 1.7), vecchia_opts(5));
    Eigen::MatrixXd y = testing::random_normal(25, 3);
    double la = model.loglik(y);
    Eigen::MatrixXd va = model.whiten(y);
    double ca = model.conditional_loglik(0, va);
    model.set_theta(0, b);
    double lb = model.loglik(y);
    double cb = model.conditional_loglik(0, model.whiten(y));
    CHECK(std::fabs((cb - ca) - (lb - la)) < 1e-10);
    CHECK(ca == doctest::Approx(la).epsilon(1e-12));
  }
  SUBCASE("trivariate against dense Gaussian conditioning") {
    const int n = 15;
    auto s = testing::random_locations(n, 2, 17);
    auto theta = trivariate_theta(0.02);
    const auto order = order_locations(s, OrderScheme::random(3));
    testing::DenseIox dense(s, theta, trivariate_sigma(), order);
    Eigen::MatrixXd y = sample_y(dense, 9);
    for (int j = 0; j < 3; ++j) {
      std::vector<double> vals, oracle;
      for (double scale : {1.0, 1.6}) {
        auto th = theta;
        th[j].phi *= scale;
        th[j].nu *= scale;
        testing::DenseIox d2(s, th, trivariate_sigma(), order);
        IoxModel model(s, th, trivariate_sigma(), vecchia_opts(n - 1));
        vals.push_back(model.conditional_loglik(j, model.whiten(y)));
        std::vector<int> a, b;
        for (int k = 0; k < 3 * n; ++k) (k / n == j ? a : b).push_back(k);
        Eigen::VectorXd vy = Eigen::Map<Eigen::VectorXd>(y.data(), 3 * n);
        Eigen::VectorXd yb(b.size());
        for (std::size_t k = 0; k < b.size(); ++k) yb(k) = vy(b[k]);
        auto cnd = testing::condition(Eigen::VectorXd::Zero(3 * n), d2.cov_s(), a, b, yb);
        oracle.push_back(testing::mvn_logpdf(y.col(j), cnd.mean, cnd.cov));
      }
      CHECK(std::fabs((vals[1] - vals[0]) - (oracle[1] - oracle[0])) <= 1e-8 * std::max(1.0, std::fabs(oracle[1] - oracle[0])));
      CHECK(testing::rel_err(vals[0], oracle[0]) <= 1e-8);
    }
  }
}

TEST_CASE("averaged cross-covariance") {
  auto s = testing::random_locations(30, 2, 18);
  KernelParams p{10.0, 1.0, 0.0};
  IoxModel same(s, {p, p}, testing::to_correlation(testing::random_spd(2, 3)), vecchia_opts(10));
  auto probe = probe_subset(s, 10);
  // With shared margins the Vecchia marginal variance replaces 1.
  double c00 = same.avg_cross_cov(0, 0, 0, 0, 4, probe);
  CHECK(same.avg_cross_cov(0, 1, 0, 0, 4, probe) == doctest::Approx(same.sigma()(0, 1) * c00).epsilon(1e-10));
  IoxModel exact(s, {p, p}, same.sigma(), exact_opts());
  CHECK(exact.avg_cross_cov(0, 1, 0, 0, 4, probe) == doctest::Approx(same.sigma()(0, 1)).epsilon(1e-10));
  CHECK(std::fabs(same.avg_cross_cov(0, 1, 50.0, 50.0, 6, probe)) < 1e-12);

  IoxModel diff(s, {p, {30.0, 0.5, 0.0}}, same.sigma(), vecchia_opts(10));
  double near = diff.avg_cross_cov(0, 1, 0.01, 0.01, 8, probe);
  double far = diff.avg_cross_cov(0, 1, 0.3, 0.3, 8, probe);
  CHECK(std::fabs(near) > std::fabs(far));
  CHECK(std::fabs(diff.avg_cross_cov(0, 1, 0, 0, 1, probe)) < std::fabs(diff.sigma()(0, 1)));
  auto corr = diff.zero_distance_cross_corr(probe);
  CHECK(corr(0, 0) == doctest::Approx(1.0));
  CHECK(corr(0, 1) == doctest::Approx(corr(1, 0)));
}

TEST_CASE("multivariate Matérn zero-distance correlation") {
  for (double nu : {0.3, 1.0, 2.7}) CHECK(matern_zero_cross_corr(nu, nu, 0.6) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(matern_zero_cross_corr(0.5, 1.2, 0.0) == 0.0);
  // Gamma ratios collapse to 2 sqrt(nu_i nu_j) / (nu_i + nu_j).
  double want = -0.9 * 2.0 * std::sqrt(0.5 * 1.2) / 1.7;
  CHECK(matern_zero_cross_corr(0.5, 1.2, -0.9) == doctest::Approx(want).epsilon(1e-13));
}

TEST_CASE("per-outcome DAGs and sharing") {
  auto s = testing::random_locations(50, 2, 19);
  IoxOptions o = vecchia_opts(5);
  o.outcome_m = {5, 12, 5};
  IoxModel model(s, trivariate_theta(0.01), trivariate_sigma(), o);
  CHECK(model.dag(0) == model.dag(2));
  CHECK(model.dag(0) != model.dag(1));
  CHECK(model.dag(1)->max_parents() == 12);
  CHECK(model.dag(0)->order() == model.dag(1)->order());
  o.outcome_m = {5, 5};
  CHECK_THROWS_AS(IoxModel(s, trivariate_theta(), trivariate_sigma(), o), ValidationError);
}
