#include "spiox/predict.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "spiox/error.hpp"
#include "spiox/parallel.hpp"

namespace spiox {

namespace {

Eigen::MatrixXd reference_field(const PredictContext& ctx, const Draw& draw) {
  if (ctx.kind == ModelKind::Latent) {
    if (draw.W.rows() != static_cast<Eigen::Index>(ctx.model.n()))
      throw ValidationError("latent prediction needs the draw's latent field w");
    return draw.W;
  }
  if (ctx.data.p() == 0) return ctx.data.y;
  return ctx.data.y - ctx.data.x * draw.B;
}

void check_draw(const PredictContext& ctx, const Draw& draw, const Eigen::VectorXd& xt) {
  const auto q = static_cast<Eigen::Index>(ctx.model.q());
  const auto p = static_cast<Eigen::Index>(ctx.data.p());
  if (draw.Sigma.rows() != q || draw.Sigma.cols() != q) throw ValidationError("draw Sigma has the wrong shape");
  if (p > 0 && (draw.B.rows() != p || draw.B.cols() != q)) throw ValidationError("draw B has the wrong shape");
  if (xt.size() != p)
    throw ValidationError("test predictors have length " + std::to_string(xt.size()) + ", expected " +
                          std::to_string(p));
  if (ctx.kind == ModelKind::Latent && draw.delta.size() != q)
    throw ValidationError("latent prediction needs the draw's noise variances");
}

struct SiteLaw {
  Eigen::VectorXd mean;  // x(t)^T B + H(t) field
  Eigen::VectorXd r;     // r_j(t)
};

SiteLaw site_law(const PredictContext& ctx, const Draw& draw, std::span<const double> t, const Eigen::VectorXd& xt) {
  check_draw(ctx, draw, xt);
  const Eigen::MatrixXd f = reference_field(ctx, draw);
  const std::size_t q = ctx.model.q();
  SiteLaw law;
  law.mean.resize(static_cast<Eigen::Index>(q));
  law.r.resize(static_cast<Eigen::Index>(q));
  for (std::size_t j = 0; j < q; ++j) {
    const Projection h = ctx.model.h_and_r(t, j);
    double m = 0.0;
    for (std::size_t k = 0; k < h.idx.size(); ++k) m += h.w[k] * f(h.idx[k], static_cast<Eigen::Index>(j));
    if (xt.size() > 0) m += xt.dot(draw.B.col(static_cast<Eigen::Index>(j)));
    law.mean(static_cast<Eigen::Index>(j)) = m;
    law.r(static_cast<Eigen::Index>(j)) = std::max(0.0, h.r);
  }
  return law;
}

Eigen::MatrixXd residual_cov(const SiteLaw& law, const Eigen::MatrixXd& sigma) {
  Eigen::VectorXd d = law.r.cwiseSqrt();
  return d.asDiagonal() * sigma * d.asDiagonal();
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& a, const std::vector<int>& rows, const std::vector<int>& cols) {
  Eigen::MatrixXd out(rows.size(), cols.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = a(rows[i], cols[j]);
  return out;
}

Eigen::VectorXd gather(const Eigen::VectorXd& a, const std::vector<int>& idx) {
  Eigen::VectorXd out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out(i) = a(idx[i]);
  return out;
}

}  // namespace

std::vector<int> PredictionRequest::observed(std::size_t k) const {
  std::vector<int> o;
  if (y.size() == 0) return o;
  for (Eigen::Index j = 0; j < y.cols(); ++j)
    if (std::isfinite(y(static_cast<Eigen::Index>(k), j))) o.push_back(static_cast<int>(j));
  return o;
}

void PredictionRequest::validate(std::size_t q, std::size_t p, std::size_t d) const {
  const auto n = static_cast<Eigen::Index>(t.size());
  if (t.size() > 0 && t.dim() != d)
    throw ValidationError("test sites have dimension " + std::to_string(t.dim()) + ", expected " + std::to_string(d));
  if (p > 0 && (x.rows() != n || x.cols() != static_cast<Eigen::Index>(p)))
    throw ValidationError("test predictors must be " + std::to_string(n) + " x " + std::to_string(p));
  if (y.size() > 0 && (y.rows() != n || y.cols() != static_cast<Eigen::Index>(q)))
    throw ValidationError("test outcomes must be " + std::to_string(n) + " x " + std::to_string(q));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (!std::isfinite(x(i, j)))
        throw ValidationError("non-finite test predictor at row " + std::to_string(i) + ", column " +
                              std::to_string(j));
}

PredictiveMoments predict_full_moments(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                                       const Eigen::VectorXd& xt) {
  const SiteLaw law = site_law(ctx, draw, t, xt);
  PredictiveMoments pm;
  for (std::size_t j = 0; j < ctx.model.q(); ++j) pm.outcomes.push_back(static_cast<int>(j));
  pm.mean = law.mean;
  pm.cov = residual_cov(law, draw.Sigma);
  if (ctx.kind == ModelKind::Latent && ctx.noise) pm.cov.diagonal() += draw.delta;
  return pm;
}

Eigen::VectorXd predict_full(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                             const Eigen::VectorXd& xt, Rng& rng) {
  const PredictiveMoments pm = predict_full_moments(ctx, draw, t, xt);
  return draw_mvn_cov(pm.mean, pm.cov, rng);
}

PredictiveMoments predict_partial_moments(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                                          const Eigen::VectorXd& xt, const Eigen::VectorXd& yt) {
  const auto q = static_cast<Eigen::Index>(ctx.model.q());
  if (yt.size() != q) throw ValidationError("observed outcome vector must have length q");
  std::vector<int> obs, mis;
  for (Eigen::Index j = 0; j < q; ++j) (std::isfinite(yt(j)) ? obs : mis).push_back(static_cast<int>(j));
  if (obs.empty()) throw ValidationError("partial prediction needs at least one observed outcome");
  if (mis.empty()) throw ValidationError("partial prediction needs at least one missing outcome");

  const SiteLaw law = site_law(ctx, draw, t, xt);
  const bool latent = ctx.kind == ModelKind::Latent;
  PredictiveMoments pm;
  pm.outcomes = mis;
  const Eigen::VectorXd mean_m = gather(law.mean, mis);

  bool all_positive = true;
  for (int j : obs) all_positive = all_positive && law.r(j) > 0.0;

  if (!latent && all_positive) {
    // Precision form: H_{m|o} = -D_m Q_mm^-1 Q_mo D_o^-1, cov D_m Q_mm^-1 D_m.
    const Eigen::MatrixXd qs = spd_inverse(draw.Sigma, "Sigma");
    Eigen::LLT<Eigen::MatrixXd> qmm(gather(qs, mis, mis));
    const Eigen::MatrixXd qmo = gather(qs, mis, obs);
    const Eigen::VectorXd dm = gather(law.r, mis).cwiseSqrt();
    const Eigen::VectorXd dinv_o = gather(law.r, obs).cwiseSqrt().cwiseInverse();
    const Eigen::VectorXd e = (gather(yt, obs) - gather(law.mean, obs)).cwiseProduct(dinv_o);
    pm.mean = mean_m - dm.asDiagonal() * qmm.solve(qmo * e);
    pm.cov = dm.asDiagonal() * qmm.solve(Eigen::MatrixXd(dm.asDiagonal()));
    return pm;
  }

  // Joint Gaussian conditioning of the site residuals. Observed outcomes
  // with zero residual variance are fixed by the reference data and drop out.
  Eigen::MatrixXd k = residual_cov(law, draw.Sigma);
  if (latent) {
    for (int j : obs) k(j, j) += draw.delta(j);
    if (ctx.noise)
      for (int j : mis) k(j, j) += draw.delta(j);
  }
  std::vector<int> use;
  for (int j : obs)
    if (k(j, j) > 0.0) use.push_back(j);
  pm.mean = mean_m;
  pm.cov = gather(k, mis, mis);
  if (!use.empty()) {
    Eigen::LDLT<Eigen::MatrixXd> koo(gather(k, use, use));
    const Eigen::MatrixXd kmo = gather(k, mis, use);
    pm.mean += kmo * koo.solve(gather(yt, use) - gather(law.mean, use));
    pm.cov -= kmo * koo.solve(kmo.transpose());
  }
  pm.cov = 0.5 * (pm.cov + pm.cov.transpose());
  return pm;
}

Eigen::VectorXd predict_partial(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                                const Eigen::VectorXd& xt, const Eigen::VectorXd& yt, Rng& rng) {
  const PredictiveMoments pm = predict_partial_moments(ctx, draw, t, xt, yt);
  return draw_mvn_cov(pm.mean, pm.cov, rng);
}

IoxModel model_for_draw(const IoxModel& base, const Draw& draw) {
  IoxModel m = base;
  m.set_sigma(draw.Sigma);
  if (draw.theta.size() != base.q()) throw ValidationError("draw has the wrong number of kernel parameter sets");
  for (std::size_t j = 0; j < base.q(); ++j)
    if (!(draw.theta[j] == base.theta(j))) m.set_theta(j, draw.theta[j]);
  return m;
}

std::vector<Eigen::MatrixXd> predict_request(const IoxModel& base, const OutcomeMatrix& data, ModelKind kind,
                                             const std::vector<Draw>& draws, const PredictionRequest& req,
                                             std::uint64_t seed, bool noise) {
  const std::size_t q = base.q(), p = data.p();
  req.validate(q, p, base.locations().dim());
  const auto N = static_cast<Eigen::Index>(req.size());
  std::vector<Eigen::MatrixXd> out(draws.size(), Eigen::MatrixXd(N, static_cast<Eigen::Index>(q)));
  parallel_for(
      0, draws.size(),
      [&](std::size_t k) {
        const IoxModel model = model_for_draw(base, draws[k]);
        const PredictContext ctx{model, data, kind, noise};
        for (Eigen::Index i = 0; i < N; ++i) {
          std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                            static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(i)};
          Rng rng(seq);
          const auto t = req.t.point(static_cast<std::size_t>(i));
          const Eigen::VectorXd xt = p > 0 ? Eigen::VectorXd(req.x.row(i).transpose()) : Eigen::VectorXd();
          const auto obs = req.observed(static_cast<std::size_t>(i));
          if (obs.empty()) {
            out[k].row(i) = predict_full(ctx, draws[k], t, xt, rng).transpose();
          } else if (obs.size() == q) {
            out[k].row(i) = req.y.row(i);
          } else {
            const Eigen::VectorXd yt = req.y.row(i).transpose();
            const PredictiveMoments pm = predict_partial_moments(ctx, draws[k], t, xt, yt);
            const Eigen::VectorXd z = draw_mvn_cov(pm.mean, pm.cov, rng);
            out[k].row(i) = req.y.row(i);
            for (std::size_t a = 0; a < pm.outcomes.size(); ++a) out[k](i, pm.outcomes[a]) = z(static_cast<Eigen::Index>(a));
          }
        }
      },
      1);
  return out;
}

Eigen::MatrixXd simulate_prior_reference(const IoxModel& model, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(model.n());
  const auto q = static_cast<Eigen::Index>(model.q());
  Eigen::LLT<Eigen::MatrixXd> llt(model.sigma());
  const Eigen::MatrixXd v = draw_normal(n, q, rng) * llt.matrixL().transpose();
  Eigen::MatrixXd y(n, q);
  for (Eigen::Index j = 0; j < q; ++j) y.col(j) = model.factor(static_cast<std::size_t>(j)).unwhiten(Eigen::VectorXd(v.col(j)));
  return y;
}

Eigen::MatrixXd simulate_prior_nonreference(const LocationSet& t, const IoxModel& model, Rng& rng,
                                            Eigen::MatrixXd* y_ref) {
  if (t.size() > 0 && t.dim() != model.locations().dim()) throw ValidationError("test sites have the wrong dimension");
  for (std::size_t i = 0; i < t.size(); ++i)
    if (model.tree().find_coincident(t.point(i), kZeroDistance) >= 0)
      throw ValidationError("site " + std::to_string(i) +
                            " coincides with a reference site; simulate at the reference set instead");
  const Eigen::MatrixXd ys = simulate_prior_reference(model, rng);
  const auto q = static_cast<Eigen::Index>(model.q());
  const Eigen::MatrixXd lower = Eigen::LLT<Eigen::MatrixXd>(model.sigma()).matrixL();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(t.size()), q);
  for (std::size_t i = 0; i < t.size(); ++i) {
    Eigen::VectorXd mean(q), d(q);
    for (Eigen::Index j = 0; j < q; ++j) {
      const Projection h = model.h_and_r(t.point(i), static_cast<std::size_t>(j));
      double m = 0.0;
      for (std::size_t k = 0; k < h.idx.size(); ++k) m += h.w[k] * ys(h.idx[k], j);
      mean(j) = m;
      d(j) = std::sqrt(std::max(0.0, h.r));
    }
    const Eigen::VectorXd z = draw_normal(q, rng);
    out.row(static_cast<Eigen::Index>(i)) = (mean + d.cwiseProduct(lower * z)).transpose();
  }
  if (y_ref) *y_ref = ys;
  return out;
}

}  // namespace spiox
