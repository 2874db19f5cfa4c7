#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "spiox/inference.hpp"
#include "spiox/ioxcore.hpp"

namespace spiox {

// Test sites with optional predictors (N x p) and optional partly observed
// outcomes (N x q, NaN marks a missing cell; empty means predict everything).
struct PredictionRequest {
  LocationSet t;
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;

  std::size_t size() const { return t.size(); }
  // Outcomes observed at site k (finite cells of row k).
  std::vector<int> observed(std::size_t k) const;
  void validate(std::size_t q, std::size_t p, std::size_t d) const;
};

// What a prediction conditions on: the model (carrying the draw's theta and
// Sigma), the fitted data and the model kind. `noise` adds the latent
// model's measurement error to predictions.
struct PredictContext {
  const IoxModel& model;
  const OutcomeMatrix& data;
  ModelKind kind = ModelKind::Response;
  bool noise = true;
};

// Gaussian predictive law over the listed outcomes at one site.
struct PredictiveMoments {
  std::vector<int> outcomes;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

// Law of y(t) (all q outcomes) given a posterior draw. `xt` has length p.
PredictiveMoments predict_full_moments(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                                       const Eigen::VectorXd& xt);
Eigen::VectorXd predict_full(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                             const Eigen::VectorXd& xt, Rng& rng);

// Law of the missing outcomes at t given the observed ones. `yt` has length
// q with NaN at missing entries; at least one entry must be finite and at
// least one missing. Observed outcomes whose residual variance r_j(t) is
// zero (t a reference site) carry no information beyond the reference data
// and are dropped from the conditioning set.
PredictiveMoments predict_partial_moments(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                                          const Eigen::VectorXd& xt, const Eigen::VectorXd& yt);
Eigen::VectorXd predict_partial(const PredictContext& ctx, const Draw& draw, std::span<const double> t,
                                const Eigen::VectorXd& xt, const Eigen::VectorXd& yt, Rng& rng);

// Model over S carrying the draw's theta and Sigma (factors rebuilt).
IoxModel model_for_draw(const IoxModel& base, const Draw& draw);

// One N x q predictive draw per posterior draw. Observed cells are copied
// through. Draws run in parallel; the random stream of (draw k, site i) is
// fixed by (seed, k, i).
std::vector<Eigen::MatrixXd> predict_request(const IoxModel& base, const OutcomeMatrix& data, ModelKind kind,
                                             const std::vector<Draw>& draws, const PredictionRequest& req,
                                             std::uint64_t seed, bool noise = true);

// Exact draw of Y (n x q) from N(0, C(S)).
Eigen::MatrixXd simulate_prior_reference(const IoxModel& model, Rng& rng);
// Draw at T (disjoint from S): Y at S first, then each site of T
// independently given it. The reference draw is stored in `y_ref` when given.
Eigen::MatrixXd simulate_prior_nonreference(const LocationSet& t, const IoxModel& model, Rng& rng,
                                            Eigen::MatrixXd* y_ref = nullptr);

}  // namespace spiox
