#include "spiox/vecchia.hpp"

#include <cmath>
#include <string>

#include "spiox/error.hpp"
#include "spiox/parallel.hpp"

namespace spiox {

namespace {
constexpr double kJitter0 = 1e-10;
constexpr int kJitterRetries = 3;

double jitter_at(int attempt) { return attempt == 0 ? 0.0 : kJitter0 * std::pow(10.0, attempt - 1); }
}  // namespace

DagGeometry::DagGeometry(const LocationSet& s, std::shared_ptr<const NeighborDag> dag)
    : dag_(std::move(dag)) {
  const std::size_t n = dag_->size();
  if (s.size() != n) throw ValidationError("dag geometry: location count does not match DAG");
  to_parents_.resize(dag_->total_edges());
  block_ptr_.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t k = dag_->parents(static_cast<Index>(i)).size();
    block_ptr_[i + 1] = block_ptr_[i] + k * (k - (k > 0)) / 2;
  }
  blocks_.resize(block_ptr_[n]);
  for (std::size_t i = 0; i < n; ++i) {
    const auto node = static_cast<Index>(i);
    auto pa = dag_->parents(node);
    double* tp = to_parents_.data() + dag_->parent_offset(node);
    double* bl = blocks_.data() + block_ptr_[i];
    for (std::size_t a = 0; a < pa.size(); ++a) {
      tp[a] = distance(s.point(i), s.point(pa[a]));
      for (std::size_t b = 0; b < a; ++b) *bl++ = distance(s.point(pa[a]), s.point(pa[b]));
    }
  }
}

std::span<const double> DagGeometry::to_parents(Index node) const {
  return {to_parents_.data() + dag_->parent_offset(node), dag_->parents(node).size()};
}

std::span<const double> DagGeometry::among_parents(Index node) const {
  return {blocks_.data() + block_ptr_[node], block_ptr_[node + 1] - block_ptr_[node]};
}

SparseInvChol::SparseInvChol(std::shared_ptr<const NeighborDag> dag, std::vector<double> diag,
                             std::vector<double> offdiag)
    : dag_(std::move(dag)), diag_(std::move(diag)), off_(std::move(offdiag)) {
  if (diag_.size() != dag_->size() || off_.size() != dag_->total_edges())
    throw ValidationError("sparse factor: storage does not match DAG");
}

double SparseInvChol::log_diag_sum() const {
  double s = 0.0;
  for (double d : diag_) s += std::log(d);
  return s;
}

void SparseInvChol::whiten(std::span<const double> y, std::span<double> v) const {
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto node = static_cast<Index>(i);
    auto pa = dag_->parents(node);
    const double* h = off_.data() + dag_->parent_offset(node);
    double acc = diag_[i] * y[i];
    for (std::size_t a = 0; a < pa.size(); ++a) acc += h[a] * y[pa[a]];
    v[i] = acc;
  }
}

void SparseInvChol::unwhiten(std::span<const double> v, std::span<double> y) const {
  for (Index node : dag_->order()) {
    auto pa = dag_->parents(node);
    const double* h = off_.data() + dag_->parent_offset(node);
    double acc = v[node];
    for (std::size_t a = 0; a < pa.size(); ++a) acc -= h[a] * y[pa[a]];
    y[node] = acc / diag_[node];
  }
}

void SparseInvChol::apply_transpose(std::span<const double> v, std::span<double> z) const {
  const std::size_t n = size();
  for (std::size_t i = 0; i < n; ++i) z[i] = diag_[i] * v[i];
  for (std::size_t i = 0; i < n; ++i) {
    const auto node = static_cast<Index>(i);
    auto pa = dag_->parents(node);
    const double* h = off_.data() + dag_->parent_offset(node);
    for (std::size_t a = 0; a < pa.size(); ++a) z[pa[a]] += h[a] * v[i];
  }
}

void SparseInvChol::solve_transpose(std::span<const double> b, std::span<double> x) const {
  std::copy(b.begin(), b.end(), x.begin());
  const auto& ord = dag_->order();
  for (auto it = ord.rbegin(); it != ord.rend(); ++it) {
    const Index node = *it;
    x[node] /= diag_[node];
    auto pa = dag_->parents(node);
    const double* h = off_.data() + dag_->parent_offset(node);
    for (std::size_t a = 0; a < pa.size(); ++a) x[pa[a]] -= h[a] * x[node];
  }
}

namespace {
std::span<const double> cspan(const Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<double> mspan(Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

void check_len(const Eigen::VectorXd& v, std::size_t n) {
  if (static_cast<std::size_t>(v.size()) != n)
    throw ValidationError("sparse factor: vector length " + std::to_string(v.size()) +
                          " does not match dimension " + std::to_string(n));
}
}  // namespace

Eigen::VectorXd SparseInvChol::whiten(const Eigen::VectorXd& y) const {
  check_len(y, size());
  Eigen::VectorXd v(y.size());
  whiten(cspan(y), mspan(v));
  return v;
}

Eigen::VectorXd SparseInvChol::unwhiten(const Eigen::VectorXd& v) const {
  check_len(v, size());
  Eigen::VectorXd y(v.size());
  unwhiten(cspan(v), mspan(y));
  return y;
}

Eigen::VectorXd SparseInvChol::apply_transpose(const Eigen::VectorXd& v) const {
  check_len(v, size());
  Eigen::VectorXd z(v.size());
  apply_transpose(cspan(v), mspan(z));
  return z;
}

Eigen::VectorXd SparseInvChol::solve_transpose(const Eigen::VectorXd& b) const {
  check_len(b, size());
  Eigen::VectorXd x(b.size());
  solve_transpose(cspan(b), mspan(x));
  return x;
}

Eigen::MatrixXd SparseInvChol::to_dense() const {
  const auto n = static_cast<Eigen::Index>(size());
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto node = static_cast<Index>(i);
    g(i, i) = diag_[i];
    auto pa = dag_->parents(node);
    auto h = offdiag(node);
    for (std::size_t a = 0; a < pa.size(); ++a) g(i, pa[a]) = h[a];
  }
  return g;
}

SparseInvChol build_sparse_inv_chol(const DagGeometry& geo, const KernelParams& p) {
  const Matern kern(p);
  const NeighborDag& dag = geo.dag();
  const std::size_t n = dag.size();
  const double c0 = 1.0 + p.tau2;
  std::vector<double> diag(n), off(dag.total_edges());
  std::vector<double> jit(n, 0.0);

  parallel_for(0, n, [&](std::size_t i) {
    const auto node = static_cast<Index>(i);
    const std::size_t k = dag.parents(node).size();
    if (k == 0) {
      diag[i] = 1.0 / std::sqrt(c0);
      return;
    }
    thread_local Eigen::MatrixXd K;
    thread_local Eigen::VectorXd c, h;
    thread_local Eigen::LLT<Eigen::MatrixXd> llt;
    const auto kk = static_cast<Eigen::Index>(k);
    K.resize(kk, kk);
    c.resize(kk);
    auto tp = geo.to_parents(node);
    auto bl = geo.among_parents(node);
    std::size_t t = 0;
    for (Eigen::Index a = 0; a < kk; ++a) {
      c(a) = kern(tp[a]);
      for (Eigen::Index b = 0; b < a; ++b) K(a, b) = kern(bl[t++]);
    }
    for (int attempt = 0; attempt <= kJitterRetries; ++attempt) {
      const double j = jitter_at(attempt);
      for (Eigen::Index a = 0; a < kk; ++a) K(a, a) = c0 + j;
      llt.compute(K);
      if (llt.info() != Eigen::Success) continue;
      h = llt.solve(c);
      const double r = c0 - c.dot(h);
      if (!(r > 0.0) || !std::isfinite(r)) continue;
      const double d = 1.0 / std::sqrt(r);
      diag[i] = d;
      double* o = off.data() + dag.parent_offset(node);
      for (Eigen::Index a = 0; a < kk; ++a) o[a] = -h(a) * d;
      jit[i] = j;
      return;
    }
    throw NumericalError("sparse factor: row for location " + std::to_string(i) +
                         " is singular after jitter retries (phi=" + std::to_string(p.phi) +
                         ", nu=" + std::to_string(p.nu) + ", tau2=" + std::to_string(p.tau2) + ")");
  });

  SparseInvChol g(geo.dag_ptr(), std::move(diag), std::move(off));
  double jmax = 0.0;
  for (double j : jit) jmax = std::max(jmax, j);
  g.set_jitter(jmax);
  return g;
}

SparseInvChol build_sparse_inv_chol(std::shared_ptr<const NeighborDag> dag, const LocationSet& s,
                                    const KernelParams& p) {
  DagGeometry geo(s, std::move(dag));
  return build_sparse_inv_chol(geo, p);
}

DenseFactor dense_chol_factor(const LocationSet& s, const KernelParams& p, std::size_t cap,
                              const std::vector<Index>* order) {
  const std::size_t n = s.size();
  if (n > cap)
    throw ValidationError("dense factor: n=" + std::to_string(n) + " exceeds the dense cap " +
                          std::to_string(cap));
  Eigen::MatrixXd r;
  if (order) {
    if (order->size() != n) throw ValidationError("dense factor: order length mismatch");
    r = corr_matrix(s.subset(*order), p);
  } else {
    r = corr_matrix(s, p);
  }
  const auto nn = static_cast<Eigen::Index>(n);
  for (int attempt = 0; attempt <= kJitterRetries; ++attempt) {
    const double j = jitter_at(attempt);
    Eigen::MatrixXd a = r;
    a.diagonal().array() += j;
    Eigen::LLT<Eigen::MatrixXd> llt(a);
    if (llt.info() != Eigen::Success) continue;
    DenseFactor f;
    f.L = llt.matrixL();
    if (!(f.L.diagonal().array() > 0.0).all()) continue;
    f.Linv = f.L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(nn, nn));
    f.jitter = j;
    return f;
  }
  throw NumericalError("dense factor: Cholesky failed after jitter retries (phi=" +
                       std::to_string(p.phi) + ", nu=" + std::to_string(p.nu) +
                       ", tau2=" + std::to_string(p.tau2) + ")");
}

SparseInvChol exact_sparse_inv_chol(const LocationSet& s, std::shared_ptr<const NeighborDag> dag,
                                    const KernelParams& p, std::size_t cap) {
  if (!dag->saturated()) throw ValidationError("exact factor requires a saturated DAG");
  const auto& ord = dag->order();
  DenseFactor f = dense_chol_factor(s, p, cap, &ord);
  const std::size_t n = s.size();
  std::vector<double> diag(n), off(dag->total_edges());
  for (std::size_t k = 0; k < n; ++k) {
    const Index node = ord[k];
    diag[node] = f.Linv(k, k);
    // Parents of a saturated node are all predecessors, sorted by position.
    double* o = off.data() + dag->parent_offset(node);
    for (std::size_t a = 0; a < k; ++a) o[a] = f.Linv(k, a);
  }
  SparseInvChol g(std::move(dag), std::move(diag), std::move(off));
  g.set_jitter(f.jitter);
  return g;
}

}  // namespace spiox
