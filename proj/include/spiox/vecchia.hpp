#pragma once

#include <Eigen/Dense>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "spiox/geom.hpp"
#include "spiox/kernels.hpp"

namespace spiox {

// Distances needed to build every row of a factor over a fixed DAG: for each
// node, the packed lower triangle of its parent block and the node-to-parent
// distances. Shared by all rebuilds that reuse the same DAG.
class DagGeometry {
 public:
  DagGeometry(const LocationSet& s, std::shared_ptr<const NeighborDag> dag);

  const NeighborDag& dag() const { return *dag_; }
  const std::shared_ptr<const NeighborDag>& dag_ptr() const { return dag_; }
  // Distances from node to each of its parents, aligned with dag().parents(node).
  std::span<const double> to_parents(Index node) const;
  // Row-major strict lower triangle of parent-to-parent distances.
  std::span<const double> among_parents(Index node) const;

 private:
  std::shared_ptr<const NeighborDag> dag_;
  std::vector<double> to_parents_;
  std::vector<std::size_t> block_ptr_;
  std::vector<double> blocks_;
};

// Sparse inverse Cholesky factor Gamma = L^-1 over a NeighborDag. Row i holds
// 1/sqrt(r_i) on the diagonal and -h_i/sqrt(r_i) at the parent columns. Rows
// and columns are indexed by node id; the matrix is lower triangular in DAG
// order.
class SparseInvChol {
 public:
  SparseInvChol(std::shared_ptr<const NeighborDag> dag, std::vector<double> diag,
                std::vector<double> offdiag);

  std::size_t size() const { return diag_.size(); }
  const NeighborDag& dag() const { return *dag_; }
  const std::shared_ptr<const NeighborDag>& dag_ptr() const { return dag_; }

  double diag(Index i) const { return diag_[i]; }
  // Values at dag().parents(i), same order.
  std::span<const double> offdiag(Index i) const {
    return {off_.data() + dag_->parent_offset(i), dag_->parents(i).size()};
  }
  // Entry at the flattened parent slot (see NeighborDag::child_slots).
  double slot_value(std::size_t slot) const { return off_[slot]; }

  std::size_t nonzeros() const { return diag_.size() + off_.size(); }

  // sum_i log Gamma[i,i]; equals -1/2 log det of the implied covariance.
  double log_diag_sum() const;

  // All span-based operations require distinct input and output buffers.
  void whiten(std::span<const double> y, std::span<double> v) const;    // v = Gamma y
  void unwhiten(std::span<const double> v, std::span<double> y) const;  // Gamma y = v
  void apply_transpose(std::span<const double> v, std::span<double> z) const;  // z = Gamma^T v
  void solve_transpose(std::span<const double> b, std::span<double> x) const;  // Gamma^T x = b

  Eigen::VectorXd whiten(const Eigen::VectorXd& y) const;
  Eigen::VectorXd unwhiten(const Eigen::VectorXd& v) const;
  Eigen::VectorXd apply_transpose(const Eigen::VectorXd& v) const;
  Eigen::VectorXd solve_transpose(const Eigen::VectorXd& b) const;

  Eigen::MatrixXd to_dense() const;

  // Largest diagonal jitter that any row needed (0 when none).
  double jitter() const { return jitter_; }
  void set_jitter(double j) { jitter_ = j; }

 private:
  std::shared_ptr<const NeighborDag> dag_;
  std::vector<double> diag_;
  std::vector<double> off_;
  double jitter_ = 0.0;
};

SparseInvChol build_sparse_inv_chol(const DagGeometry& geo, const KernelParams& p);
SparseInvChol build_sparse_inv_chol(std::shared_ptr<const NeighborDag> dag, const LocationSet& s,
                                    const KernelParams& p);

inline constexpr std::size_t kDefaultDenseCap = 4000;

struct DenseFactor {
  Eigen::MatrixXd L;     // lower Cholesky factor of rho(S)
  Eigen::MatrixXd Linv;  // its inverse
  double jitter = 0.0;
};

// Dense factor of rho(S) in the row order of S, or in `order` when given
// (row k of the result then corresponds to node order[k]).
DenseFactor dense_chol_factor(const LocationSet& s, const KernelParams& p,
                              std::size_t cap = kDefaultDenseCap,
                              const std::vector<Index>* order = nullptr);

// Exact factor expressed over the saturated DAG with the given ordering;
// obtained from a dense Cholesky factorization rather than per-row solves.
SparseInvChol exact_sparse_inv_chol(const LocationSet& s, std::shared_ptr<const NeighborDag> dag,
                                    const KernelParams& p, std::size_t cap = kDefaultDenseCap);

}  // namespace spiox
