#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace spiox {

using Index = std::int32_t;

// Ordered list of d-dimensional coordinates. Immutable once built; rows are
// checked for finiteness and duplicates at construction.
class LocationSet {
 public:
  LocationSet() = default;
  // coords holds n rows of `dim` values, row-major.
  LocationSet(std::vector<double> coords, std::size_t dim);

  std::size_t size() const { return dim_ == 0 ? 0 : coords_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  bool empty() const { return coords_.empty(); }

  std::span<const double> point(std::size_t i) const {
    return {coords_.data() + i * dim_, dim_};
  }
  const std::vector<double>& data() const { return coords_; }

  LocationSet subset(std::span<const Index> rows) const;

  // FNV-1a digest of the coordinate bytes; identifies a reference set.
  std::uint64_t digest() const;

 private:
  std::vector<double> coords_;
  std::size_t dim_ = 0;
};

double distance(std::span<const double> a, std::span<const double> b);
double squared_distance(std::span<const double> a, std::span<const double> b);

struct OrderScheme {
  enum class Kind { CoordinateSum, Random };
  Kind kind = Kind::Random;
  std::uint64_t seed = 0;

  static OrderScheme coordinate_sum() { return {Kind::CoordinateSum, 0}; }
  static OrderScheme random(std::uint64_t seed) { return {Kind::Random, seed}; }
};

// Permutation of 0..n-1. Coordinate-sum ties keep ascending index.
std::vector<Index> order_locations(const LocationSet& s, const OrderScheme& scheme);

// The k candidates nearest to `query`, by ascending distance then index.
// Brute force; k larger than the candidate count returns every candidate.
std::vector<Index> nearest_neighbors(std::span<const double> query,
                                     const LocationSet& candidates, std::size_t k);

// Exact k-nearest-neighbor search. Uses a kd-tree for d <= 3 and a linear
// scan otherwise. Read-only after construction.
class KdTree {
 public:
  explicit KdTree(const LocationSet& points);

  // `accept` filters candidate indices; rejected points are never returned.
  std::vector<Index> knn(std::span<const double> query, std::size_t k,
                         const std::function<bool(Index)>& accept = {}) const;

  // Index of a stored point within `tol` of query, or -1.
  Index find_coincident(std::span<const double> query, double tol = 1e-14) const;

  const LocationSet& points() const { return points_; }

 private:
  struct Node {
    std::int32_t begin, end;   // range in perm_
    std::int32_t left, right;  // -1 for leaves
    std::int32_t axis;
    double split;
  };
  struct Heap;

  std::int32_t build(std::int32_t begin, std::int32_t end, int depth);
  void search(std::int32_t node, std::span<const double> q, Heap& heap,
              const std::function<bool(Index)>& accept) const;

  LocationSet points_;
  std::vector<Index> perm_;
  std::vector<Node> nodes_;
  bool brute_ = false;
};

// Nearest-neighbor DAG over a location set: each node's parents are its
// min(position, m) nearest predecessors in `order`. Parent lists are sorted
// by DAG position. A children (transposed) index is kept for column access.
class NeighborDag {
 public:
  NeighborDag(std::vector<Index> order, std::vector<std::vector<Index>> parents,
              std::size_t m);

  std::size_t size() const { return order_.size(); }
  std::size_t max_parents() const { return m_; }
  const std::vector<Index>& order() const { return order_; }
  Index position(Index node) const { return position_[node]; }

  std::span<const Index> parents(Index node) const {
    return {parent_idx_.data() + parent_ptr_[node],
            parent_ptr_[node + 1] - parent_ptr_[node]};
  }
  // Offset of node's first parent in the flattened parent array.
  std::size_t parent_offset(Index node) const { return parent_ptr_[node]; }
  std::size_t total_edges() const { return parent_idx_.size(); }

  std::span<const Index> children(Index node) const {
    return {child_idx_.data() + child_ptr_[node], child_ptr_[node + 1] - child_ptr_[node]};
  }
  // For each child c of node, the flat parent-array slot holding edge node -> c.
  std::span<const std::size_t> child_slots(Index node) const {
    return {child_slot_.data() + child_ptr_[node], child_ptr_[node + 1] - child_ptr_[node]};
  }

  // True when every node's parent set is all of its predecessors.
  bool saturated() const;

  // Parents, children and co-parents of node, sorted ascending, node excluded.
  std::vector<Index> markov_blanket(Index node) const;

 private:
  std::vector<Index> order_;
  std::vector<Index> position_;
  std::vector<std::size_t> parent_ptr_;
  std::vector<Index> parent_idx_;
  std::vector<std::size_t> child_ptr_;
  std::vector<Index> child_idx_;
  std::vector<std::size_t> child_slot_;
  std::size_t m_;
};

NeighborDag build_nn_dag(const LocationSet& s, std::size_t m, const OrderScheme& scheme);
NeighborDag build_nn_dag(const LocationSet& s, std::size_t m, std::vector<Index> order);

}  // namespace spiox
