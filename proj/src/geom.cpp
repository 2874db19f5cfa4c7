#include "spiox/geom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <string>

#include "spiox/error.hpp"

namespace spiox {

LocationSet::LocationSet(std::vector<double> coords, std::size_t dim)
    : coords_(std::move(coords)), dim_(dim) {
  if (dim_ == 0) throw ValidationError("location set: dimension must be positive");
  if (coords_.empty()) throw ValidationError("location set: at least one location required");
  if (coords_.size() % dim_ != 0)
    throw ValidationError("location set: coordinate count not a multiple of dimension");
  const std::size_t n = size();
  for (std::size_t i = 0; i < coords_.size(); ++i) {
    if (!std::isfinite(coords_[i]))
      throw ValidationError("location set: non-finite coordinate at row " +
                            std::to_string(i / dim_));
  }
  // Duplicate rows: sort row indices lexicographically, compare neighbors.
  std::vector<Index> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto less = [&](Index a, Index b) {
    return std::lexicographical_compare(coords_.begin() + a * dim_, coords_.begin() + (a + 1) * dim_,
                                        coords_.begin() + b * dim_, coords_.begin() + (b + 1) * dim_);
  };
  std::sort(idx.begin(), idx.end(), less);
  for (std::size_t k = 1; k < n; ++k) {
    if (std::equal(coords_.begin() + idx[k - 1] * dim_, coords_.begin() + (idx[k - 1] + 1) * dim_,
                   coords_.begin() + idx[k] * dim_)) {
      Index a = std::min(idx[k - 1], idx[k]), b = std::max(idx[k - 1], idx[k]);
      throw ValidationError("location set: duplicate coordinates at rows " + std::to_string(a) +
                            " and " + std::to_string(b));
    }
  }
}

LocationSet LocationSet::subset(std::span<const Index> rows) const {
  std::vector<double> out;
  out.reserve(rows.size() * dim_);
  for (Index r : rows) {
    auto p = point(r);
    out.insert(out.end(), p.begin(), p.end());
  }
  return LocationSet(std::move(out), dim_);
}

std::uint64_t LocationSet::digest() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const unsigned char* p, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  std::uint64_t d = dim_;
  mix(reinterpret_cast<const unsigned char*>(&d), sizeof d);
  mix(reinterpret_cast<const unsigned char*>(coords_.data()), coords_.size() * sizeof(double));
  return h;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

double distance(std::span<const double> a, std::span<const double> b) {
  return std::sqrt(squared_distance(a, b));
}

std::vector<Index> order_locations(const LocationSet& s, const OrderScheme& scheme) {
  const std::size_t n = s.size();
  std::vector<Index> ord(n);
  std::iota(ord.begin(), ord.end(), 0);
  if (scheme.kind == OrderScheme::Kind::CoordinateSum) {
    std::vector<double> key(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto p = s.point(i);
      key[i] = std::accumulate(p.begin(), p.end(), 0.0);
    }
    std::stable_sort(ord.begin(), ord.end(), [&](Index a, Index b) { return key[a] < key[b]; });
  } else {
    // Fisher-Yates driven directly by the engine so the permutation does not
    // depend on the standard library's distribution implementation.
    std::mt19937_64 eng(scheme.seed);
    for (std::size_t i = n; i > 1; --i) {
      std::uint64_t j = eng() % i;
      std::swap(ord[i - 1], ord[j]);
    }
  }
  return ord;
}

std::vector<Index> nearest_neighbors(std::span<const double> query, const LocationSet& candidates,
                                     std::size_t k) {
  const std::size_t n = candidates.size();
  k = std::min(k, n);
  if (k == 0) return {};
  std::vector<std::pair<double, Index>> d(n);
  for (std::size_t i = 0; i < n; ++i)
    d[i] = {squared_distance(query, candidates.point(i)), static_cast<Index>(i)};
  std::partial_sort(d.begin(), d.begin() + k, d.end());
  std::vector<Index> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

// Bounded max-heap on (squared distance, index); the top is the current worst.
struct KdTree::Heap {
  std::size_t k;
  std::vector<std::pair<double, Index>> items;

  bool full() const { return items.size() >= k; }
  double worst() const { return items.front().first; }
  void offer(double d2, Index i) {
    std::pair<double, Index> c{d2, i};
    if (!full()) {
      items.push_back(c);
      std::push_heap(items.begin(), items.end());
    } else if (c < items.front()) {
      std::pop_heap(items.begin(), items.end());
      items.back() = c;
      std::push_heap(items.begin(), items.end());
    }
  }
};

namespace {
constexpr std::int32_t kLeafSize = 12;
}

KdTree::KdTree(const LocationSet& points) : points_(points) {
  const auto n = static_cast<std::int32_t>(points_.size());
  perm_.resize(n);
  std::iota(perm_.begin(), perm_.end(), 0);
  brute_ = points_.dim() > 3;
  if (brute_) {
    nodes_.push_back({0, n, -1, -1, 0, 0.0});
  } else {
    nodes_.reserve(2 * (n / kLeafSize + 1));
    build(0, n, 0);
  }
}

std::int32_t KdTree::build(std::int32_t begin, std::int32_t end, int depth) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({begin, end, -1, -1, 0, 0.0});
  if (end - begin <= kLeafSize) return id;
  const std::size_t dim = points_.dim();
  // Split on the axis of largest spread.
  int axis = 0;
  double best = -1.0;
  for (std::size_t a = 0; a < dim; ++a) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::int32_t p = begin; p < end; ++p) {
      double v = points_.point(perm_[p])[a];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (hi - lo > best) {
      best = hi - lo;
      axis = static_cast<int>(a);
    }
  }
  (void)depth;
  std::int32_t mid = begin + (end - begin) / 2;
  std::nth_element(perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
                   [&](Index a, Index b) { return points_.point(a)[axis] < points_.point(b)[axis]; });
  double split = points_.point(perm_[mid])[axis];
  std::int32_t l = build(begin, mid, depth + 1);
  std::int32_t r = build(mid, end, depth + 1);
  nodes_[id].left = l;
  nodes_[id].right = r;
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  return id;
}

void KdTree::search(std::int32_t node, std::span<const double> q, Heap& heap,
                    const std::function<bool(Index)>& accept) const {
  const Node& nd = nodes_[node];
  if (nd.left < 0) {
    for (std::int32_t p = nd.begin; p < nd.end; ++p) {
      Index i = perm_[p];
      if (accept && !accept(i)) continue;
      heap.offer(squared_distance(q, points_.point(i)), i);
    }
    return;
  }
  double diff = q[nd.axis] - nd.split;
  std::int32_t near = diff < 0 ? nd.left : nd.right;
  std::int32_t far = diff < 0 ? nd.right : nd.left;
  search(near, q, heap, accept);
  // Equal-distance candidates on the far side must still be visited so the
  // index tie-break stays exact.
  if (!heap.full() || diff * diff <= heap.worst()) search(far, q, heap, accept);
}

std::vector<Index> KdTree::knn(std::span<const double> query, std::size_t k,
                               const std::function<bool(Index)>& accept) const {
  if (k == 0) return {};
  Heap heap{k, {}};
  heap.items.reserve(k + 1);
  search(0, query, heap, accept);
  std::sort(heap.items.begin(), heap.items.end());
  std::vector<Index> out(heap.items.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = heap.items[i].second;
  return out;
}

Index KdTree::find_coincident(std::span<const double> query, double tol) const {
  auto nn = knn(query, 1);
  if (nn.empty()) return -1;
  return distance(query, points_.point(nn[0])) < tol ? nn[0] : -1;
}

NeighborDag::NeighborDag(std::vector<Index> order, std::vector<std::vector<Index>> parents,
                         std::size_t m)
    : order_(std::move(order)), m_(m) {
  const std::size_t n = order_.size();
  if (parents.size() != n) throw ValidationError("dag: parent list count does not match order");
  position_.assign(n, -1);
  for (std::size_t k = 0; k < n; ++k) {
    Index v = order_[k];
    if (v < 0 || static_cast<std::size_t>(v) >= n || position_[v] >= 0)
      throw ValidationError("dag: order is not a permutation");
    position_[v] = static_cast<Index>(k);
  }
  parent_ptr_.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto& pa = parents[i];
    if (pa.size() > m_) throw ValidationError("dag: node " + std::to_string(i) + " exceeds m parents");
    std::sort(pa.begin(), pa.end(), [&](Index a, Index b) { return position_[a] < position_[b]; });
    for (std::size_t t = 0; t < pa.size(); ++t) {
      if (pa[t] < 0 || static_cast<std::size_t>(pa[t]) >= n ||
          position_[pa[t]] >= position_[i] || (t > 0 && pa[t] == pa[t - 1]))
        throw ValidationError("dag: node " + std::to_string(i) + " has an invalid parent");
    }
    parent_ptr_[i + 1] = parent_ptr_[i] + pa.size();
  }
  parent_idx_.reserve(parent_ptr_[n]);
  for (auto& pa : parents) parent_idx_.insert(parent_idx_.end(), pa.begin(), pa.end());

  child_ptr_.assign(n + 1, 0);
  for (Index p : parent_idx_) ++child_ptr_[p + 1];
  for (std::size_t i = 0; i < n; ++i) child_ptr_[i + 1] += child_ptr_[i];
  child_idx_.resize(parent_idx_.size());
  child_slot_.resize(parent_idx_.size());
  std::vector<std::size_t> fill(child_ptr_.begin(), child_ptr_.end() - 1);
  // Visiting children in DAG order keeps each child list sorted by position.
  for (Index c : order_) {
    for (std::size_t s = parent_ptr_[c]; s < parent_ptr_[c + 1]; ++s) {
      Index p = parent_idx_[s];
      child_idx_[fill[p]] = c;
      child_slot_[fill[p]] = s;
      ++fill[p];
    }
  }
}

bool NeighborDag::saturated() const {
  for (std::size_t i = 0; i < size(); ++i)
    if (parents(static_cast<Index>(i)).size() != static_cast<std::size_t>(position_[i])) return false;
  return true;
}

std::vector<Index> NeighborDag::markov_blanket(Index node) const {
  std::vector<Index> b;
  auto pa = parents(node);
  b.insert(b.end(), pa.begin(), pa.end());
  for (Index c : children(node)) {
    b.push_back(c);
    auto cp = parents(c);
    b.insert(b.end(), cp.begin(), cp.end());
  }
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  b.erase(std::remove(b.begin(), b.end(), node), b.end());
  return b;
}

NeighborDag build_nn_dag(const LocationSet& s, std::size_t m, const OrderScheme& scheme) {
  return build_nn_dag(s, m, order_locations(s, scheme));
}

NeighborDag build_nn_dag(const LocationSet& s, std::size_t m, std::vector<Index> order) {
  const std::size_t n = s.size();
  if (order.size() != n) throw ValidationError("dag: order length does not match location count");
  std::vector<Index> position(n, -1);
  for (std::size_t k = 0; k < n; ++k) {
    if (order[k] < 0 || static_cast<std::size_t>(order[k]) >= n || position[order[k]] >= 0)
      throw ValidationError("dag: order is not a permutation");
    position[order[k]] = static_cast<Index>(k);
  }
  std::vector<std::vector<Index>> parents(n);
  if (m == 0 || n == 1) return NeighborDag(std::move(order), std::move(parents), m);

  if (m + 1 >= n) {
    for (std::size_t k = 1; k < n; ++k)
      parents[order[k]].assign(order.begin(), order.begin() + k);
    return NeighborDag(std::move(order), std::move(parents), m);
  }

  KdTree tree(s);
  for (std::size_t k = 1; k < n; ++k) {
    Index v = order[k];
    if (k <= m) {
      parents[v].assign(order.begin(), order.begin() + k);
      continue;
    }
    const Index pos = static_cast<Index>(k);
    parents[v] = tree.knn(s.point(v), m, [&](Index c) { return position[c] < pos; });
  }
  return NeighborDag(std::move(order), std::move(parents), m);
}

}  // namespace spiox
