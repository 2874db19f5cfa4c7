#include <doctest.h>

#include <algorithm>
#include <random>

#include "spiox/error.hpp"
#include "spiox/geom.hpp"
#include "support.hpp"

using namespace spiox;

TEST_CASE("location set rejects duplicates and non-finite rows") {
  CHECK_THROWS_AS(LocationSet({0, 0, 1, 1, 0, 0}, 2), ValidationError);
  CHECK_THROWS_AS(LocationSet({0, NAN}, 2), ValidationError);
  CHECK_THROWS_AS(LocationSet({}, 2), ValidationError);
  LocationSet s({0, 0, 1, 1}, 2);
  CHECK(s.size() == 2);
  CHECK(s.point(1)[0] == 1.0);
}

TEST_CASE("digest changes with coordinates") {
  LocationSet a({0, 0, 1, 1}, 2), b({0, 0, 1, 1.0000001}, 2), c({0, 0, 1, 1}, 2);
  CHECK(a.digest() == c.digest());
  CHECK(a.digest() != b.digest());
}

TEST_CASE("order_locations") {
  LocationSet s({0.9, 0.1, 0.5}, 1);
  CHECK(order_locations(s, OrderScheme::coordinate_sum()) == std::vector<Index>{1, 2, 0});
  CHECK(order_locations(LocationSet({3.0}, 1), OrderScheme::random(1)) == std::vector<Index>{0});
  auto big = testing::random_locations(50, 2, 3);
  auto a = order_locations(big, OrderScheme::random(7));
  auto b = order_locations(big, OrderScheme::random(7));
  CHECK(a == b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
  CHECK(order_locations(big, OrderScheme::random(8)) != a);
}

TEST_CASE("nearest_neighbors") {
  LocationSet c({0, 1, 0, 3, 0, 2}, 2);
  std::vector<double> q{0, 0};
  CHECK(nearest_neighbors(q, c, 2) == std::vector<Index>{0, 2});
  CHECK(nearest_neighbors(q, c, 0).empty());
  CHECK(nearest_neighbors(q, c, 10).size() == 3);

  // Equidistant at indices 2 and 4.
  LocationSet t({5, 5, 6, 6, 0, 1, 7, 7, 1, 0}, 2);
  auto nn = nearest_neighbors(q, t, 2);
  CHECK(nn == std::vector<Index>{2, 4});
}

TEST_CASE("kd-tree agrees with brute force, including ties") {
  std::mt19937_64 rng(11);
  for (std::size_t dim : {1u, 2u, 3u, 4u}) {
    // Integer lattice coordinates create many exact distance ties.
    std::uniform_int_distribution<int> u(0, dim == 1 ? 1000 : 40);
    std::vector<double> xs;
    std::vector<std::vector<int>> seen;
    while (xs.size() < 300 * dim) {
      std::vector<int> p(dim);
      for (auto& v : p) v = u(rng);
      if (std::find(seen.begin(), seen.end(), p) != seen.end()) continue;
      seen.push_back(p);
      for (int v : p) xs.push_back(v);
    }
    LocationSet s(xs, dim);
    KdTree tree(s);
    for (int rep = 0; rep < 60; ++rep) {
      std::vector<double> q(dim);
      for (auto& v : q) v = u(rng) + 0.5 * (rep % 2);
      for (std::size_t k : {1u, 5u, 17u}) {
        auto a = tree.knn(q, k);
        auto b = nearest_neighbors(q, s, k);
        CHECK(a == b);
        for (std::size_t t = 1; t < a.size(); ++t)
          CHECK(squared_distance(q, s.point(a[t - 1])) <= squared_distance(q, s.point(a[t])));
      }
    }
  }
}

TEST_CASE("build_nn_dag small cases") {
  LocationSet line({0, 1, 2}, 1);
  auto dag = build_nn_dag(line, 2, std::vector<Index>{0, 1, 2});
  CHECK(dag.parents(0).empty());
  CHECK(std::vector<Index>(dag.parents(1).begin(), dag.parents(1).end()) == std::vector<Index>{0});
  CHECK(std::vector<Index>(dag.parents(2).begin(), dag.parents(2).end()) == std::vector<Index>{0, 1});

  LocationSet pts({0, 0.3, 1.1, 2.0, 2.2, 3.9, 5}, 1);
  auto d1 = build_nn_dag(pts, 1, OrderScheme::coordinate_sum());
  for (Index i = 1; i < 7; ++i) {
    REQUIRE(d1.parents(i).size() == 1);
    CHECK(d1.parents(i)[0] == i - 1);
  }
}

TEST_CASE("dag properties on random sets") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto s = testing::random_locations(120, 2, seed);
    for (std::size_t m : {0u, 3u, 10u, 119u}) {
      auto dag = build_nn_dag(s, m, OrderScheme::random(seed));
      for (std::size_t k = 0; k < s.size(); ++k) {
        Index v = dag.order()[k];
        auto pa = dag.parents(v);
        CHECK(pa.size() == std::min(k, m));
        for (Index p : pa) CHECK(dag.position(p) < dag.position(v));
        // Brute-force nearest predecessors.
        std::vector<double> pred;
        std::vector<Index> ids(dag.order().begin(), dag.order().begin() + k);
        auto sub = k ? s.subset(ids) : s;
        if (k > 0) {
          auto nn = nearest_neighbors(s.point(v), sub, m);
          std::vector<Index> want;
          for (Index t : nn) want.push_back(ids[t]);
          std::vector<Index> got(pa.begin(), pa.end());
          std::sort(want.begin(), want.end());
          std::sort(got.begin(), got.end());
          CHECK(want == got);
        }
      }
      if (m == 119) CHECK(dag.saturated());
    }
  }
}

TEST_CASE("children index mirrors parents") {
  auto s = testing::random_locations(60, 2, 4);
  auto dag = build_nn_dag(s, 4, OrderScheme::random(2));
  std::size_t total = 0;
  for (Index v = 0; v < 60; ++v) {
    auto ch = dag.children(v);
    auto sl = dag.child_slots(v);
    total += ch.size();
    for (std::size_t t = 0; t < ch.size(); ++t) {
      auto pa = dag.parents(ch[t]);
      std::size_t local = sl[t] - dag.parent_offset(ch[t]);
      REQUIRE(local < pa.size());
      CHECK(pa[local] == v);
    }
  }
  CHECK(total == dag.total_edges());

  auto full = build_nn_dag(testing::random_locations(12, 2, 9), 11, OrderScheme::random(1));
  for (Index v = 0; v < 12; ++v) CHECK(full.markov_blanket(v).size() == 11);
}
