#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "hsfl/data.hpp"

using namespace hsfl;

TEST_SUITE_BEGIN("data");

TEST_CASE("gaussian mixture has balanced labels and the pinned means") {
  const int classes = 4, dim = 6, n = 4000;
  const Dataset ds = gen_gaussian_mixture(classes, dim, n, 0.1, 42);
  CHECK(ds.size() == n);
  CHECK(ds.class_count == classes);
  CHECK(ds.features.rows() == n);
  CHECK(ds.features.cols() == dim);

  std::vector<int> counts(classes, 0);
  for (int y : ds.labels) {
    REQUIRE(y >= 0);
    REQUIRE(y < classes);
    counts[static_cast<size_t>(y)]++;
  }
  const auto [mn, mx] = std::minmax_element(counts.begin(), counts.end());
  CHECK(*mx - *mn <= 1);

  // Class c centers on (-1)^c * e_{c/2}: class 0 -> +e0, 1 -> -e0,
  // 2 -> +e1, 3 -> -e1.
  for (int c = 0; c < classes; ++c) {
    std::vector<double> mean(dim, 0.0);
    int m = 0;
    for (int i = 0; i < n; ++i) {
      if (ds.labels[static_cast<size_t>(i)] != c) continue;
      for (int j = 0; j < dim; ++j) mean[static_cast<size_t>(j)] += ds.features.at(i, j);
      ++m;
    }
    REQUIRE(m > 0);
    const int axis = c / 2;
    const double sign = c % 2 == 0 ? 1.0 : -1.0;
    for (int j = 0; j < dim; ++j) {
      const double expect = j == axis ? sign : 0.0;
      CHECK(std::abs(mean[static_cast<size_t>(j)] / m - expect) < 0.02);
    }
  }

  // Determinism and seed sensitivity.
  const Dataset again = gen_gaussian_mixture(classes, dim, n, 0.1, 42);
  CHECK(again.features == ds.features);
  CHECK(again.labels == ds.labels);
  const Dataset other = gen_gaussian_mixture(classes, dim, n, 0.1, 43);
  CHECK_FALSE(other.features == ds.features);

  CHECK_THROWS_AS(gen_gaussian_mixture(13, 6, 100, 0.1, 1), Error);  // 13 > 2*6 means
  CHECK_THROWS_AS(gen_gaussian_mixture(1, 6, 100, 0.1, 1), Error);
}

TEST_CASE("dirichlet partition covers the dataset disjointly") {
  const Dataset ds = gen_gaussian_mixture(4, 6, 1000, 0.3, 7);
  const int clients = 5;
  const std::vector<Shard> shards = dirichlet_partition(ds, clients, 0.5, 7);
  REQUIRE(shards.size() == clients);

  std::set<int> seen;
  double weight_total = 0.0;
  for (int n = 0; n < clients; ++n) {
    const Shard& s = shards[static_cast<size_t>(n)];
    CHECK(s.owner == n);
    REQUIRE_FALSE(s.indices.empty());
    for (size_t i = 0; i < s.indices.size(); ++i) {
      REQUIRE(s.indices[i] >= 0);
      REQUIRE(s.indices[i] < ds.size());
      if (i > 0) REQUIRE(s.indices[i] > s.indices[i - 1]);  // sorted, distinct
      REQUIRE(seen.insert(s.indices[i]).second);            // disjoint
    }
    CHECK(s.weight ==
          doctest::Approx(static_cast<double>(s.indices.size()) / ds.size()).epsilon(1e-12));
    weight_total += s.weight;
  }
  CHECK(seen.size() == static_cast<size_t>(ds.size()));  // full cover
  CHECK(weight_total == doctest::Approx(1.0).epsilon(1e-12));

  // Determinism.
  const std::vector<Shard> again = dirichlet_partition(ds, clients, 0.5, 7);
  for (int n = 0; n < clients; ++n)
    CHECK(again[static_cast<size_t>(n)].indices == shards[static_cast<size_t>(n)].indices);
}

TEST_CASE("concentration controls skew") {
  const Dataset ds = gen_gaussian_mixture(4, 6, 2000, 0.3, 11);
  const auto spread_ratio = [&](double conc) {
    const std::vector<Shard> shards = dirichlet_partition(ds, 4, conc, 11);
    size_t lo = ds.labels.size(), hi = 0;
    for (const Shard& s : shards) {
      lo = std::min(lo, s.indices.size());
      hi = std::max(hi, s.indices.size());
    }
    return static_cast<double>(hi) / static_cast<double>(lo);
  };
  // Near-IID at large concentration, skewed at small concentration.
  CHECK(spread_ratio(100.0) < spread_ratio(0.1));
  CHECK(spread_ratio(100.0) < 1.5);
}

TEST_CASE("gather_batch pulls the requested rows") {
  const Dataset ds = gen_gaussian_mixture(2, 4, 50, 0.2, 3);
  const Batch b = gather_batch(ds, {4, 0, 17});
  REQUIRE(b.size() == 3);
  CHECK(b.y[0] == ds.labels[4]);
  CHECK(b.y[1] == ds.labels[0]);
  CHECK(b.y[2] == ds.labels[17]);
  for (int j = 0; j < 4; ++j) {
    CHECK(b.x.at(0, j) == ds.features.at(4, j));
    CHECK(b.x.at(1, j) == ds.features.at(0, j));
    CHECK(b.x.at(2, j) == ds.features.at(17, j));
  }
  CHECK_THROWS_AS(gather_batch(ds, {50}), Error);
  CHECK_THROWS_AS(gather_batch(ds, {-1}), Error);
}

TEST_CASE("draw_with_replacement stays in the pool") {
  const std::vector<int> pool{3, 8, 21};
  Rng rng(5);
  const std::vector<int> drawn = draw_with_replacement(pool, 200, rng);
  REQUIRE(drawn.size() == 200);
  std::set<int> hits;
  for (int v : drawn) {
    CHECK(std::find(pool.begin(), pool.end(), v) != pool.end());
    hits.insert(v);
  }
  CHECK(hits.size() == 3);  // all pool members appear over 200 draws

  Rng r1(9), r2(9);
  CHECK(draw_with_replacement(pool, 50, r1) == draw_with_replacement(pool, 50, r2));
  CHECK_THROWS_AS(draw_with_replacement({}, 1, rng), Error);
}

TEST_SUITE_END();
