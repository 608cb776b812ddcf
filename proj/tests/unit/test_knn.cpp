#include <doctest.h>

#include <cmath>

#include "knndr/error.hpp"
#include "knndr/knn.hpp"
#include "support.hpp"

using namespace knndr;

TEST_CASE("single neighbor and symmetric pair") {
  const std::vector<Neighbor> one{{0, 5, 3.7}};
  const Vector p = knn_distribution(one, 10.0, 8);
  CHECK(p[5] == 1.0);
  CHECK(p.sum() == 1.0);
  const std::vector<Neighbor> two{{0, 2, 1.0}, {1, 6, 1.0}};
  const Vector q = knn_distribution(two, 10.0, 8);
  CHECK(q[2] == 0.5);
  CHECK(q[6] == 0.5);
}

TEST_CASE("hand evaluated weights") {
  const std::vector<Neighbor> n{{0, 1, 0.0}, {1, 2, std::log(2.0)}};
  const Vector p = knn_distribution(n, 1.0, 4);
  CHECK(p[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p[2] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("duplicate values accumulate and support is contained") {
  const std::vector<Neighbor> n{{0, 3, 1.0}, {1, 3, 2.0}, {2, 7, 1.5}};
  const Vector p = knn_distribution(n, 2.0, 10);
  const double w0 = 1.0, w1 = std::exp(-0.5), w2 = std::exp(-0.25);
  CHECK(p[3] == doctest::Approx((w0 + w1) / (w0 + w1 + w2)));
  CHECK(p[7] == doctest::Approx(w2 / (w0 + w1 + w2)));
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (i != 3 && i != 7) CHECK(p[i] == 0.0);
  }
}

TEST_CASE("large distances do not underflow") {
  const std::vector<Neighbor> n{{0, 1, 1e6}, {1, 2, 1e6 + 1}};
  const Vector p = knn_distribution(n, 1.0, 3);
  CHECK(std::isfinite(p[1]));
  CHECK(p.sum() == doctest::Approx(1.0));
}

TEST_CASE("temperature limit gives value frequencies") {
  Rng rng(3);
  std::vector<Neighbor> n;
  std::vector<double> freq(6, 0.0);
  for (std::size_t i = 0; i < 16; ++i) {
    const auto v = static_cast<TokenId>(rng.below(6));
    n.push_back({i, v, rng.uniform(0, 50)});
    freq[v] += 1.0 / 16;
  }
  const Vector p = knn_distribution(n, 1e9, 6);
  for (std::size_t v = 0; v < 6; ++v) CHECK(std::abs(p[v] - freq[v]) < 1e-6);
}

TEST_CASE("errors") {
  CHECK_THROWS_AS(knn_distribution(std::span<const Neighbor>{}, 1.0, 4), ValidationError);
  const std::vector<Neighbor> n{{0, 9, 0.0}};
  CHECK_THROWS_AS(knn_distribution(n, 1.0, 4), ValidationError);
  CHECK_THROWS_AS(interpolate(Vector::Zero(3), Vector::Zero(4), 0.5), ValidationError);
  KnnConfig c;
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("interpolation boundaries and example") {
  Vector a(2), b(2);
  a << 1.0, 0.0;
  b << 0.2, 0.8;
  const Vector m = interpolate(a, b, 0.7);
  CHECK(m[0] == doctest::Approx(0.76).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(0.24).epsilon(1e-15));
  CHECK(interpolate(a, b, 0.0) == b);
  CHECK(interpolate(a, b, 1.0) == a);
}

TEST_CASE("simplex closure and argmax dominance") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Vector a(7), b(7);
    for (int i = 0; i < 7; ++i) {
      a[i] = rng.unit();
      b[i] = rng.unit();
    }
    a /= a.sum();
    b /= b.sum();
    const double lambda = rng.unit();
    const Vector m = interpolate(a, b, lambda);
    CHECK(std::abs(m.sum() - 1.0) < 1e-12);
    CHECK(m.minCoeff() >= 0.0);
    if (a.maxCoeff() > 0.5) CHECK(argmax(interpolate(a, b, 1.0)) == argmax(a));
  }
}
