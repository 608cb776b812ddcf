#include <doctest.h>

#include <filesystem>
#include <set>

#include "knndr/error.hpp"
#include "support.hpp"

using namespace knndr;
using testing::brute_knn;

namespace {

Datastore random_store(std::size_t n, std::size_t d, std::uint64_t seed, bool integer_keys) {
  Rng rng(seed);
  std::vector<float> keys(n * d);
  std::vector<TokenId> values(n);
  for (auto& k : keys) {
    k = integer_keys ? static_cast<float>(static_cast<int>(rng.below(5)) - 2) : static_cast<float>(rng.uniform(-1, 1));
  }
  for (auto& v : values) v = static_cast<TokenId>(4 + rng.below(30));
  return Datastore(d, std::move(keys), std::move(values));
}

std::vector<double> random_query(std::size_t d, Rng& rng, bool integer) {
  std::vector<double> q(d);
  for (auto& x : q) x = integer ? static_cast<double>(static_cast<int>(rng.below(5)) - 2) : rng.uniform(-1, 1);
  return q;
}

void check_same(const std::vector<Neighbor>& got, const std::vector<Neighbor>& want) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].index == want[i].index);
    CHECK(got[i].value == want[i].value);
    CHECK(got[i].distance == doctest::Approx(want[i].distance).epsilon(1e-12));
  }
}

}  // namespace

TEST_CASE("build counts every target step") {
  const auto& t = testing::tiny();
  std::vector<ParallelPair> three;
  for (std::size_t len : {3u, 4u, 5u}) {  // plus EOS gives 4, 5, 6
    ParallelPair p;
    p.source.assign(len, 7);
    p.source.push_back(Vocab::kEos);
    p.target.assign(len, 9);
    p.target.push_back(Vocab::kEos);
    three.push_back(p);
  }
  const Datastore s = build_datastore(t.params, three);
  CHECK(s.size() == 15);
  CHECK(s.dim() == t.params.hidden_dim());
  CHECK(build_datastore(t.params, three) == s);
}

TEST_CASE("stored keys replay teacher forcing") {
  const auto& t = testing::tiny();
  std::size_t row = 0;
  for (const auto& pair : t.domain_split.train) {
    const auto outs = teacher_force_pass(t.params, pair);
    for (std::size_t i = 0; i < outs.size(); ++i, ++row) {
      const auto key = t.store.key(row);
      for (std::size_t j = 0; j < key.size(); ++j) REQUIRE(key[j] == static_cast<float>(outs[i].hidden[j]));
      REQUIRE(t.store.value(row) == pair.target[i]);
    }
  }
  CHECK(row == t.store.size());
}

TEST_CASE("dimension mismatch is rejected") {
  const auto& t = testing::tiny();
  const Datastore other = random_store(10, t.params.hidden_dim() + 1, 1, false);
  CHECK_THROWS_AS(check_compatible(t.params, other), ValidationError);
  check_compatible(t.params, t.store);
}

TEST_CASE("squared_l2 matches a plain loop") {
  Rng rng(4);
  for (std::size_t d : {1u, 7u, 8u, 9u, 16u, 33u, 64u}) {
    std::vector<double> q(d);
    std::vector<float> k(d);
    double want = 0;
    for (std::size_t i = 0; i < d; ++i) {
      q[i] = rng.uniform(-3, 3);
      k[i] = static_cast<float>(rng.uniform(-3, 3));
      want += (q[i] - k[i]) * (q[i] - k[i]);
    }
    CHECK(squared_l2(q, k) == doctest::Approx(want).epsilon(1e-13));
  }
}

TEST_CASE("query_knn equals the brute-force oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t n = 1 + rng.below(1500);
    const std::size_t d = 1 + rng.below(40);
    const bool ties = trial % 3 == 0;
    const Datastore s = random_store(n, d, 1000 + trial, ties);
    for (int qi = 0; qi < 10; ++qi) {
      const auto q = random_query(d, rng, ties);
      const std::size_t k = 1 + rng.below(12);
      const auto got = query_knn(s, q, k);
      check_same(got, brute_knn(s, q, k));
      for (std::size_t i = 1; i < got.size(); ++i) CHECK(got[i - 1].distance <= got[i].distance);
    }
  }
}

TEST_CASE("1000 rows, 50 queries, k=8") {
  Rng rng(5);
  const Datastore s = random_store(1000, 16, 6, false);
  for (int i = 0; i < 50; ++i) {
    const auto q = random_query(16, rng, false);
    check_same(query_knn(s, q, 8), brute_knn(s, q, 8));
  }
}

TEST_CASE("batched query equals single queries") {
  Rng rng(8);
  const Datastore s = random_store(700, 12, 9, true);
  std::vector<std::vector<double>> qs;
  for (int i = 0; i < 37; ++i) qs.push_back(random_query(12, rng, true));
  std::vector<std::span<const double>> spans(qs.begin(), qs.end());
  const auto batch = query_knn_batch(s, spans, 5);
  REQUIRE(batch.size() == qs.size());
  for (std::size_t i = 0; i < qs.size(); ++i) CHECK(batch[i] == query_knn(s, qs[i], 5));
}

TEST_CASE("self match, exhaustive k, errors") {
  const Datastore s = random_store(50, 6, 3, false);
  std::vector<double> q(s.key(17).begin(), s.key(17).end());
  const auto r = query_knn(s, q, 3);
  CHECK(r[0].index == 17);
  CHECK(r[0].distance == 0.0);
  const auto all = query_knn(s, q, 80);
  CHECK(all.size() == 50);
  std::set<std::size_t> rows;
  for (const auto& n : all) rows.insert(n.index);
  CHECK(rows.size() == 50);
  CHECK_THROWS_AS(query_knn(s, q, 0), ValidationError);
  CHECK(query_knn(Datastore{}, q, 3).empty());
}

TEST_CASE("duplicate rows tie-break by index") {
  std::vector<float> keys{1, 1, 0, 0, 1, 1, 1, 1, 0, 0};
  const Datastore s(2, keys, {10, 11, 12, 13, 14});
  const std::vector<double> q{1, 1};
  const auto r = query_knn(s, q, 3);
  CHECK(r[0].index == 0);
  CHECK(r[1].index == 2);
  CHECK(r[2].index == 3);
}

TEST_CASE("random pruning") {
  const Datastore s = random_store(1000, 4, 12, false);
  CHECK(prune_random(s, 1.0, 3) == s);
  const Datastore half = prune_random(s, 0.5, 3);
  CHECK(half.size() == 500);
  CHECK_THROWS_AS(prune_random(s, 0.0, 3), ValidationError);
  CHECK_THROWS_AS(prune_random(s, -0.5, 3), ValidationError);

  // oracle: seeded partial Fisher-Yates as documented, then sorted
  const auto kept = prune_indices(1000, 0.5, 3);
  std::vector<std::size_t> oracle(1000);
  for (std::size_t i = 0; i < oracle.size(); ++i) oracle[i] = i;
  Rng rng(derive_seed(3, fnv1a("prune")));
  for (std::size_t i = 0; i < 500; ++i) std::swap(oracle[i], oracle[i + rng.below(1000 - i)]);
  oracle.resize(500);
  std::sort(oracle.begin(), oracle.end());
  CHECK(kept == oracle);
  CHECK(std::is_sorted(kept.begin(), kept.end()));
  CHECK(std::set<std::size_t>(kept.begin(), kept.end()).size() == 500);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    CHECK(half.value(i) == s.value(kept[i]));
    const auto a = half.key(i);
    const auto b = s.key(kept[i]);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("store file layout and round trip") {
  const auto& t = testing::tiny();
  const auto path = testing::temp_path("s.kvds");
  save_store(t.store, path);
  CHECK(std::filesystem::file_size(path) == store_file_size(t.store.size(), t.store.dim()));
  CHECK(std::filesystem::file_size(path) == 24 + t.store.size() * t.store.dim() * 4 + t.store.size() * 4);
  const Datastore back = load_store(path);
  CHECK(back == t.store);
  const auto again = testing::temp_path("s2.kvds");
  save_store(back, again);
  CHECK(testing::file_bytes(again) == testing::file_bytes(path));

  auto bytes = testing::file_bytes(path);
  bytes[1] = 'Z';
  testing::write_bytes(again, bytes);
  CHECK_THROWS_AS(load_store(again), FormatError);
  bytes = testing::file_bytes(path);
  bytes.resize(bytes.size() - 9);
  testing::write_bytes(again, bytes);
  CHECK_THROWS_AS(load_store(again), FormatError);
  CHECK_THROWS_AS(load_store(testing::temp_path("missing.kvds")), IoError);
}
