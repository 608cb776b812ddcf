#include <doctest.h>

#include <cmath>

#include "knndr/error.hpp"
#include "support.hpp"

using namespace knndr;
using testing::temp_path;

namespace {

Vocab vocab1000() { return Vocab::synthetic(1000); }

}  // namespace

TEST_CASE("vocab specials and round trip") {
  const Vocab v = Vocab::synthetic(10);
  CHECK(v.size() == 14);
  CHECK(v.token(Vocab::kEos) == "</s>");
  CHECK(v.find("w3").value() == 7);
  const auto path = temp_path("vocab.txt");
  v.save(path);
  CHECK(Vocab::load(path) == v);
  CHECK_THROWS_AS(Vocab({"a", "b"}), ValidationError);
}

TEST_CASE("zero shift and zero noise reproduce the general mapping") {
  const Vocab v = Vocab::synthetic(50);
  const DomainSpec g = make_general_domain(v, 3, 0.0);
  const DomainSpec d = derive_domain(g, "same", 0.0, 0.0, 4);
  CHECK(count_differing_entries(g, d) == 0);
  const CorpusSplit s = generate_domain(d, v, {30, 5, 5}, {});
  for (const auto& p : s.train) {
    REQUIRE(p.source.size() == p.target.size());
    CHECK(p.source.back() == Vocab::kEos);
    for (std::size_t i = 0; i + 1 < p.source.size(); ++i) CHECK(p.target[i] == g.substitution_table[p.source[i]]);
  }
}

TEST_CASE("shift accounting is exact") {
  const Vocab v = vocab1000();
  const DomainSpec g = make_general_domain(v, 7, 0.01);
  for (double f : {0.0, 0.1, 0.3, 0.55, 1.0}) {
    const DomainSpec d = derive_domain(g, "x", f, 0.05, 11);
    CHECK(count_differing_entries(g, d) == static_cast<std::size_t>(std::llround(f * 1000)));
  }
  // independent recount
  const DomainSpec d = derive_domain(g, "x", 0.3, 0.05, 11);
  std::size_t diff = 0;
  for (std::size_t i = 0; i < g.substitution_table.size(); ++i) diff += g.substitution_table[i] != d.substitution_table[i];
  CHECK(diff == 300);
}

TEST_CASE("sense mixing leaves the primary tables alone") {
  const Vocab v = Vocab::synthetic(200);
  DomainSpec g = make_general_domain(v, 1, 0.01);
  const DomainSpec before = g;
  const DomainSpec d = derive_domain(g, "it", 0.3, 0.05, 2);
  mix_domain_senses(g, d, SenseMixing{}, 3);
  CHECK(g.substitution_table == before.substitution_table);
  CHECK(count_differing_entries(g, d) == 60);
  for (std::size_t i = Vocab::kNumSpecials; i < v.size(); ++i) {
    if (d.substitution_table[i] != g.substitution_table[i]) {
      CHECK(g.alternate_table[i] == d.substitution_table[i]);
      CHECK(g.alternate_rate[i] == doctest::Approx(0.3));
    }
  }
  validate(g, v);
}

TEST_CASE("generation is deterministic") {
  const Vocab v = Vocab::synthetic(100);
  const DomainSpec g = make_general_domain(v, 7, 0.01);
  const DomainSpec d = derive_domain(g, "it", 0.3, 0.05, 7);
  CHECK(generate_domain(d, v, {50, 10, 10}, {}) == generate_domain(d, v, {50, 10, 10}, {}));
  const auto a = temp_path("det_a.corpus");
  const auto b = temp_path("det_b.corpus");
  save_corpus(generate_domain(d, v, {50, 10, 10}, {}), a);
  save_corpus(generate_domain(d, v, {50, 10, 10}, {}), b);
  CHECK(testing::file_bytes(a) == testing::file_bytes(b));
}

TEST_CASE("lengths stay within range") {
  const Vocab v = Vocab::synthetic(30);
  const DomainSpec g = make_general_domain(v, 9, 0.1);
  const CorpusSplit s = generate_domain(g, v, {200, 1, 1}, {5, 30});
  for (const auto& p : s.train) {
    CHECK(p.target.size() >= 6);
    CHECK(p.target.size() <= 31);
    CHECK(p.target.back() == Vocab::kEos);
    for (std::size_t i = 0; i + 1 < p.target.size(); ++i) CHECK(!Vocab::is_special(p.target[i]));
  }
}

TEST_CASE("configuration errors") {
  const Vocab v = Vocab::synthetic(30);
  const DomainSpec g = make_general_domain(v, 9, 0.1);
  CHECK_THROWS_AS(generate_domain(g, v, {0, 1, 1}, {}), ValidationError);
  CHECK_THROWS_AS(derive_domain(g, "x", 1.5, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(derive_domain(g, "x", -0.1, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(generate_domain(derive_domain(g, "has space", 0.1, 0.0, 1), v, {1, 1, 1}, {}), ValidationError);
}

TEST_CASE("corpus stats") {
  auto pair = [](std::size_t len) {
    ParallelPair p;
    p.source.assign(len, 5);
    p.target.assign(len, 6);
    p.source.push_back(Vocab::kEos);
    p.target.push_back(Vocab::kEos);
    return p;
  };
  const std::vector<ParallelPair> two{pair(4), pair(6)};
  CHECK(corpus_stats(two).mean_target_length == 5.0);
  CHECK(corpus_stats(two).token_count == 12);
  const std::vector<ParallelPair> one{pair(9)};
  CHECK(corpus_stats(one).mean_target_length == 9.0);
  CHECK_THROWS_AS(corpus_stats(std::span<const ParallelPair>{}), ValidationError);

  const auto& valid = testing::tiny().domain_split.valid;
  std::size_t content = 0;
  for (const auto& p : valid) {
    for (TokenId t : p.target) content += t != Vocab::kEos;
  }
  CHECK(corpus_stats(valid).mean_target_length == doctest::Approx(double(content) / double(valid.size())).epsilon(1e-15));
}

TEST_CASE("split_head") {
  const auto& valid = testing::tiny().domain_split.valid;
  const auto [a, b] = split_head(valid, 0.9);
  CHECK(a.size() == 54);
  CHECK(b.size() == 6);
  CHECK(a.front() == valid.front());
  CHECK(b.back() == valid.back());
}

TEST_CASE("corpus file round trip and errors") {
  const auto& split = testing::tiny().domain_split;
  const auto path = temp_path("rt.corpus");
  save_corpus(split, path);
  CHECK(load_corpus(path) == split);

  auto bytes = testing::file_bytes(path);
  const std::string text(bytes.begin(), bytes.end());

  // truncated: drop the last few lines
  auto cut = text.substr(0, text.size() / 2);
  cut = cut.substr(0, cut.rfind('\n') + 1);
  const auto trunc = temp_path("trunc.corpus");
  testing::write_bytes(trunc, {cut.begin(), cut.end()});
  try {
    load_corpus(trunc);
    FAIL("truncated file loaded");
  } catch (const ParseError& e) {
    CHECK(e.line() > 1);
  }

  // token id beyond the vocabulary
  const auto pos = text.find('\n', text.find("#split=train"));
  std::string bad = text;
  bad.replace(pos + 1, bad.find(' ', pos + 1) - pos - 1, "9999");
  const auto big = temp_path("bigid.corpus");
  testing::write_bytes(big, {bad.begin(), bad.end()});
  CHECK_THROWS_AS(load_corpus(big), ValidationError);

  CHECK_THROWS_AS(load_corpus(temp_path("does_not_exist.corpus")), IoError);
}
