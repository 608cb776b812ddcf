#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "knndr/engine.hpp"
#include "knndr/error.hpp"
#include "support.hpp"

using namespace knndr;

namespace {

std::vector<Sequence> sources(std::size_t n) {
  const auto& t = testing::tiny();
  std::vector<Sequence> out;
  for (std::size_t i = 0; i < n && i < t.domain_split.test.size(); ++i) out.push_back(t.domain_split.test[i].source);
  return out;
}

// Plain greedy loop; retrieval mixes a kNN distribution computed here from the brute scan.
Sequence oracle_greedy(const Sequence& src, bool retrieve) {
  const auto& t = testing::tiny();
  Sequence prefix{Vocab::kBos};
  Sequence out;
  for (std::size_t step = 0; step < 2 * src.size() + 10; ++step) {
    const auto s = decode_step(t.params, src, prefix);
    std::vector<double> p(s.dist.data(), s.dist.data() + s.dist.size());
    if (retrieve) {
      const auto nb = testing::brute_knn(t.store, std::span<const double>(s.hidden.data(), s.hidden.size()), t.knn.k);
      std::vector<double> w(nb.size());
      double z = 0.0;
      for (std::size_t i = 0; i < nb.size(); ++i) z += w[i] = std::exp(-(nb[i].distance - nb[0].distance) / t.knn.temperature);
      for (auto& x : p) x *= 1.0 - t.knn.lambda;
      for (std::size_t i = 0; i < nb.size(); ++i) p[nb[i].value] += t.knn.lambda * w[i] / z;
    }
    TokenId best = 0;
    for (std::size_t v = 1; v < p.size(); ++v) {
      if (p[v] > p[best]) best = static_cast<TokenId>(v);
    }
    out.push_back(best);
    prefix.push_back(best);
    if (best == Vocab::kEos) break;
  }
  return out;
}

SkipClassifier fixed_classifier(double bias) {
  SkipClassifier c = SkipClassifier::zeros();
  c.b2[1] = bias;
  c.b2[0] = -bias;
  c.trained = true;
  return c;
}

std::vector<Sequence> outputs(const BatchDecode& d) {
  std::vector<Sequence> out;
  for (const auto& tr : d.traces) out.push_back(tr.output);
  return out;
}

BatchDecode run(const DecodeMode& mode, const std::vector<Sequence>& src, std::size_t batch = 1, std::size_t workers = 1) {
  const auto& t = testing::tiny();
  return translate_batch(t.params, t.store, t.knn, mode, src, {batch, workers});
}

}  // namespace

TEST_CASE("base_only and vanilla_knn match a sequential greedy oracle") {
  const auto src = sources(12);
  const auto base = run(BaseOnly{}, src);
  const auto vanilla = run(VanillaKnn{}, src);
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(base.traces[i].output == oracle_greedy(src[i], false));
    CHECK(vanilla.traces[i].output == oracle_greedy(src[i], true));
    CHECK(base.traces[i].retrieval_count == 0);
    CHECK(vanilla.traces[i].retrieval_count == vanilla.traces[i].token_count);
  }
}

TEST_CASE("extreme classifiers reduce to the fixed modes") {
  const auto src = sources(20);
  const ThresholdSchedule sched{0.4, 10.0};
  const auto skip_all = run(DrSkip{fixed_classifier(-50), sched}, src);
  const auto conduct_all = run(DrSkip{fixed_classifier(50), sched}, src);
  CHECK(outputs(skip_all) == outputs(run(BaseOnly{}, src)));
  CHECK(outputs(conduct_all) == outputs(run(VanillaKnn{}, src)));
  CHECK(skip_all.retrieval_count == 0);
  CHECK(conduct_all.retrieval_count == conduct_all.token_count);
}

TEST_CASE("interval modes") {
  const auto src = sources(15);
  CHECK(outputs(run(Interval{}, src)) == outputs(run(VanillaKnn{}, src)));
  CHECK_THROWS_AS(run(Interval{1, 0}, src), ValidationError);
  const auto first = run(Interval{0, 0}, src);
  for (const auto& tr : first.traces) {
    REQUIRE(!tr.steps.empty());
    CHECK(!tr.steps[0].skipped);
    CHECK(tr.retrieval_count == 1);
  }
  const auto mid = run(Interval{2, 4}, src);
  for (const auto& tr : mid.traces) {
    for (const auto& s : tr.steps) CHECK(s.skipped == !(s.t >= 2 && s.t <= 4));
  }
}

TEST_CASE("batching and workers do not change outputs") {
  const auto& t = testing::tiny();
  const auto src = sources(40);
  const ThresholdSchedule sched{0.3, 8.0};
  ClassifierTrainConfig cc;
  cc.epochs = 3;
  const auto samples = build_training_samples(t.params, t.store, t.domain_split.valid, t.knn);
  const auto clf = train_classifier(samples, samples, FocalLossConfig::balanced(samples, 2.0), cc, sched).classifier;
  LambdaTrainConfig lc;
  lc.epochs = 3;
  const ArSkip ar{ArConfig{0.4, 32}, train_lambda(LambdaObjective::kTran, samples, lc)};
  for (const DecodeMode& mode : std::vector<DecodeMode>{BaseOnly{}, VanillaKnn{}, DrSkip{clf, sched}, ar, Interval{1, 3}}) {
    const auto single = run(mode, src, 1, 1);
    for (std::size_t b : {2u, 7u, 16u, 64u}) {
      for (std::size_t w : {1u, 3u}) {
        const auto batched = run(mode, src, b, w);
        INFO(mode_name(mode) << " batch " << b << " workers " << w);
        CHECK(outputs(batched) == outputs(single));
        CHECK(batched.retrieval_count == single.retrieval_count);
        CHECK(batched.token_count == single.token_count);
        for (std::size_t i = 0; i < src.size(); ++i) {
          CHECK(batched.traces[i].retrieval_count == single.traces[i].retrieval_count);
          REQUIRE(batched.traces[i].steps.size() == single.traces[i].steps.size());
          for (std::size_t s = 0; s < single.traces[i].steps.size(); ++s) {
            CHECK(batched.traces[i].steps[s].skipped == single.traces[i].steps[s].skipped);
            CHECK(batched.traces[i].steps[s].score == single.traces[i].steps[s].score);
          }
        }
      }
    }
    CHECK(translate(t.params, t.store, t.knn, mode, src[5]).output == single.traces[5].output);
  }
}

TEST_CASE("counts, lengths and step records") {
  const auto src = sources(30);
  const auto d = run(DrSkip{fixed_classifier(0.3), ThresholdSchedule{0.45, 6.0}}, src, 8);
  std::size_t tokens = 0, retrievals = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto& tr = d.traces[i];
    CHECK(tr.retrieval_count <= tr.token_count);
    CHECK(tr.token_count == tr.output.size());
    CHECK(tr.output.size() <= max_output_length(src[i]));
    CHECK(tr.steps.size() == tr.output.size());
    CHECK(tr.elapsed > 0.0);
    std::size_t conducted = 0;
    for (std::size_t s = 0; s < tr.steps.size(); ++s) {
      CHECK(tr.steps[s].t == s);
      REQUIRE(tr.steps[s].score.has_value());
      REQUIRE(tr.steps[s].alpha_t.has_value());
      CHECK(tr.steps[s].skipped == !(*tr.steps[s].score > *tr.steps[s].alpha_t));
      conducted += !tr.steps[s].skipped;
    }
    CHECK(conducted == tr.retrieval_count);
    if (tr.output.size() < max_output_length(src[i])) CHECK(tr.output.back() == Vocab::kEos);
    tokens += tr.token_count;
    retrievals += tr.retrieval_count;
  }
  CHECK(tokens == d.token_count);
  CHECK(retrievals == d.retrieval_count);
  CHECK(max_output_length(Sequence{4, 5, 2}) == 16);
  CHECK(strip_eos(Sequence{4, Vocab::kEos}) == Sequence{4});
  CHECK(strip_eos(Sequence{4, 5}) == Sequence{4, 5});
}

TEST_CASE("retrieval does not grow with alpha_min") {
  const auto& t = testing::tiny();
  const auto samples = build_training_samples(t.params, t.store, t.domain_split.valid, t.knn);
  ClassifierTrainConfig cc;
  cc.epochs = 4;
  const ThresholdSchedule base{0.3, 8.0};
  const auto clf = train_classifier(samples, samples, FocalLossConfig::balanced(samples, 2.0), cc, base).classifier;
  const auto src = sources(40);
  std::size_t previous = SIZE_MAX;
  for (double a : {0.0, 0.1, 0.2, 0.3, 0.4, 0.5}) {
    // retrieval at fixed outputs: the decisions re-evaluated along each base trajectory
    std::size_t conduct = 0;
    for (const auto& s : samples) conduct += !dr_skip_decision(clf, {a, 8.0}, s.features, s.timestep).skip;
    CHECK(conduct <= previous);
    previous = conduct;
  }
}

TEST_CASE("invalid requests") {
  const auto& t = testing::tiny();
  const auto src = sources(3);
  CHECK_THROWS_AS(run(BaseOnly{}, src, 0), ValidationError);
  CHECK_THROWS_AS(run(BaseOnly{}, src, 1, 0), ValidationError);
  CHECK_THROWS_AS(run(BaseOnly{}, {Sequence{}}), ValidationError);
  CHECK_THROWS_AS(run(BaseOnly{}, {Sequence{9999}}), ValidationError);
  CHECK_THROWS_AS(run(DrSkip{SkipClassifier::zeros(), {}}, src), StateError);
  CHECK_THROWS_AS(run(ArSkip{ArConfig{}, LambdaEstimator::zeros(4)}, src), StateError);
  KnnConfig bad = t.knn;
  bad.k = 0;
  CHECK_THROWS_AS(translate_batch(t.params, t.store, bad, BaseOnly{}, src, {}), ValidationError);
  CHECK(run(BaseOnly{}, {}).traces.empty());
}

TEST_CASE("traces are written as JSON lines") {
  const auto src = sources(4);
  const auto d = run(DrSkip{fixed_classifier(0.1), ThresholdSchedule{0.4, 5.0}}, src);
  const auto path = testing::temp_path("traces.jsonl");
  write_traces(path, d.traces);
  std::ifstream in(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("output").get<Sequence>() == d.traces[n].output);
    CHECK(j.at("retrieval_count").get<std::size_t>() == d.traces[n].retrieval_count);
    CHECK(j.at("token_count").get<std::size_t>() == d.traces[n].token_count);
    CHECK(j.at("steps").size() == d.traces[n].steps.size());
    ++n;
  }
  CHECK(n == src.size());
}
