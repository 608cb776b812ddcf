#include <doctest.h>

#include <cmath>

#include "knndr/error.hpp"
#include "knndr/knn.hpp"
#include "support.hpp"

using namespace knndr;

namespace {

const std::vector<TrainingSample>& tiny_samples() {
  static const auto s = [] {
    const auto& t = testing::tiny();
    return build_training_samples(t.params, t.store, t.domain_split.valid, t.knn);
  }();
  return s;
}

SkipClassifier random_classifier(std::uint64_t seed) {
  SkipClassifier c = SkipClassifier::init(seed);
  Rng rng(seed + 1);
  for (Eigen::Index i = 0; i < c.b1.size(); ++i) c.b1[i] = rng.uniform(-0.5, 0.5);
  for (Eigen::Index i = 0; i < c.b2.size(); ++i) c.b2[i] = rng.uniform(-0.5, 0.5);
  c.trained = true;
  return c;
}

SkipClassifier constant_classifier(double p_retrieve) {
  SkipClassifier c = SkipClassifier::zeros();
  c.b2[1] = std::log(p_retrieve / (1.0 - p_retrieve));
  c.trained = true;
  return c;
}

TrainingSample sample(double p_top1, double h_norm, double max_attn, SampleLabel label, std::size_t t = 0) {
  TrainingSample s;
  s.features = {p_top1, h_norm, max_attn};
  s.label = label;
  s.timestep = t;
  return s;
}

}  // namespace

TEST_CASE("feature extraction") {
  DecoderStepOutput step;
  step.dist = Vector::Constant(100, 0.01);
  step.hidden = Vector::Zero(8);
  step.hidden[0] = 3;
  step.hidden[1] = 4;
  step.attn = Vector(3);
  step.attn << 0.2, 0.5, 0.3;
  const FeatureVector f = extract_features(step);
  CHECK(f.p_top1 == 0.01);
  CHECK(f.h_norm == 5.0);
  CHECK(f.max_attn == 0.5);
}

TEST_CASE("nmt rank breaks ties by lowest id") {
  Vector d(5);
  d << 0.1, 0.3, 0.3, 0.2, 0.1;
  CHECK(nmt_rank(d, 1) == 0);
  CHECK(nmt_rank(d, 2) == 1);
  CHECK(nmt_rank(d, 3) == 2);
  CHECK(nmt_rank(d, 0) == 3);
  CHECK(nmt_rank(d, 4) == 4);
}

TEST_CASE("labelling criteria") {
  SampleMeta m;
  m.nmt_rank = 0;
  m.in_neighbors = true;
  CHECK(label_from_meta(m) == SampleLabel::kSkip);
  m.nmt_rank = 2;
  CHECK(label_from_meta(m) == SampleLabel::kConduct);
  m.in_neighbors = false;
  CHECK(label_from_meta(m) == SampleLabel::kSkip);

  m.in_neighbors = true;
  m.p_knn_target = 0.4;
  m.p_nmt_target = 0.4;
  CHECK(label_from_meta(m, LabelCriteria::kKnnBeatsNmt) == SampleLabel::kConduct);
  m.p_knn_target = 0.3;
  CHECK(label_from_meta(m, LabelCriteria::kKnnBeatsNmt) == SampleLabel::kSkip);
}

TEST_CASE("sample meta matches independent recomputation") {
  const auto& t = testing::tiny();
  const auto& samples = tiny_samples();
  std::size_t total = 0;
  for (const auto& p : t.domain_split.valid) total += p.target.size();
  REQUIRE(samples.size() == total);
  std::size_t idx = 0;
  for (std::size_t pid = 0; pid < t.domain_split.valid.size(); ++pid) {
    const auto& pair = t.domain_split.valid[pid];
    const auto outs = teacher_force_pass(t.params, pair);
    for (std::size_t step = 0; step < outs.size(); ++step, ++idx) {
      const auto& s = samples[idx];
      const TokenId y = pair.target[step];
      CHECK(s.meta.pair_id == pid);
      CHECK(s.timestep == step);
      CHECK(s.meta.target == y);
      std::size_t ahead = 0;
      for (Eigen::Index j = 0; j < outs[step].dist.size(); ++j) {
        const double pj = outs[step].dist[j];
        ahead += pj > outs[step].dist[y] || (pj == outs[step].dist[y] && static_cast<TokenId>(j) < y);
      }
      CHECK(s.meta.nmt_rank == ahead);
      const std::span<const double> q(outs[step].hidden.data(), static_cast<std::size_t>(outs[step].hidden.size()));
      const auto nb = testing::brute_knn(t.store, q, t.knn.k);
      bool in = false;
      for (const auto& n : nb) in |= n.value == y;
      CHECK(s.meta.in_neighbors == in);
      CHECK(s.meta.p_knn_target == doctest::Approx(knn_distribution(nb, t.knn.temperature, t.vocab.size())[y]));
      const bool conduct = ahead != 0 && in;
      CHECK(s.label == (conduct ? SampleLabel::kConduct : SampleLabel::kSkip));
      CHECK(s.features == extract_features(outs[step]));
    }
  }
  CHECK_THROWS_AS(build_training_samples(t.params, t.store, std::span<const ParallelPair>{}, t.knn), ValidationError);
}

TEST_CASE("focal loss values") {
  FocalLossConfig two;
  CHECK(focal_loss(0.5, two, SampleLabel::kConduct) == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-12));
  CHECK(std::abs(focal_loss(0.5, two, SampleLabel::kSkip) - 0.1732867951) < 1e-9);
  CHECK(focal_loss(1.0, two, SampleLabel::kConduct) == 0.0);
  CHECK(focal_loss(0.0, two, SampleLabel::kConduct) == doctest::Approx(-std::log(1e-12)));
  FocalLossConfig ce;
  ce.gamma = 0.0;
  CHECK(std::abs(focal_loss(0.5, ce, SampleLabel::kSkip) - std::log(2.0)) < 1e-12);
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double p = rng.uniform(1e-9, 1.0);
    CHECK(std::abs(focal_loss(p, ce, SampleLabel::kConduct) + std::log(p)) < 1e-12);
    for (double g : {0.5, 1.0, 2.0, 5.0}) {
      FocalLossConfig f;
      f.gamma = g;
      CHECK(focal_loss(p, f, SampleLabel::kConduct) <= -std::log(p));
    }
  }
  FocalLossConfig bad;
  bad.alpha_c = {0.0, 1.0};
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("balanced class weights") {
  std::vector<TrainingSample> s;
  for (int i = 0; i < 8; ++i) s.push_back(sample(0.5, 1, 0.5, SampleLabel::kSkip));
  for (int i = 0; i < 2; ++i) s.push_back(sample(0.5, 1, 0.5, SampleLabel::kConduct));
  const auto cfg = FocalLossConfig::balanced(s, 2.0);
  CHECK(cfg.alpha_c[1] == doctest::Approx(0.8));
  CHECK(cfg.alpha_c[0] == doctest::Approx(0.2));
  s.resize(8);
  CHECK(FocalLossConfig::balanced(s, 2.0).alpha_c == std::array<double, 2>{1.0, 1.0});
}

TEST_CASE("threshold schedule") {
  ThresholdSchedule s{0.4, 20};
  CHECK(threshold_at(s, 0) == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(threshold_at(s, 10) == doctest::Approx(0.425).epsilon(1e-15));
  CHECK(threshold_at(s, 20) == 0.5);
  CHECK(threshold_at(s, 35) == 0.5);
  for (double a : {0.0, 0.2, 0.35, 0.4, 0.45, 0.5}) {
    for (double T : {1.0, 7.5, 20.0}) {
      ThresholdSchedule q{a, T};
      double prev = -1;
      for (std::size_t t = 0; t < 50; ++t) {
        const double v = threshold_at(q, t);
        CHECK(v >= prev);
        if (static_cast<double>(t) >= T) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
        prev = v;
      }
    }
  }
  ThresholdSchedule flat{0.5, 20};
  for (std::size_t t = 0; t < 30; ++t) CHECK(threshold_at(flat, t) == 0.5);
  CHECK_THROWS_AS((ThresholdSchedule{0.6, 20}.validate()), ValidationError);
  CHECK_THROWS_AS((ThresholdSchedule{0.4, 0}.validate()), ValidationError);
}

TEST_CASE("retrieve probability and decision semantics") {
  SkipClassifier zero = SkipClassifier::zeros();
  CHECK_THROWS_AS(retrieve_probability(zero, {}), StateError);
  zero.trained = true;
  CHECK(retrieve_probability(zero, {0.3, 2.0, 0.9}) == 0.5);
  CHECK(retrieve_probability(zero, {0.9, 7.0, 0.1}) == 0.5);

  const ThresholdSchedule half{0.5, 20};
  CHECK(dr_skip_decision(zero, half, {}, 0).skip);  // 0.5 > 0.5 is false
  const SkipClassifier six = constant_classifier(0.6);
  CHECK(retrieve_probability(six, {}) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(!dr_skip_decision(six, half, {}, 3).skip);

  const SkipClassifier c = random_classifier(3);
  const FeatureVector f{0.4, 3.0, 0.6};
  CHECK(retrieve_probability(c, f) == retrieve_probability(c, f));
}

TEST_CASE("raising alpha_min never turns a skip into a retrieval") {
  const SkipClassifier c = random_classifier(8);
  Rng rng(2);
  for (int i = 0; i < 300; ++i) {
    const FeatureVector f{rng.unit(), rng.uniform(0, 6), rng.unit()};
    const std::size_t t = rng.below(40);
    bool prev_skip = false;
    for (double a : {0.35, 0.40, 0.45}) {
      const bool skip = dr_skip_decision(c, {a, 17.0}, f, t).skip;
      CHECK((!prev_skip || skip));
      prev_skip = skip;
    }
  }
}

TEST_CASE("classifier gradient matches central finite differences") {
  const double eps = 1e-4;
  Rng rng(21);
  const double gammas[] = {2.0, 0.0, 0.5, 3.0, 1.0, 2.0};
  const std::uint32_t masks[] = {0b111, 0b111, 0b101, 0b111, 0b011, 0b110};
  for (std::size_t c = 0; c < std::size(gammas); ++c) {
    SkipClassifier clf = random_classifier(40 + c);
    clf.feature_mask = masks[c];
    const Eigen::Index m = 5 + static_cast<Eigen::Index>(c);
    RowMatrix x(m, 3);
    std::vector<SampleLabel> labels;
    for (Eigen::Index i = 0; i < m; ++i) {
      x(i, 0) = rng.unit();
      x(i, 1) = rng.uniform(0, 8);
      x(i, 2) = rng.unit();
      labels.push_back(rng.below(2) ? SampleLabel::kConduct : SampleLabel::kSkip);
    }
    FocalLossConfig cfg;
    cfg.gamma = gammas[c];
    cfg.alpha_c = {rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)};
    for (auto kind : {ClassifierLoss::kFocal, ClassifierLoss::kWeightedCrossEntropy}) {
      const auto g = classifier_loss_gradient(clf, x, labels, cfg, kind);
      double worst = 0.0;
      auto probe = [&](double& slot, double analytic) {
        const double keep = slot;
        slot = keep + eps;
        const double up = classifier_loss_gradient(clf, x, labels, cfg, kind).loss;
        slot = keep - eps;
        const double down = classifier_loss_gradient(clf, x, labels, cfg, kind).loss;
        slot = keep;
        const double numeric = (up - down) / (2 * eps);
        worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3}));
      };
      for (Eigen::Index i = 0; i < clf.w1.size(); ++i) probe(clf.w1.data()[i], g.grad.w1.data()[i]);
      for (Eigen::Index i = 0; i < clf.b1.size(); ++i) probe(clf.b1[i], g.grad.b1[i]);
      for (Eigen::Index i = 0; i < clf.w2.size(); ++i) probe(clf.w2.data()[i], g.grad.w2.data()[i]);
      for (Eigen::Index i = 0; i < clf.b2.size(); ++i) probe(clf.b2[i], g.grad.b2[i]);
      for (Eigen::Index i = 0; i < x.size(); ++i) probe(x.data()[i], g.input_grad.data()[i]);
      INFO("configuration " << c << " kind " << static_cast<int>(kind));
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("focal with gamma 0 trains exactly like weighted cross-entropy") {
  const auto& s = tiny_samples();
  const std::vector<TrainingSample> train(s.begin(), s.begin() + 400);
  const std::vector<TrainingSample> held(s.begin() + 400, s.end());
  const FocalLossConfig cfg = FocalLossConfig::balanced(train, 0.0);
  ClassifierTrainConfig tc;
  tc.epochs = 6;
  tc.seed = 4;
  const ThresholdSchedule sched{0.4, 8};
  tc.loss = ClassifierLoss::kFocal;
  const auto a = train_classifier(train, held, cfg, tc, sched);
  tc.loss = ClassifierLoss::kWeightedCrossEntropy;
  const auto b = train_classifier(train, held, cfg, tc, sched);
  CHECK(a.classifier == b.classifier);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].mean_loss == b.history[i].mean_loss);
}

TEST_CASE("separable samples reach held-out F1 of 1") {
  Rng rng(6);
  auto make = [&](std::size_t n) {
    std::vector<TrainingSample> v;
    for (std::size_t i = 0; i < n; ++i) {
      const bool conduct = rng.below(4) == 0;
      const double p = conduct ? rng.uniform(0.05, 0.3) : rng.uniform(0.7, 0.99);
      v.push_back(sample(p, rng.uniform(2, 4), rng.uniform(0.3, 0.9), conduct ? SampleLabel::kConduct : SampleLabel::kSkip));
    }
    return v;
  };
  const auto train = make(600);
  const auto held = make(200);
  ClassifierTrainConfig tc;
  tc.epochs = 30;
  const auto r = train_classifier(train, held, FocalLossConfig::balanced(train, 2.0), tc, {0.4, 20});
  CHECK(r.best_heldout.defined);
  CHECK(r.best_heldout.f1 == 1.0);
  CHECK(!r.single_class);
  CHECK(classifier_f1(r.classifier, {0.4, 20}, held).f1 == 1.0);
}

TEST_CASE("single-class training is flagged, not refused") {
  std::vector<TrainingSample> train;
  for (int i = 0; i < 50; ++i) train.push_back(sample(0.1 * (i % 10), 1, 0.5, SampleLabel::kSkip));
  ClassifierTrainConfig tc;
  tc.epochs = 3;
  const auto r = train_classifier(train, train, FocalLossConfig::balanced(train, 2.0), tc, {0.4, 20});
  CHECK(r.single_class);
  CHECK(!r.best_heldout.defined);
  CHECK(r.best_epoch == 2);
  CHECK(r.classifier.trained);
}

TEST_CASE("running statistics track full-data statistics") {
  const auto& s = tiny_samples();
  ClassifierTrainConfig tc;
  tc.epochs = 20;
  const auto r = train_classifier(s, s, FocalLossConfig::balanced(s, 2.0), tc, {0.4, 8});
  SkipClassifier full = r.classifier;
  for (std::size_t f = 0; f < 3; ++f) {
    double mean = 0;
    for (const auto& x : s) mean += x.features.values()[f];
    mean /= static_cast<double>(s.size());
    double var = 0;
    for (const auto& x : s) var += (x.features.values()[f] - mean) * (x.features.values()[f] - mean);
    full.bn.running_mean[f] = mean;
    full.bn.running_var[f] = var / static_cast<double>(s.size());
  }
  double diff = 0;
  for (const auto& x : s) diff += std::abs(retrieve_probability(r.classifier, x.features) - retrieve_probability(full, x.features));
  CHECK(diff / static_cast<double>(s.size()) <= 1e-2);
}

TEST_CASE("trained classifier ranks conduct steps higher") {
  const auto& s = tiny_samples();
  ClassifierTrainConfig tc;
  tc.epochs = 20;
  const auto r = train_classifier(s, s, FocalLossConfig::balanced(s, 2.0), tc, {0.4, 8});
  double conduct = 0, skip = 0;
  std::size_t nc = 0, ns = 0;
  for (const auto& x : s) {
    const double p = retrieve_probability(r.classifier, x.features);
    if (x.label == SampleLabel::kConduct) conduct += p, ++nc;
    else skip += p, ++ns;
  }
  REQUIRE(nc > 0);
  CHECK(conduct / double(nc) > skip / double(ns));
}

TEST_CASE("classifier and sample files round trip") {
  SkipClassifier c = random_classifier(12);
  c.bn.running_mean = {0.3, 2.5, 0.7};
  c.bn.running_var = {0.01, 1.5, 0.2};
  c.feature_mask = 0b101;
  c.schedule = {0.45, 17.318};
  const auto path = testing::temp_path("c.rgsc");
  save_classifier(c, path);
  CHECK(load_classifier(path) == c);
  const auto again = testing::temp_path("c2.rgsc");
  save_classifier(load_classifier(path), again);
  CHECK(testing::file_bytes(path) == testing::file_bytes(again));
  auto bytes = testing::file_bytes(path);
  bytes[0] = 'Q';
  testing::write_bytes(again, bytes);
  CHECK_THROWS_AS(load_classifier(again), FormatError);

  const auto& s = tiny_samples();
  const auto csv = testing::temp_path("s.csv");
  save_samples(s, csv);
  CHECK(load_samples(csv) == s);
  std::ofstream(testing::temp_path("bad.csv")) << "pair_id,timestep,target,nmt_rank,in_neighbors,p_nmt_target,"
                                                  "p_knn_target,p_top1,h_norm,max_attn,label\n1,2,3\n";
  try {
    load_samples(testing::temp_path("bad.csv"));
    FAIL("bad csv loaded");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("training config validation") {
  ClassifierTrainConfig tc;
  tc.feature_mask = 0;
  CHECK_THROWS_AS(tc.validate(), ValidationError);
  tc = {};
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), ValidationError);
  CHECK_THROWS_AS(train_classifier({}, {}, {}, {}, {}), ValidationError);
}
