#include "knndr/classifier.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "knndr/binary_io.hpp"
#include "knndr/error.hpp"
#include "knndr/rng.hpp"

namespace knndr {

namespace {

constexpr std::uint32_t kClassifierVersion = 1;
constexpr std::size_t kSampleChunk = 64;

bool keeps(std::uint32_t mask, std::size_t feature) { return (mask >> feature) & 1u; }

/// Two-class softmax of one row of logits.
std::array<double, 2> softmax2(double z0, double z1) {
  const double m = std::max(z0, z1);
  const double e0 = std::exp(z0 - m);
  const double e1 = std::exp(z1 - m);
  const double s = e0 + e1;
  return {e0 / s, e1 / s};
}

/// d(loss)/d(logit_j) = G * (p_j - [j == c]); this returns G.
double loss_scale(double p_c, const FocalLossConfig& cfg, SampleLabel c, ClassifierLoss kind) {
  const double alpha = cfg.alpha_c[static_cast<std::size_t>(c)];
  if (kind == ClassifierLoss::kWeightedCrossEntropy) return alpha;
  const double p = std::max(p_c, kMinProbability);
  const double q = 1.0 - p;
  const double focus = cfg.gamma > 0.0 && q > 0.0 ? cfg.gamma * p * std::pow(q, cfg.gamma - 1.0) * std::log(p) : 0.0;
  return alpha * (std::pow(q, cfg.gamma) - focus);
}

double sample_loss(double p_c, const FocalLossConfig& cfg, SampleLabel c, ClassifierLoss kind) {
  if (kind == ClassifierLoss::kWeightedCrossEntropy) {
    return -cfg.alpha_c[static_cast<std::size_t>(c)] * std::log(std::max(p_c, kMinProbability));
  }
  return focal_loss(p_c, cfg, c);
}

}  // namespace

FeatureVector extract_features(const DecoderStepOutput& step) {
  FeatureVector f;
  f.p_top1 = step.dist.size() > 0 ? step.dist.maxCoeff() : 0.0;
  f.h_norm = step.hidden.norm();
  f.max_attn = step.attn.size() > 0 ? step.attn.maxCoeff() : 0.0;
  return f;
}

std::size_t nmt_rank(const Vector& dist, TokenId token) {
  if (token >= static_cast<std::size_t>(dist.size())) throw ValidationError("nmt_rank: token outside vocabulary");
  const double p = dist[token];
  std::size_t rank = 0;
  for (Eigen::Index j = 0; j < dist.size(); ++j) {
    if (dist[j] > p || (dist[j] == p && static_cast<std::size_t>(j) < token)) ++rank;
  }
  return rank;
}

SampleLabel label_from_meta(const SampleMeta& meta, LabelCriteria criteria) {
  bool conduct = false;
  switch (criteria) {
    case LabelCriteria::kRetrievability:
      conduct = meta.nmt_rank != 0 && meta.in_neighbors;
      break;
    case LabelCriteria::kKnnBeatsNmt:
      conduct = meta.in_neighbors && meta.p_knn_target >= meta.p_nmt_target;
      break;
  }
  return conduct ? SampleLabel::kConduct : SampleLabel::kSkip;
}

std::vector<TrainingSample> build_training_samples(const ModelParams& params, const Datastore& store,
                                                   std::span<const ParallelPair> pairs, const KnnConfig& knn,
                                                   LabelCriteria criteria) {
  if (pairs.empty()) throw ValidationError("build_training_samples: empty split");
  knn.validate();
  check_compatible(params, store);

  std::vector<TrainingSample> samples;
  for (std::size_t chunk = 0; chunk < pairs.size(); chunk += kSampleChunk) {
    const std::size_t end = std::min(pairs.size(), chunk + kSampleChunk);
    std::vector<DecoderStepOutput> steps;
    std::vector<std::size_t> owner;
    std::vector<std::size_t> timestep;
    for (std::size_t i = chunk; i < end; ++i) {
      auto outs = teacher_force_pass(params, pairs[i]);
      for (std::size_t t = 0; t < outs.size(); ++t) {
        steps.push_back(std::move(outs[t]));
        owner.push_back(i);
        timestep.push_back(t);
      }
    }
    std::vector<std::span<const double>> queries;
    queries.reserve(steps.size());
    for (const auto& s : steps) queries.emplace_back(s.hidden.data(), static_cast<std::size_t>(s.hidden.size()));
    const auto neighbors = query_knn_batch(store, queries, knn.k);

    for (std::size_t s = 0; s < steps.size(); ++s) {
      TrainingSample sample;
      sample.features = extract_features(steps[s]);
      sample.timestep = timestep[s];
      SampleMeta& meta = sample.meta;
      meta.pair_id = owner[s];
      meta.target = pairs[owner[s]].target[timestep[s]];
      meta.nmt_rank = nmt_rank(steps[s].dist, meta.target);
      meta.p_nmt_target = steps[s].dist[meta.target];
      meta.in_neighbors = std::any_of(neighbors[s].begin(), neighbors[s].end(),
                                      [&](const Neighbor& n) { return n.value == meta.target; });
      if (!neighbors[s].empty()) {
        meta.p_knn_target = knn_distribution(neighbors[s], knn.temperature, params.vocab_size())[meta.target];
      }
      sample.label = label_from_meta(meta, criteria);
      samples.push_back(sample);
    }
  }
  return samples;
}

void FocalLossConfig::validate() const {
  if (!(alpha_c[0] > 0.0 && alpha_c[1] > 0.0)) throw ValidationError("classifier.alpha_c entries must be > 0");
  if (!(gamma >= 0.0)) throw ValidationError("classifier.gamma must be >= 0");
}

FocalLossConfig FocalLossConfig::balanced(std::span<const TrainingSample> samples, double gamma) {
  FocalLossConfig cfg;
  cfg.gamma = gamma;
  const auto skip = static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [](const auto& s) { return s.label == SampleLabel::kSkip; }));
  if (skip == 0 || skip == samples.size()) return cfg;
  const double conduct_weight = static_cast<double>(skip) / static_cast<double>(samples.size());
  cfg.alpha_c = {1.0 - conduct_weight, conduct_weight};
  return cfg;
}

double focal_loss(double p_c, const FocalLossConfig& cfg, SampleLabel c) {
  const double p = std::max(p_c, kMinProbability);
  return -cfg.alpha_c[static_cast<std::size_t>(c)] * std::pow(1.0 - p, cfg.gamma) * std::log(p);
}

void ThresholdSchedule::validate() const {
  if (!(alpha_min >= 0.0 && alpha_min <= 0.5)) throw ValidationError("schedule.alpha_min must be in [0, 0.5]");
  if (!(T > 0.0) || !std::isfinite(T)) throw ValidationError("schedule.T must be > 0");
}

double threshold_at(const ThresholdSchedule& sched, std::size_t t) {
  const double c = std::clamp(static_cast<double>(t) / sched.T, 0.0, 1.0);
  return sched.alpha_min + c * c * (0.5 - sched.alpha_min);
}

SkipClassifier SkipClassifier::zeros() {
  SkipClassifier c;
  c.w1 = RowMatrix::Zero(FeatureVector::kCount, kHidden);
  c.b1 = Vector::Zero(kHidden);
  c.w2 = RowMatrix::Zero(kHidden, kClasses);
  c.b2 = Vector::Zero(kClasses);
  return c;
}

SkipClassifier SkipClassifier::init(std::uint64_t seed) {
  SkipClassifier c = zeros();
  Rng rng(derive_seed(seed, fnv1a("skip-classifier")));
  const double l1 = std::sqrt(6.0 / static_cast<double>(FeatureVector::kCount + kHidden));
  const double l2 = std::sqrt(6.0 / static_cast<double>(kHidden + kClasses));
  for (Eigen::Index i = 0; i < c.w1.size(); ++i) c.w1.data()[i] = rng.uniform(-l1, l1);
  for (Eigen::Index i = 0; i < c.w2.size(); ++i) c.w2.data()[i] = rng.uniform(-l2, l2);
  return c;
}

bool SkipClassifier::operator==(const SkipClassifier& o) const {
  return bn == o.bn && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2 && feature_mask == o.feature_mask &&
         schedule == o.schedule && trained == o.trained;
}

double retrieve_probability(const SkipClassifier& clf, const FeatureVector& features) {
  if (!clf.trained) throw StateError("retrieve_probability: classifier is not trained");
  const auto x = features.values();
  Vector h = clf.b1;
  for (std::size_t f = 0; f < FeatureVector::kCount; ++f) {
    if (!keeps(clf.feature_mask, f)) continue;
    const double xn = (x[f] - clf.bn.running_mean[f]) / std::sqrt(clf.bn.running_var[f] + clf.bn.epsilon);
    h += xn * clf.w1.row(static_cast<Eigen::Index>(f)).transpose();
  }
  h = h.cwiseMax(0.0);
  const double z0 = clf.b2[0] + h.dot(clf.w2.col(0));
  const double z1 = clf.b2[1] + h.dot(clf.w2.col(1));
  return softmax2(z0, z1)[1];
}

DrDecision dr_skip_decision(const SkipClassifier& clf, const ThresholdSchedule& sched, const FeatureVector& features,
                            std::size_t t) {
  DrDecision d;
  d.p_retrieve = retrieve_probability(clf, features);
  d.alpha_t = threshold_at(sched, t);
  d.skip = !(d.p_retrieve > d.alpha_t);
  return d;
}

ClassifierGradient classifier_loss_gradient(const SkipClassifier& clf, const RowMatrix& inputs,
                                            std::span<const SampleLabel> labels, const FocalLossConfig& loss_cfg,
                                            ClassifierLoss kind) {
  const auto m = inputs.rows();
  if (m == 0 || static_cast<std::size_t>(m) != labels.size() || inputs.cols() != FeatureVector::kCount) {
    throw ValidationError("classifier_loss_gradient: inputs must be m x 3 with m labels, m >= 1");
  }
  const double inv_m = 1.0 / static_cast<double>(m);

  // Batch normalisation with biased batch variance.
  const Eigen::RowVectorXd mu = inputs.colwise().mean();
  RowMatrix centered = inputs.rowwise() - mu;
  const Eigen::RowVectorXd var = centered.cwiseAbs2().colwise().mean();
  Eigen::RowVectorXd scale(FeatureVector::kCount);
  for (Eigen::Index f = 0; f < scale.size(); ++f) scale[f] = std::sqrt(var[f] + clf.bn.epsilon);
  RowMatrix xhat = centered.array().rowwise() / scale.array();
  RowMatrix xin = xhat;
  for (std::size_t f = 0; f < FeatureVector::kCount; ++f) {
    if (!keeps(clf.feature_mask, f)) xin.col(static_cast<Eigen::Index>(f)).setZero();
  }

  RowMatrix pre = xin * clf.w1;
  pre.rowwise() += clf.b1.transpose();
  const RowMatrix act = pre.cwiseMax(0.0);
  RowMatrix logits = act * clf.w2;
  logits.rowwise() += clf.b2.transpose();

  ClassifierGradient out;
  RowMatrix dlogits(m, 2);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto p = softmax2(logits(i, 0), logits(i, 1));
    const auto c = labels[static_cast<std::size_t>(i)];
    const auto ci = static_cast<std::size_t>(c);
    out.loss += sample_loss(p[ci], loss_cfg, c, kind);
    const double g = loss_scale(p[ci], loss_cfg, c, kind) * inv_m;
    dlogits(i, 0) = g * (p[0] - (ci == 0 ? 1.0 : 0.0));
    dlogits(i, 1) = g * (p[1] - (ci == 1 ? 1.0 : 0.0));
  }
  out.loss *= inv_m;

  out.grad = SkipClassifier::zeros();
  out.grad.w2 = act.transpose() * dlogits;
  out.grad.b2 = dlogits.colwise().sum().transpose();
  RowMatrix dpre = dlogits * clf.w2.transpose();
  dpre = (pre.array() > 0.0).select(dpre, 0.0);
  out.grad.w1 = xin.transpose() * dpre;
  out.grad.b1 = dpre.colwise().sum().transpose();

  RowMatrix dxhat = dpre * clf.w1.transpose();
  for (std::size_t f = 0; f < FeatureVector::kCount; ++f) {
    if (!keeps(clf.feature_mask, f)) dxhat.col(static_cast<Eigen::Index>(f)).setZero();
  }
  const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
  const Eigen::RowVectorXd sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
  out.input_grad.resize(m, FeatureVector::kCount);
  for (Eigen::Index f = 0; f < scale.size(); ++f) {
    for (Eigen::Index i = 0; i < m; ++i) {
      out.input_grad(i, f) =
          (static_cast<double>(m) * dxhat(i, f) - sum_d[f] - xhat(i, f) * sum_dx[f]) * inv_m / scale[f];
    }
  }
  return out;
}

void ClassifierTrainConfig::validate() const {
  if (epochs == 0) throw ValidationError("classifier.epochs must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("classifier.lr must be > 0");
  if (batch_size == 0) throw ValidationError("classifier.batch_size must be >= 1");
  if (feature_mask == 0 || feature_mask > SkipClassifier::kAllFeatures) {
    throw ValidationError("classifier.features must keep at least one of the three features");
  }
}

F1Result classifier_f1(const SkipClassifier& clf, const ThresholdSchedule& sched,
                       std::span<const TrainingSample> samples) {
  std::vector<bool> predicted(samples.size());
  std::vector<bool> gold(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    predicted[i] = !dr_skip_decision(clf, sched, samples[i].features, samples[i].timestep).skip;
    gold[i] = samples[i].label == SampleLabel::kConduct;
  }
  return binary_f1(predicted, gold);
}

ClassifierTrainResult train_classifier(std::span<const TrainingSample> train, std::span<const TrainingSample> heldout,
                                       const FocalLossConfig& loss_cfg, const ClassifierTrainConfig& cfg,
                                       const ThresholdSchedule& schedule) {
  if (train.empty()) throw ValidationError("train_classifier: no training samples");
  loss_cfg.validate();
  cfg.validate();
  schedule.validate();

  ClassifierTrainResult result;
  const auto conduct = std::count_if(train.begin(), train.end(),
                                     [](const auto& s) { return s.label == SampleLabel::kConduct; });
  result.single_class = conduct == 0 || static_cast<std::size_t>(conduct) == train.size();

  SkipClassifier clf = SkipClassifier::init(cfg.seed);
  clf.feature_mask = cfg.feature_mask;
  clf.schedule = schedule;
  clf.trained = true;
  result.classifier = clf;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  bool have_best = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 2000 + epoch));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto m = static_cast<Eigen::Index>(end - start);
      RowMatrix x(m, FeatureVector::kCount);
      std::vector<SampleLabel> labels(static_cast<std::size_t>(m));
      for (Eigen::Index i = 0; i < m; ++i) {
        const auto& s = train[order[start + static_cast<std::size_t>(i)]];
        const auto v = s.features.values();
        for (std::size_t f = 0; f < FeatureVector::kCount; ++f) x(i, static_cast<Eigen::Index>(f)) = v[f];
        labels[static_cast<std::size_t>(i)] = s.label;
      }
      const auto g = classifier_loss_gradient(clf, x, labels, loss_cfg, cfg.loss);
      if (!std::isfinite(g.loss)) throw TrainingDiverged("train_classifier", epoch, batches);
      clf.w1 -= cfg.lr * g.grad.w1;
      clf.b1 -= cfg.lr * g.grad.b1;
      clf.w2 -= cfg.lr * g.grad.w2;
      clf.b2 -= cfg.lr * g.grad.b2;

      if (m >= 2) {
        const double mom = clf.bn.momentum;
        const Eigen::RowVectorXd mu = x.colwise().mean();
        for (std::size_t f = 0; f < FeatureVector::kCount; ++f) {
          const auto fi = static_cast<Eigen::Index>(f);
          const double var = (x.col(fi).array() - mu[fi]).square().sum() / static_cast<double>(m - 1);
          clf.bn.running_mean[f] = (1.0 - mom) * clf.bn.running_mean[f] + mom * mu[fi];
          clf.bn.running_var[f] = (1.0 - mom) * clf.bn.running_var[f] + mom * var;
        }
      }
      loss_sum += g.loss;
      ++batches;
    }

    ClassifierEpoch log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / static_cast<double>(batches);
    if (!heldout.empty()) log.heldout = classifier_f1(clf, schedule, heldout);
    result.history.push_back(log);

    const bool better = log.heldout.defined && (!have_best || log.heldout.f1 > result.best_heldout.f1);
    if (better) {
      have_best = true;
      result.classifier = clf;
      result.best_epoch = epoch;
      result.best_heldout = log.heldout;
    } else if (!have_best) {
      result.classifier = clf;
      result.best_epoch = epoch;
      result.best_heldout = log.heldout;
    }
  }
  return result;
}

namespace {

constexpr const char* kSampleHeader =
    "pair_id,timestep,target,nmt_rank,in_neighbors,p_nmt_target,p_knn_target,p_top1,h_norm,max_attn,label";

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void save_samples(std::span<const TrainingSample> samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << kSampleHeader << '\n';
  for (const auto& s : samples) {
    const auto& m = s.meta;
    out << m.pair_id << ',' << s.timestep << ',' << m.target << ',' << m.nmt_rank << ',' << (m.in_neighbors ? 1 : 0)
        << ',' << exact(m.p_nmt_target) << ',' << exact(m.p_knn_target) << ',' << exact(s.features.p_top1) << ','
        << exact(s.features.h_norm) << ',' << exact(s.features.max_attn) << ',' << static_cast<int>(s.label) << '\n';
  }
  out.close();
  if (!out) throw IoError("write failed: " + path);
}

std::vector<TrainingSample> load_samples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line) || line != kSampleHeader) throw ParseError(path, line_no, "missing sample header");
  std::vector<TrainingSample> out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t comma; (comma = line.find(',', start)) != std::string::npos; start = comma + 1) {
      cells.push_back(line.substr(start, comma - start));
    }
    cells.push_back(line.substr(start));
    if (cells.size() != 11) throw ParseError(path, line_no, "expected 11 columns");
    auto integer = [&](const std::string& c) {
      std::size_t v = 0;
      const auto [ptr, ec] = std::from_chars(c.data(), c.data() + c.size(), v);
      if (ec != std::errc() || ptr != c.data() + c.size()) throw ParseError(path, line_no, "bad integer '" + c + "'");
      return v;
    };
    auto real = [&](const std::string& c) {
      char* end = nullptr;
      const double v = std::strtod(c.c_str(), &end);
      if (c.empty() || end != c.c_str() + c.size() || !std::isfinite(v)) {
        throw ParseError(path, line_no, "bad number '" + c + "'");
      }
      return v;
    };
    TrainingSample s;
    s.meta.pair_id = integer(cells[0]);
    s.timestep = integer(cells[1]);
    s.meta.target = static_cast<TokenId>(integer(cells[2]));
    s.meta.nmt_rank = integer(cells[3]);
    const auto in_nb = integer(cells[4]);
    const auto label = integer(cells[10]);
    if (in_nb > 1 || label > 1) throw ParseError(path, line_no, "flags must be 0 or 1");
    s.meta.in_neighbors = in_nb == 1;
    s.meta.p_nmt_target = real(cells[5]);
    s.meta.p_knn_target = real(cells[6]);
    s.features.p_top1 = real(cells[7]);
    s.features.h_norm = real(cells[8]);
    s.features.max_attn = real(cells[9]);
    s.label = static_cast<SampleLabel>(label);
    out.push_back(s);
  }
  return out;
}

void save_classifier(const SkipClassifier& clf, const std::string& path) {
  io::BinaryWriter w(path);
  w.magic("RGSC");
  w.u32(kClassifierVersion);
  w.u32(FeatureVector::kCount);
  w.u32(SkipClassifier::kHidden);
  w.u32(SkipClassifier::kClasses);
  w.u32(clf.feature_mask);
  w.u32(clf.trained ? 1 : 0);
  w.f64(clf.bn.momentum);
  w.f64(clf.bn.epsilon);
  w.f64s(clf.bn.running_mean);
  w.f64s(clf.bn.running_var);
  w.f64s({clf.w1.data(), static_cast<std::size_t>(clf.w1.size())});
  w.f64s({clf.b1.data(), static_cast<std::size_t>(clf.b1.size())});
  w.f64s({clf.w2.data(), static_cast<std::size_t>(clf.w2.size())});
  w.f64s({clf.b2.data(), static_cast<std::size_t>(clf.b2.size())});
  w.f64(clf.schedule.alpha_min);
  w.f64(clf.schedule.T);
  w.close();
}

SkipClassifier load_classifier(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic("RGSC");
  const auto version = r.u32();
  if (version != kClassifierVersion) {
    throw FormatError(path + ": unsupported classifier version " + std::to_string(version));
  }
  const auto features = r.u32();
  const auto hidden = r.u32();
  const auto classes = r.u32();
  if (features != FeatureVector::kCount || hidden != SkipClassifier::kHidden || classes != SkipClassifier::kClasses) {
    throw FormatError(path + ": unexpected classifier shape");
  }
  SkipClassifier clf = SkipClassifier::zeros();
  clf.feature_mask = r.u32();
  clf.trained = r.u32() != 0;
  clf.bn.momentum = r.f64();
  clf.bn.epsilon = r.f64();
  r.f64s(clf.bn.running_mean);
  r.f64s(clf.bn.running_var);
  r.f64s({clf.w1.data(), static_cast<std::size_t>(clf.w1.size())});
  r.f64s({clf.b1.data(), static_cast<std::size_t>(clf.b1.size())});
  r.f64s({clf.w2.data(), static_cast<std::size_t>(clf.w2.size())});
  r.f64s({clf.b2.data(), static_cast<std::size_t>(clf.b2.size())});
  clf.schedule.alpha_min = r.f64();
  clf.schedule.T = r.f64();
  r.expect_end();
  return clf;
}

}  // namespace knndr
