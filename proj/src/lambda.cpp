#include "knndr/lambda.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knndr/binary_io.hpp"
#include "knndr/error.hpp"
#include "knndr/rng.hpp"

namespace knndr {

namespace {

constexpr std::uint32_t kEstimatorVersion = 1;

/// Logistic output kept strictly inside (0, 1) even where the double rounds to 0 or 1.
double squash(double s) {
  const double v = s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
  return std::clamp(v, kMinProbability, 1.0 - kMinProbability);
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct Forward {
  std::array<double, FeatureVector::kCount> x{};
  Vector pre;
  Vector act;
  double logit = 0.0;
  double lambda = 0.0;
};

Forward forward(const LambdaEstimator& est, const FeatureVector& features) {
  Forward f;
  const auto v = features.values();
  for (std::size_t i = 0; i < FeatureVector::kCount; ++i) {
    f.x[i] = (v[i] - est.mean[i]) / std::sqrt(est.var[i] + kLambdaNormEpsilon);
  }
  f.pre = est.b1;
  for (std::size_t i = 0; i < FeatureVector::kCount; ++i) {
    f.pre += f.x[i] * est.w1.row(static_cast<Eigen::Index>(i)).transpose();
  }
  f.act = f.pre.cwiseMax(0.0);
  f.logit = est.b2 + f.act.dot(est.w2);
  f.lambda = squash(f.logit);
  return f;
}

/// Loss of one sample and its derivative with respect to the logit.
std::pair<double, double> loss_and_slope(LambdaObjective mode, const Forward& f, const TrainingSample& s) {
  if (mode == LambdaObjective::kTran) {
    const double pk = s.meta.p_knn_target;
    const double pn = s.meta.p_nmt_target;
    const double mix = f.lambda * pk + (1.0 - f.lambda) * pn;
    if (mix < kMinProbability) return {-std::log(kMinProbability), 0.0};
    return {-std::log(mix), -(pk - pn) / mix * f.lambda * (1.0 - f.lambda)};
  }
  const double c = s.label == SampleLabel::kConduct ? 1.0 : 0.0;
  const double loss = c * softplus(-f.logit) + (1.0 - c) * softplus(f.logit);
  return {loss, f.lambda - c};
}

}  // namespace

LambdaEstimator LambdaEstimator::zeros(std::size_t hidden) {
  LambdaEstimator e;
  e.w1 = RowMatrix::Zero(FeatureVector::kCount, static_cast<Eigen::Index>(hidden));
  e.b1 = Vector::Zero(static_cast<Eigen::Index>(hidden));
  e.w2 = Vector::Zero(static_cast<Eigen::Index>(hidden));
  return e;
}

LambdaEstimator LambdaEstimator::init(std::size_t hidden, std::uint64_t seed) {
  LambdaEstimator e = zeros(hidden);
  Rng rng(derive_seed(seed, fnv1a("lambda-estimator")));
  const double l1 = std::sqrt(6.0 / static_cast<double>(FeatureVector::kCount + hidden));
  const double l2 = std::sqrt(6.0 / static_cast<double>(hidden + 1));
  for (Eigen::Index i = 0; i < e.w1.size(); ++i) e.w1.data()[i] = rng.uniform(-l1, l1);
  for (Eigen::Index i = 0; i < e.w2.size(); ++i) e.w2[i] = rng.uniform(-l2, l2);
  return e;
}

bool LambdaEstimator::operator==(const LambdaEstimator& o) const {
  return mode == o.mode && mean == o.mean && var == o.var && w1 == o.w1 && b1 == o.b1 && w2 == o.w2 && b2 == o.b2 &&
         trained == o.trained;
}

void ArConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValidationError("ar.alpha must be in [0, 1]");
  if (hidden == 0) throw ValidationError("ar.hidden must be >= 1");
}

void LambdaTrainConfig::validate() const {
  if (hidden == 0) throw ValidationError("ar.hidden must be >= 1");
  if (epochs == 0) throw ValidationError("ar.epochs must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("ar.lr must be > 0");
  if (batch_size == 0) throw ValidationError("ar.batch_size must be >= 1");
}

double estimate_lambda(const LambdaEstimator& est, const FeatureVector& features) {
  if (!est.trained) throw StateError("estimate_lambda: estimator is not trained");
  return forward(est, features).lambda;
}

LambdaGradient lambda_loss_gradient(const LambdaEstimator& est, LambdaObjective mode,
                                    std::span<const TrainingSample> samples) {
  if (samples.empty()) throw ValidationError("lambda_loss_gradient: no samples");
  LambdaGradient g;
  g.grad = LambdaEstimator::zeros(est.hidden());
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (const auto& s : samples) {
    const Forward f = forward(est, s.features);
    const auto [loss, slope] = loss_and_slope(mode, f, s);
    g.loss += loss;
    const double ds = slope * inv_n;
    g.grad.b2 += ds;
    g.grad.w2 += ds * f.act;
    const Vector dpre = ((f.pre.array() > 0.0).cast<double>() * est.w2.array() * ds).matrix();
    g.grad.b1 += dpre;
    for (std::size_t i = 0; i < FeatureVector::kCount; ++i) {
      g.grad.w1.row(static_cast<Eigen::Index>(i)) += f.x[i] * dpre.transpose();
    }
  }
  g.loss *= inv_n;
  return g;
}

LambdaEstimator train_lambda(LambdaObjective mode, std::span<const TrainingSample> samples,
                             const LambdaTrainConfig& cfg) {
  if (samples.empty()) throw ValidationError("train_lambda: no samples");
  cfg.validate();
  LambdaEstimator est = LambdaEstimator::init(cfg.hidden, cfg.seed);
  est.mode = mode;

  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < FeatureVector::kCount; ++i) {
    double sum = 0.0;
    for (const auto& s : samples) sum += s.features.values()[i];
    est.mean[i] = sum / n;
    double sq = 0.0;
    for (const auto& s : samples) {
      const double d = s.features.values()[i] - est.mean[i];
      sq += d * d;
    }
    est.var[i] = sq / n;
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<TrainingSample> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, 3000 + epoch));
    rng.shuffle(order);
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(samples[order[i]]);
      const auto g = lambda_loss_gradient(est, mode, batch);
      if (!std::isfinite(g.loss)) throw TrainingDiverged("train_lambda", epoch, batch_index);
      est.w1 -= cfg.lr * g.grad.w1;
      est.b1 -= cfg.lr * g.grad.b1;
      est.w2 -= cfg.lr * g.grad.w2;
      est.b2 -= cfg.lr * g.grad.b2;
    }
  }
  est.trained = true;
  return est;
}

ArDecision ar_skip_decision(const LambdaEstimator& est, const FeatureVector& features, double alpha) {
  ArDecision d;
  d.lambda_hat = estimate_lambda(est, features);
  d.skip = d.lambda_hat < alpha;
  return d;
}

LambdaDivergence lambda_divergence_stats(const LambdaEstimator& tran, const LambdaEstimator& bina,
                                         std::span<const FeatureVector> stream) {
  if (stream.empty()) throw ValidationError("lambda_divergence_stats: empty stream");
  LambdaDivergence out;
  std::size_t above = 0;
  double sum = 0.0;
  for (const auto& f : stream) {
    const double diff = std::abs(estimate_lambda(bina, f) - estimate_lambda(tran, f));
    sum += diff;
    if (diff > 0.2) ++above;
  }
  out.count = stream.size();
  out.mean_abs_diff = sum / static_cast<double>(stream.size());
  out.frac_gt_02 = static_cast<double>(above) / static_cast<double>(stream.size());
  return out;
}

F1Result ar_skip_f1(const LambdaEstimator& est, double alpha, std::span<const TrainingSample> samples) {
  std::vector<bool> predicted(samples.size());
  std::vector<bool> gold(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    predicted[i] = !ar_skip_decision(est, samples[i].features, alpha).skip;
    gold[i] = samples[i].label == SampleLabel::kConduct;
  }
  return binary_f1(predicted, gold);
}

void save_estimator(const LambdaEstimator& est, const std::string& path) {
  io::BinaryWriter w(path);
  w.magic("RGLE");
  w.u32(kEstimatorVersion);
  w.u32(FeatureVector::kCount);
  w.u32(static_cast<std::uint32_t>(est.hidden()));
  w.u32(static_cast<std::uint32_t>(est.mode));
  w.u32(est.trained ? 1 : 0);
  w.f64s(est.mean);
  w.f64s(est.var);
  w.f64s({est.w1.data(), static_cast<std::size_t>(est.w1.size())});
  w.f64s({est.b1.data(), static_cast<std::size_t>(est.b1.size())});
  w.f64s({est.w2.data(), static_cast<std::size_t>(est.w2.size())});
  w.f64(est.b2);
  w.close();
}

LambdaEstimator load_estimator(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic("RGLE");
  const auto version = r.u32();
  if (version != kEstimatorVersion) {
    throw FormatError(path + ": unsupported estimator version " + std::to_string(version));
  }
  if (r.u32() != FeatureVector::kCount) throw FormatError(path + ": unexpected feature count");
  const auto hidden = r.u32();
  if (hidden == 0 || hidden > (1u << 16)) throw FormatError(path + ": implausible hidden size");
  const auto mode = r.u32();
  if (mode > 1) throw FormatError(path + ": unknown estimator mode");
  LambdaEstimator est = LambdaEstimator::zeros(hidden);
  est.mode = static_cast<LambdaObjective>(mode);
  est.trained = r.u32() != 0;
  r.f64s(est.mean);
  r.f64s(est.var);
  r.f64s({est.w1.data(), static_cast<std::size_t>(est.w1.size())});
  r.f64s({est.b1.data(), static_cast<std::size_t>(est.b1.size())});
  r.f64s({est.w2.data(), static_cast<std::size_t>(est.w2.size())});
  est.b2 = r.f64();
  r.expect_end();
  return est;
}

}  // namespace knndr
