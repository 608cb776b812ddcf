#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "knndr/datastore.hpp"
#include "knndr/knn.hpp"
#include "knndr/metrics.hpp"
#include "knndr/model.hpp"

namespace knndr {

/// Scalar signals read off one decoding step.
struct FeatureVector {
  static constexpr std::size_t kCount = 3;

  double p_top1 = 0.0;    ///< max of the model distribution
  double h_norm = 0.0;    ///< L2 norm of the hidden state
  double max_attn = 0.0;  ///< max source attention weight

  std::array<double, kCount> values() const { return {p_top1, h_norm, max_attn}; }
  bool operator==(const FeatureVector&) const = default;
};

FeatureVector extract_features(const DecoderStepOutput& step);

enum class SampleLabel : std::uint8_t { kSkip = 0, kConduct = 1 };

/// How a teacher-forced step is labelled.
enum class LabelCriteria {
  /// conduct iff the gold token is not the model's argmax but appears among the k neighbors
  kRetrievability,
  /// conduct iff p_knn(gold) >= p_nmt(gold); the conventional comparison, kept for ablation
  kKnnBeatsNmt,
};

struct SampleMeta {
  std::size_t pair_id = 0;
  TokenId target = 0;
  std::size_t nmt_rank = 0;  ///< 0 means the gold token is the argmax (lowest id wins ties)
  bool in_neighbors = false;
  double p_nmt_target = 0.0;
  double p_knn_target = 0.0;  ///< 0 when no neighbors were retrieved

  bool operator==(const SampleMeta&) const = default;
};

struct TrainingSample {
  FeatureVector features;
  SampleLabel label = SampleLabel::kSkip;
  std::size_t timestep = 0;
  SampleMeta meta;

  bool operator==(const TrainingSample&) const = default;
};

/// Number of tokens ranked ahead of `token`: strictly more probable, or equally probable with a lower id.
std::size_t nmt_rank(const Vector& dist, TokenId token);

SampleLabel label_from_meta(const SampleMeta& meta, LabelCriteria criteria = LabelCriteria::kRetrievability);

/// One sample per teacher-forced step of every pair. Throws ValidationError on an empty split.
std::vector<TrainingSample> build_training_samples(const ModelParams& params, const Datastore& store,
                                                   std::span<const ParallelPair> pairs, const KnnConfig& knn,
                                                   LabelCriteria criteria = LabelCriteria::kRetrievability);

struct FocalLossConfig {
  std::array<double, 2> alpha_c{1.0, 1.0};  ///< indexed by SampleLabel
  double gamma = 2.0;

  void validate() const;
  /// alpha_conduct = N_skip / N, alpha_skip = 1 - alpha_conduct. Falls back to (1, 1) for a
  /// single-class set, where the ratio would zero one weight.
  static FocalLossConfig balanced(std::span<const TrainingSample> samples, double gamma);
};

constexpr double kMinProbability = 1e-12;

/// -alpha_c (1 - p)^gamma ln p, with p clamped below at kMinProbability.
double focal_loss(double p_c, const FocalLossConfig& cfg, SampleLabel c);

/// alpha_t = alpha_min + clip(t / T, 0, 1)^2 (0.5 - alpha_min).
struct ThresholdSchedule {
  double alpha_min = 0.4;
  double T = 20.0;

  void validate() const;
  bool operator==(const ThresholdSchedule&) const = default;
};

double threshold_at(const ThresholdSchedule& sched, std::size_t t);

struct BatchNormStats {
  std::array<double, FeatureVector::kCount> running_mean{0.0, 0.0, 0.0};
  std::array<double, FeatureVector::kCount> running_var{1.0, 1.0, 1.0};
  double momentum = 0.1;
  double epsilon = 1e-5;

  bool operator==(const BatchNormStats&) const = default;
};

/// Batch norm (no affine terms) -> Linear(3, 32) -> ReLU -> Linear(32, 2) -> softmax.
struct SkipClassifier {
  static constexpr std::size_t kHidden = 32;
  static constexpr std::size_t kClasses = 2;
  static constexpr std::uint32_t kAllFeatures = 0b111;

  BatchNormStats bn;
  RowMatrix w1;  ///< 3 x 32
  Vector b1;
  RowMatrix w2;  ///< 32 x 2
  Vector b2;
  std::uint32_t feature_mask = kAllFeatures;  ///< bit i keeps feature i; cleared features are zeroed after normalisation
  ThresholdSchedule schedule;
  bool trained = false;

  static SkipClassifier zeros();
  /// Uniform Glorot initialisation, zero biases.
  static SkipClassifier init(std::uint64_t seed);
  bool operator==(const SkipClassifier& other) const;
};

/// Probability of the conduct class, normalising with the running statistics.
/// Throws StateError for an untrained classifier.
double retrieve_probability(const SkipClassifier& clf, const FeatureVector& features);

struct DrDecision {
  bool skip = true;
  double p_retrieve = 0.0;
  double alpha_t = 0.0;
};

/// Retrieve only when p_retrieve > alpha_t (strict).
DrDecision dr_skip_decision(const SkipClassifier& clf, const ThresholdSchedule& sched, const FeatureVector& features,
                            std::size_t t);

enum class ClassifierLoss { kFocal, kWeightedCrossEntropy };

/// Mean loss of a mini-batch in training mode (batch statistics) with gradients
/// for the weights and for the raw input features.
struct ClassifierGradient {
  double loss = 0.0;
  SkipClassifier grad;  ///< only w1, b1, w2, b2 are meaningful
  RowMatrix input_grad;  ///< m x 3
};
ClassifierGradient classifier_loss_gradient(const SkipClassifier& clf, const RowMatrix& inputs,
                                            std::span<const SampleLabel> labels, const FocalLossConfig& loss_cfg,
                                            ClassifierLoss kind = ClassifierLoss::kFocal);

struct ClassifierTrainConfig {
  std::size_t epochs = 50;
  double lr = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  ClassifierLoss loss = ClassifierLoss::kFocal;
  std::uint32_t feature_mask = SkipClassifier::kAllFeatures;

  void validate() const;
};

struct ClassifierEpoch {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  F1Result heldout;
};

struct ClassifierTrainResult {
  SkipClassifier classifier;
  std::size_t best_epoch = 0;
  F1Result best_heldout;
  bool single_class = false;
  std::vector<ClassifierEpoch> history;
};

/// Mini-batch SGD. After every epoch the held-out conduct F1 is measured with
/// dr_skip_decision under `schedule`; the best epoch (earliest on ties) is returned.
/// With no held-out positives the last epoch is kept. Throws TrainingDiverged on a
/// non-finite loss.
ClassifierTrainResult train_classifier(std::span<const TrainingSample> train, std::span<const TrainingSample> heldout,
                                       const FocalLossConfig& loss_cfg, const ClassifierTrainConfig& cfg,
                                       const ThresholdSchedule& schedule);

/// Teacher-forced conduct F1 of dr_skip_decision against the stored labels.
F1Result classifier_f1(const SkipClassifier& clf, const ThresholdSchedule& sched,
                       std::span<const TrainingSample> samples);

/// CSV with a header row; reals are written with 17 significant digits so they
/// read back exactly. Columns: pair_id,timestep,target,nmt_rank,in_neighbors,
/// p_nmt_target,p_knn_target,p_top1,h_norm,max_attn,label.
void save_samples(std::span<const TrainingSample> samples, const std::string& path);
std::vector<TrainingSample> load_samples(const std::string& path);

/// Binary file, magic "RGSC"; f64 elements so round trips are exact.
void save_classifier(const SkipClassifier& clf, const std::string& path);
SkipClassifier load_classifier(const std::string& path);

}  // namespace knndr
