#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "knndr/classifier.hpp"
#include "knndr/metrics.hpp"
#include "knndr/model.hpp"

namespace knndr {

enum class LambdaObjective : std::uint32_t {
  kTran = 0,  ///< -log of the interpolated probability of the gold token
  kBina = 1,  ///< binary cross-entropy against the skip/conduct label
};

/// Adaptive-lambda estimator: standardised features -> Linear(3, H) -> ReLU -> Linear(H, 1) -> sigmoid.
struct LambdaEstimator {
  LambdaObjective mode = LambdaObjective::kTran;
  std::array<double, FeatureVector::kCount> mean{0.0, 0.0, 0.0};
  std::array<double, FeatureVector::kCount> var{1.0, 1.0, 1.0};
  RowMatrix w1;  ///< 3 x H
  Vector b1;
  Vector w2;  ///< H
  double b2 = 0.0;
  bool trained = false;

  static LambdaEstimator zeros(std::size_t hidden);
  static LambdaEstimator init(std::size_t hidden, std::uint64_t seed);
  std::size_t hidden() const { return static_cast<std::size_t>(b1.size()); }
  bool operator==(const LambdaEstimator& other) const;
};

struct ArConfig {
  double alpha = 0.25;
  std::size_t hidden = 32;

  void validate() const;
};

struct LambdaTrainConfig {
  std::size_t hidden = 32;
  std::size_t epochs = 30;
  double lr = 0.05;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Standardisation epsilon added to the feature variance.
constexpr double kLambdaNormEpsilon = 1e-5;

/// lambda-hat in (0, 1). Throws StateError for an untrained estimator.
double estimate_lambda(const LambdaEstimator& est, const FeatureVector& features);

/// Mean loss over the samples with gradients in `grad` (w1, b1, w2, b2 only).
/// Standardisation uses est.mean / est.var as fixed constants.
struct LambdaGradient {
  double loss = 0.0;
  LambdaEstimator grad;
};
LambdaGradient lambda_loss_gradient(const LambdaEstimator& est, LambdaObjective mode,
                                    std::span<const TrainingSample> samples);

/// Standardisation statistics come from the full sample set. Throws TrainingDiverged
/// on a non-finite loss and ValidationError on an empty set.
LambdaEstimator train_lambda(LambdaObjective mode, std::span<const TrainingSample> samples,
                             const LambdaTrainConfig& cfg);

struct ArDecision {
  bool skip = false;
  double lambda_hat = 0.0;
};

/// skip iff lambda_hat < alpha.
ArDecision ar_skip_decision(const LambdaEstimator& est, const FeatureVector& features, double alpha);

struct LambdaDivergence {
  double mean_abs_diff = 0.0;
  double frac_gt_02 = 0.0;
  std::size_t count = 0;
};

/// Mean |lambda_bina - lambda_tran| and the fraction of steps where it exceeds 0.2.
LambdaDivergence lambda_divergence_stats(const LambdaEstimator& tran, const LambdaEstimator& bina,
                                         std::span<const FeatureVector> stream);

/// Conduct-class F1 when lambda_hat >= alpha counts as conduct.
F1Result ar_skip_f1(const LambdaEstimator& est, double alpha, std::span<const TrainingSample> samples);

/// Binary file, magic "RGLE"; f64 elements.
void save_estimator(const LambdaEstimator& est, const std::string& path);
LambdaEstimator load_estimator(const std::string& path);

}  // namespace knndr
