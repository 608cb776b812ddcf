#pragma once

#include <cstddef>
#include <vector>

namespace knndr {

/// Binary precision/recall/F1 with "conduct retrieval" as the positive class.
///
/// `defined` is false when the gold labels contain no positives; the scores are
/// then meaningless and must not be read as zero.
struct F1Result {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positive = 0;
  std::size_t false_positive = 0;
  std::size_t false_negative = 0;
  std::size_t true_negative = 0;
  bool defined = false;
};

/// predicted[i] / gold[i] are true for "conduct". Lengths must match.
F1Result binary_f1(const std::vector<bool>& predicted, const std::vector<bool>& gold);

}  // namespace knndr
