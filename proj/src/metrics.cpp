#include "knndr/metrics.hpp"

#include "knndr/error.hpp"

namespace knndr {

F1Result binary_f1(const std::vector<bool>& predicted, const std::vector<bool>& gold) {
  if (predicted.size() != gold.size()) throw ValidationError("binary_f1: prediction and gold lengths differ");
  F1Result r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i] && gold[i]) ++r.true_positive;
    else if (predicted[i]) ++r.false_positive;
    else if (gold[i]) ++r.false_negative;
    else ++r.true_negative;
  }
  const auto tp = static_cast<double>(r.true_positive);
  const auto pp = static_cast<double>(r.true_positive + r.false_positive);
  const auto gp = static_cast<double>(r.true_positive + r.false_negative);
  r.defined = gp > 0;
  r.precision = pp > 0 ? tp / pp : 0.0;
  r.recall = gp > 0 ? tp / gp : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

}  // namespace knndr
