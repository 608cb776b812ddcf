#pragma once

#include <cstddef>
#include <span>

#include "knndr/datastore.hpp"
#include "knndr/model.hpp"

namespace knndr {

/// Retrieval settings. Distances are squared L2, so `temperature` is on the
/// squared scale.
struct KnnConfig {
  std::size_t k = 8;
  double temperature = 10.0;
  double lambda = 0.7;

  /// Throws ValidationError unless k >= 1, temperature > 0, 0 <= lambda <= 1.
  void validate() const;
};

/// p(v) proportional to the sum over neighbors with value v of exp(-distance / temperature).
/// Weights are shifted by the minimum distance before exponentiation.
Vector knn_distribution(std::span<const Neighbor> neighbors, double temperature, std::size_t vocab_size);

/// lambda * p_knn + (1 - lambda) * p_nmt.
Vector interpolate(const Vector& p_knn, const Vector& p_nmt, double lambda);

}  // namespace knndr
