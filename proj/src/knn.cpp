#include "knndr/knn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "knndr/error.hpp"

namespace knndr {

void KnnConfig::validate() const {
  if (k < 1) throw ValidationError("knn.k must be >= 1");
  if (!(temperature > 0.0)) throw ValidationError("knn.temperature must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("knn.lambda must be in [0,1]");
}

Vector knn_distribution(std::span<const Neighbor> neighbors, double temperature, std::size_t vocab_size) {
  if (neighbors.empty()) throw ValidationError("knn_distribution: no neighbors");
  if (!(temperature > 0.0)) throw ValidationError("knn_distribution: temperature must be > 0");
  double d_min = neighbors.front().distance;
  for (const auto& n : neighbors) d_min = std::min(d_min, n.distance);

  Vector p = Vector::Zero(static_cast<Eigen::Index>(vocab_size));
  for (const auto& n : neighbors) {
    if (n.value >= vocab_size) {
      throw ValidationError("knn_distribution: neighbor value " + std::to_string(n.value) + " outside vocabulary");
    }
    p[n.value] += std::exp(-(n.distance - d_min) / temperature);
  }
  p /= p.sum();
  return p;
}

Vector interpolate(const Vector& p_knn, const Vector& p_nmt, double lambda) {
  if (p_knn.size() != p_nmt.size()) throw ValidationError("interpolate: distribution length mismatch");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("interpolate: lambda must be in [0,1]");
  return lambda * p_knn + (1.0 - lambda) * p_nmt;
}

}  // namespace knndr
