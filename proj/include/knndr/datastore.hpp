#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "knndr/corpus.hpp"
#include "knndr/model.hpp"

namespace knndr {

struct Neighbor {
  std::size_t index = 0;
  TokenId value = 0;
  double distance = 0.0;  ///< squared L2

  bool operator==(const Neighbor&) const = default;
};

struct DatastoreMeta {
  std::uint64_t corpus_hash = 0;
  std::uint64_t model_hash = 0;
};

/// Immutable key-value memory of decoder states (f32 keys, row-major) and target tokens.
class Datastore {
 public:
  Datastore() = default;
  Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values, DatastoreMeta meta = {});

  std::size_t size() const { return values_.size(); }
  std::size_t dim() const { return dim_; }
  bool empty() const { return values_.empty(); }

  std::span<const float> key(std::size_t row) const { return {keys_.data() + row * dim_, dim_}; }
  TokenId value(std::size_t row) const { return values_[row]; }
  std::span<const float> keys() const { return keys_; }
  std::span<const TokenId> values() const { return values_; }
  const DatastoreMeta& meta() const { return meta_; }

  /// Bitwise equality of keys and values.
  bool operator==(const Datastore& other) const;

 private:
  std::size_t dim_ = 0;
  std::vector<float> keys_;
  std::vector<TokenId> values_;
  DatastoreMeta meta_;
};

std::uint64_t hash_pairs(std::span<const ParallelPair> pairs);

/// Teacher-forces every pair; one row per target position, in corpus order.
Datastore build_datastore(const ModelParams& params, std::span<const ParallelPair> corpus);

/// Throws ValidationError when model hidden size and key dimension differ.
void check_compatible(const ModelParams& params, const Datastore& store);

/// Squared L2 between a double query and an f32 key, accumulated in double.
double squared_l2(std::span<const double> query, std::span<const float> key);

/// Exact k nearest rows, ascending by (distance, row index). k = 0 throws ValidationError.
std::vector<Neighbor> query_knn(const Datastore& store, std::span<const double> query, std::size_t k);

/// Same results as calling query_knn per query; scans the keys once in cache-sized blocks.
std::vector<std::vector<Neighbor>> query_knn_batch(const Datastore& store,
                                                   std::span<const std::span<const double>> queries, std::size_t k);

/// Sorted row ids kept by prune_random for the given arguments.
std::vector<std::size_t> prune_indices(std::size_t rows, double keep_fraction, std::uint64_t seed);

/// Keeps round(keep_fraction * N) rows sampled uniformly without replacement, in original order.
Datastore prune_random(const Datastore& store, double keep_fraction, std::uint64_t seed);

/// Layout: "KVDS", version u32, d u32, reserved u32, N u64, keys f32[N*d], values u32[N].
void save_store(const Datastore& store, const std::string& path);
Datastore load_store(const std::string& path);

/// Size in bytes of a store file with N rows of dimension d.
constexpr std::uint64_t store_file_size(std::uint64_t rows, std::uint64_t dim) { return 24 + rows * dim * 4 + rows * 4; }

}  // namespace knndr
