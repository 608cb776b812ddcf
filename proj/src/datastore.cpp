#include "knndr/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <queue>

#include "knndr/binary_io.hpp"
#include "knndr/error.hpp"
#include "knndr/rng.hpp"

namespace knndr {

namespace {

constexpr std::uint32_t kStoreVersion = 1;
constexpr std::size_t kRowBlock = 128;

/// Max-heap of the k best (distance, row) pairs seen so far.
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}

  /// Distances strictly above this can never enter the heap.
  double bound() const { return heap_.size() < k_ ? std::numeric_limits<double>::infinity() : heap_.top().distance; }

  void offer(double distance, std::size_t row) {
    const Entry e{distance, row};
    if (heap_.size() < k_) {
      heap_.push(e);
    } else if (e < heap_.top()) {
      heap_.pop();
      heap_.push(e);
    }
  }

  std::vector<Neighbor> sorted(const Datastore& store) {
    std::vector<Neighbor> out(heap_.size());
    for (std::size_t i = out.size(); i-- > 0;) {
      const Entry e = heap_.top();
      heap_.pop();
      out[i] = {e.row, store.value(e.row), e.distance};
    }
    return out;
  }

 private:
  struct Entry {
    double distance;
    std::size_t row;
    bool operator<(const Entry& o) const { return distance < o.distance || (distance == o.distance && row < o.row); }
  };
  std::size_t k_;
  std::priority_queue<Entry> heap_;
};

std::uint64_t fnv_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Datastore::Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values, DatastoreMeta meta)
    : dim_(dim), keys_(std::move(keys)), values_(std::move(values)), meta_(meta) {
  if (dim_ == 0) throw ValidationError("datastore key dimension must be >= 1");
  if (keys_.size() != values_.size() * dim_) throw ValidationError("datastore keys/values row count mismatch");
  for (float x : keys_) {
    if (!std::isfinite(x)) throw ValidationError("datastore keys must be finite");
  }
}

bool Datastore::operator==(const Datastore& other) const {
  return dim_ == other.dim_ && values_ == other.values_ && keys_.size() == other.keys_.size() &&
         std::memcmp(keys_.data(), other.keys_.data(), keys_.size() * sizeof(float)) == 0;
}

std::uint64_t hash_pairs(std::span<const ParallelPair> pairs) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : pairs) {
    const std::uint64_t lens[2] = {p.source.size(), p.target.size()};
    h = fnv_bytes(h, lens, sizeof lens);
    h = fnv_bytes(h, p.source.data(), p.source.size() * sizeof(TokenId));
    h = fnv_bytes(h, p.target.data(), p.target.size() * sizeof(TokenId));
  }
  return h;
}

Datastore build_datastore(const ModelParams& params, std::span<const ParallelPair> corpus) {
  if (corpus.empty()) throw ValidationError("build_datastore: empty corpus");
  check_consistent(params);
  const std::size_t d = params.hidden_dim();
  std::size_t rows = 0;
  for (const auto& p : corpus) rows += p.target.size();

  std::vector<float> keys;
  keys.reserve(rows * d);
  std::vector<TokenId> values;
  values.reserve(rows);
  for (const auto& pair : corpus) {
    const auto outs = teacher_force_pass(params, pair);
    for (std::size_t t = 0; t < outs.size(); ++t) {
      for (Eigen::Index i = 0; i < outs[t].hidden.size(); ++i) keys.push_back(static_cast<float>(outs[t].hidden[i]));
      values.push_back(pair.target[t]);
    }
  }
  return Datastore(d, std::move(keys), std::move(values), {hash_pairs(corpus), params.hash()});
}

void check_compatible(const ModelParams& params, const Datastore& store) {
  if (!store.empty() && store.dim() != params.hidden_dim()) {
    throw ValidationError("datastore key dimension " + std::to_string(store.dim()) + " != model hidden size " +
                          std::to_string(params.hidden_dim()));
  }
}

namespace {

using f64x8 = double __attribute__((vector_size(64)));
using f32x8 = float __attribute__((vector_size(32)));

inline double reduce_lanes(f64x8 acc, double tail) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

inline f64x8 lane_step(const double* q, const float* key, f64x8 acc) {
  f64x8 qv;
  f32x8 kv;
  std::memcpy(&qv, q, sizeof qv);
  std::memcpy(&kv, key, sizeof kv);
  const f64x8 diff = qv - __builtin_convertvector(kv, f64x8);
  return acc + diff * diff;
}

inline double tail_sum(const double* q, const float* key, std::size_t from, std::size_t d) {
  double tail = 0.0;
  for (std::size_t i = from; i < d; ++i) {
    const double diff = q[i] - static_cast<double>(key[i]);
    tail += diff * diff;
  }
  return tail;
}

/// Eight independent double lanes combined as a fixed tree, so every caller
/// reproduces squared_l2 bit for bit.
inline double l2_lanes(const double* q, const float* key, std::size_t d) {
  f64x8 acc = {0, 0, 0, 0, 0, 0, 0, 0};
  const std::size_t body = d - d % 8;
  for (std::size_t i = 0; i < body; i += 8) acc = lane_step(q + i, key + i, acc);
  return reduce_lanes(acc, tail_sum(q, key, body, d));
}

}  // namespace

double squared_l2(std::span<const double> query, std::span<const float> key) {
  return l2_lanes(query.data(), key.data(), query.size());
}

std::vector<Neighbor> query_knn(const Datastore& store, std::span<const double> query, std::size_t k) {
  const std::span<const double> one[] = {query};
  return std::move(query_knn_batch(store, one, k).front());
}

std::vector<std::vector<Neighbor>> query_knn_batch(const Datastore& store,
                                                   std::span<const std::span<const double>> queries,
                                                   std::size_t k) {
  if (k == 0) throw ValidationError("query_knn: k must be >= 1");
  for (const auto& q : queries) {
    if (!store.empty() && q.size() != store.dim()) {
      throw ValidationError("query_knn: query dimension " + std::to_string(q.size()) + " != key dimension " +
                            std::to_string(store.dim()));
    }
  }
  std::vector<TopK> heaps(queries.size(), TopK(k));
  const std::size_t n = store.size();
  const std::size_t d = store.dim();
  double dist[kRowBlock];
  for (std::size_t block = 0; block < n; block += kRowBlock) {
    const std::size_t end = std::min(n, block + kRowBlock);
    const float* keys = store.keys().data();
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
      const double* q = queries[qi].data();
      for (std::size_t row = block; row < end; ++row) dist[row - block] = l2_lanes(q, keys + row * d, d);
      double bound = heaps[qi].bound();
      for (std::size_t row = block; row < end; ++row) {
        if (dist[row - block] <= bound) {
          heaps[qi].offer(dist[row - block], row);
          bound = heaps[qi].bound();
        }
      }
    }
  }
  std::vector<std::vector<Neighbor>> out;
  out.reserve(queries.size());
  for (auto& h : heaps) out.push_back(h.sorted(store));
  return out;
}

std::vector<std::size_t> prune_indices(std::size_t rows, double keep_fraction, std::uint64_t seed) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ValidationError("prune_random: keep_fraction must be in (0, 1]");
  }
  const auto keep = static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(rows)));
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) idx[i] = i;
  Rng rng(derive_seed(seed, fnv1a("prune")));
  for (std::size_t i = 0; i < keep; ++i) std::swap(idx[i], idx[i + rng.below(rows - i)]);
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

Datastore prune_random(const Datastore& store, double keep_fraction, std::uint64_t seed) {
  const auto rows = prune_indices(store.size(), keep_fraction, seed);
  std::vector<float> keys;
  keys.reserve(rows.size() * store.dim());
  std::vector<TokenId> values;
  values.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto key = store.key(r);
    keys.insert(keys.end(), key.begin(), key.end());
    values.push_back(store.value(r));
  }
  return Datastore(store.dim(), std::move(keys), std::move(values), store.meta());
}

void save_store(const Datastore& store, const std::string& path) {
  io::BinaryWriter w(path);
  w.magic("KVDS");
  w.u32(kStoreVersion);
  w.u32(static_cast<std::uint32_t>(store.dim()));
  w.u32(0);
  w.u64(store.size());
  w.f32s(store.keys());
  w.u32s(store.values());
  w.close();
}

Datastore load_store(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic("KVDS");
  const auto version = r.u32();
  if (version != kStoreVersion) throw FormatError(path + ": unsupported store version " + std::to_string(version));
  const auto dim = r.u32();
  r.u32();
  const auto rows = r.u64();
  if (dim == 0) throw FormatError(path + ": zero key dimension");
  const auto actual = std::filesystem::file_size(path);
  const auto expected = store_file_size(rows, dim);
  if (actual < expected) {
    throw FormatError(path + ": truncated at byte offset " + std::to_string(actual) + ", layout needs " +
                      std::to_string(expected) + " bytes");
  }
  std::vector<float> keys(rows * dim);
  r.f32s(keys);
  std::vector<TokenId> values(rows);
  r.u32s(values);
  r.expect_end();
  return Datastore(dim, std::move(keys), std::move(values));
}

}  // namespace knndr
