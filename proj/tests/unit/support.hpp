#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "knndr/classifier.hpp"
#include "knndr/corpus.hpp"
#include "knndr/datastore.hpp"
#include "knndr/model.hpp"
#include "knndr/rng.hpp"

namespace testing {

using namespace knndr;

// Small domain-shift setup shared by the tests of one binary. Built once.
struct Tiny {
  Vocab vocab = Vocab::synthetic(40);
  DomainSpec general;
  DomainSpec domain;
  CorpusSplit general_split;
  CorpusSplit domain_split;
  ModelParams params;
  Datastore store;
  KnnConfig knn;
};

inline const Tiny& tiny() {
  static const Tiny t = [] {
    Tiny t;
    t.general = make_general_domain(t.vocab, 101, 0.01);
    t.domain = derive_domain(t.general, "it", 0.3, 0.05, 102);
    mix_domain_senses(t.general, t.domain, SenseMixing{}, 103);
    const LengthRange len{4, 12};
    t.general_split = generate_domain(t.general, t.vocab, {300, 40, 40}, len);
    t.domain_split = generate_domain(t.domain, t.vocab, {200, 60, 40}, len);
    ModelConfig mc;
    mc.d = 16;
    mc.d_ff = 24;
    mc.epochs = 40;
    mc.batch_size = 16;
    mc.seed = 5;
    t.params = train_base(t.general_split.train, t.vocab.size(), mc);
    t.store = build_datastore(t.params, t.domain_split.train);
    t.knn.k = 4;
    t.knn.temperature = 5.0;
    return t;
  }();
  return t;
}

inline std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "knndr_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

inline std::vector<char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Relative error with a floor so near-zero gradients compare absolutely.
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::max(std::abs(a), std::abs(b))); }

// Exhaustive scan: distances recomputed here, ordering by (distance, row).
inline std::vector<Neighbor> brute_knn(const Datastore& store, std::span<const double> q, std::size_t k) {
  std::vector<Neighbor> all;
  for (std::size_t r = 0; r < store.size(); ++r) {
    double d = 0.0;
    const auto key = store.key(r);
    for (std::size_t j = 0; j < store.dim(); ++j) {
      const double diff = q[j] - static_cast<double>(key[j]);
      d += diff * diff;
    }
    all.push_back({r, store.value(r), d});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

}  // namespace testing
