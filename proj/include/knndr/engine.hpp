#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "knndr/classifier.hpp"
#include "knndr/datastore.hpp"
#include "knndr/knn.hpp"
#include "knndr/lambda.hpp"
#include "knndr/model.hpp"

namespace knndr {

struct BaseOnly {};
struct VanillaKnn {};
struct ArSkip {
  ArConfig config;
  LambdaEstimator estimator;  ///< its lambda-hat also replaces the fixed interpolation weight
};
struct DrSkip {
  SkipClassifier classifier;
  ThresholdSchedule schedule;
};
/// Retrieve exactly at steps lo <= t <= hi.
struct Interval {
  std::size_t lo = 0;
  std::size_t hi = std::numeric_limits<std::size_t>::max();
};

using DecodeMode = std::variant<BaseOnly, VanillaKnn, ArSkip, DrSkip, Interval>;

std::string mode_name(const DecodeMode& mode);

/// Throws ValidationError for inconsistent mode parameters and StateError for untrained components.
void validate(const DecodeMode& mode);

struct StepRecord {
  std::size_t t = 0;
  bool skipped = true;
  std::optional<double> score;  ///< p_retrieve (dr_skip) or lambda-hat (ar_skip)
  std::optional<double> alpha_t;
};

struct DecodeTrace {
  Sequence output;  ///< generated tokens, including the final EOS when produced
  std::vector<StepRecord> steps;
  std::size_t retrieval_count = 0;
  double elapsed = 0.0;  ///< seconds; for batched decoding, the wall time of the sentence's batch
  std::size_t token_count = 0;
};

/// Greedy decoding stops at EOS or after 2 * |source| + 10 tokens.
std::size_t max_output_length(std::span<const TokenId> source);

/// Output tokens without the trailing EOS.
Sequence strip_eos(const Sequence& tokens);

DecodeTrace translate(const ModelParams& params, const Datastore& store, const KnnConfig& knn, const DecodeMode& mode,
                      std::span<const TokenId> source);

struct BatchOptions {
  std::size_t batch_size = 1;
  std::size_t workers = 1;

  void validate() const;
};

struct BatchDecode {
  std::vector<DecodeTrace> traces;  ///< in input order
  std::vector<double> batch_seconds;
  double total_seconds = 0.0;
  std::size_t token_count = 0;
  std::size_t retrieval_count = 0;
};

/// Sentences of a batch advance in lockstep and share one scan of the datastore per
/// step; each worker thread takes a contiguous slice of the batch. Outputs equal
/// per-sentence translate() token for token.
BatchDecode translate_batch(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                            const DecodeMode& mode, std::span<const Sequence> sources, const BatchOptions& options);

/// One JSON object per line: output, retrieval_count, token_count, elapsed, steps.
void write_traces(const std::string& path, std::span<const DecodeTrace> traces);

}  // namespace knndr
