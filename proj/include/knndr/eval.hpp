#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knndr/classifier.hpp"
#include "knndr/engine.hpp"
#include "knndr/metrics.hpp"

namespace knndr {

/// Corpus-level token BLEU-4.
///
/// p_n = clipped n-gram matches / hypothesis n-grams, summed over the corpus; a
/// zero match count is replaced by 0.1 and an order with no hypothesis n-grams
/// gets precision 0.1 too. BP = min(1, exp(1 - r / c)) with c = 0 giving BP = 0.
/// score = 100 BP exp(mean_n ln p_n). Callers pass sequences without EOS.
struct BleuScore {
  double score = 0.0;
  std::array<double, 4> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

constexpr double kBleuSmoothing = 0.1;

BleuScore bleu(std::span<const Sequence> hypotheses, std::span<const Sequence> references);

/// Conduct-class F1 of decisions (true = conduct) against gold labels.
F1Result skip_f1(const std::vector<bool>& predicted, std::span<const SampleLabel> gold);

struct BenchResult {
  std::string mode;
  std::size_t batch_size = 1;
  std::size_t workers = 1;
  double tok_per_sec = 0.0;  ///< median over repetitions of tokens / seconds
  double retrieval_rate = 0.0;
  std::size_t token_count = 0;
  std::size_t retrieval_count = 0;
  BleuScore bleu;
  std::optional<double> f1;
  std::optional<double> alpha_min;
};

struct NamedMode {
  std::string name;
  DecodeMode mode;
};

struct BenchOptions {
  std::vector<std::size_t> batch_sizes{1, 16, 32, 64, 128};
  std::size_t repetitions = 5;
  std::size_t workers = 1;

  void validate() const;
};

/// Teacher-forced conduct F1 of a mode's skip rule; empty for modes without one.
std::optional<F1Result> mode_f1(const DecodeMode& mode, std::span<const TrainingSample> samples);

/// One row per (mode, batch size). An untimed warm-up pass precedes the timed repetitions.
/// `f1_samples`, when non-empty, fills the f1 column for ar_skip and dr_skip.
std::vector<BenchResult> benchmark(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                                   std::span<const NamedMode> modes, std::span<const ParallelPair> pairs,
                                   const BenchOptions& options, std::span<const TrainingSample> f1_samples = {});

/// One dr_skip row per alpha_min, all other settings fixed.
std::vector<BenchResult> alpha_min_sweep(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                                         const SkipClassifier& classifier, const ThresholdSchedule& schedule,
                                         std::span<const double> alpha_mins, std::span<const ParallelPair> pairs,
                                         const BatchOptions& options,
                                         std::span<const TrainingSample> f1_samples = {});

struct IntervalRow {
  std::size_t right = 0;  ///< R; retrieval at steps 0..R inclusive
  std::size_t eligible_count = 0;
  double bleu = 0.0;
  double delta_bleu = 0.0;  ///< against interval [0, R - step], or base_only for the first row
  bool omitted = false;  ///< fewer than min_eligible sentences; bleu and delta unset
};

struct IntervalOptions {
  std::size_t step = 5;
  std::size_t min_eligible = 20;
  BatchOptions batch{64, 1};
};

/// Rows for R = step, 2 step, ... up to the longest reference. Only pairs whose
/// reference length (without EOS) is at least R take part in row R.
std::vector<IntervalRow> interval_analysis(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                                           std::span<const ParallelPair> pairs, const IntervalOptions& options = {});

/// Column order: mode,batch_size,workers,tok_per_sec,retrieval_rate,token_count,retrieval_count,bleu,
/// bleu_p1..bleu_p4,brevity_penalty,f1,alpha_min. Missing optionals are empty cells.
void write_report_csv(const std::string& path, std::span<const BenchResult> rows);
void write_report_md(const std::string& path, std::span<const BenchResult> rows);
/// Columns R,eligible_count,bleu,delta_bleu,omitted.
void write_intervals_csv(const std::string& path, std::span<const IntervalRow> rows);

}  // namespace knndr
