#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "knndr/classifier.hpp"
#include "knndr/corpus.hpp"
#include "knndr/eval.hpp"
#include "knndr/knn.hpp"
#include "knndr/lambda.hpp"
#include "knndr/model.hpp"

namespace knndr {

struct DomainConfig {
  std::string name = "it";
  double shift_fraction = 0.3;
  double noise_rate = 0.05;
  SplitSizes sizes{6000, 1000, 500};
};

struct CorpusConfig {
  std::size_t vocab_size = 1000;  ///< content tokens; four specials are added
  double general_noise = 0.01;
  SplitSizes general_sizes{4000, 200, 200};
  LengthRange length;
  SenseMixing mixing;
  std::vector<DomainConfig> domains{DomainConfig{}};
  std::string active_domain = "it";
};

/// File names are resolved against work_dir.
struct PathsConfig {
  std::string work_dir = "work";
  std::string vocab = "vocab.txt";
  std::string general_corpus = "general.corpus";
  std::string model = "model.rgdm";
  std::string store = "store.kvds";
  std::string samples_train = "samples_train.csv";
  std::string samples_heldout = "samples_heldout.csv";
  std::string classifier = "classifier.rgsc";
  std::string lambda_tran = "lambda_tran.rgle";
  std::string lambda_bina = "lambda_bina.rgle";
  std::string reports = "reports";
};

struct StoreConfig {
  double keep_fraction = 1.0;
};

struct SamplesConfig {
  double train_fraction = 0.9;
  LabelCriteria criteria = LabelCriteria::kRetrievability;
};

struct ClassifierConfig {
  ClassifierTrainConfig train;
  double gamma = 2.0;
  std::optional<std::array<double, 2>> alpha_c;  ///< (skip, conduct); empty means inverse-frequency balancing
};

struct ScheduleConfig {
  double alpha_min = 0.4;
  std::optional<double> T;  ///< empty means the mean target length of the domain validation split
};

struct ArSection {
  ArConfig decode;
  LambdaTrainConfig train;
  std::vector<double> f1_alphas{0.25, 0.5, 0.75};
};

struct BenchConfig {
  BenchOptions options;
  std::vector<std::string> modes{"base_only", "vanilla_knn", "ar_skip", "dr_skip"};
  std::size_t max_sentences = 0;  ///< 0 uses the whole test split
};

struct SweepConfig {
  std::vector<double> alpha_mins{0.35, 0.40, 0.45};
  std::size_t batch_size = 128;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::size_t workers = 1;
  PathsConfig paths;
  CorpusConfig corpus;
  ModelConfig model;
  KnnConfig knn;
  StoreConfig store;
  SamplesConfig samples;
  ClassifierConfig classifier;
  ScheduleConfig schedule;
  ArSection ar;
  BenchConfig bench;
  IntervalOptions intervals;
  SweepConfig sweep;

  /// Throws ValidationError naming the offending field.
  void validate() const;
  std::string path(const std::string& file) const;
  std::string domain_corpus_path(const std::string& domain) const;
  std::string report_path(const std::string& file) const;
};

/// Every key is optional; unknown keys and wrongly typed values throw ValidationError.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config(const std::string& path);
/// Full config as pretty-printed JSON, defaults included.
std::string dump_config(const PipelineConfig& cfg);

/// Seed of a named stream ("corpus/general", "model", "classifier", ...) under the master seed.
std::uint64_t stream_seed(const PipelineConfig& cfg, const std::string& stream);

struct Corpora {
  Vocab vocab;
  DomainSpec general_spec;
  std::vector<DomainSpec> domain_specs;
  CorpusSplit general;
  std::vector<CorpusSplit> domains;
};

Corpora generate_corpora(const PipelineConfig& cfg);

const CorpusSplit& find_domain(const std::vector<CorpusSplit>& domains, const std::string& name);

ModelParams train_base_model(const PipelineConfig& cfg, const CorpusSplit& general);
Datastore build_domain_store(const PipelineConfig& cfg, const ModelParams& params, const CorpusSplit& domain);

struct SampleSets {
  std::vector<TrainingSample> train;
  std::vector<TrainingSample> heldout;
};

/// Leading train_fraction of the domain validation pairs train the classifier; the rest are held out.
SampleSets build_sample_sets(const PipelineConfig& cfg, const ModelParams& params, const Datastore& store,
                             const CorpusSplit& domain);

ThresholdSchedule resolve_schedule(const PipelineConfig& cfg, const CorpusSplit& domain);

ClassifierTrainResult train_skip_classifier(const PipelineConfig& cfg, const SampleSets& samples,
                                            const ThresholdSchedule& schedule);

LambdaEstimator train_estimator(const PipelineConfig& cfg, LambdaObjective mode, const SampleSets& samples);

/// Modes by name: base_only, vanilla_knn, ar_skip, dr_skip, interval:<lo>:<hi>.
DecodeMode make_mode(const std::string& name, const SkipClassifier* classifier, const ThresholdSchedule& schedule,
                     const LambdaEstimator* tran, const ArConfig& ar);

}  // namespace knndr
