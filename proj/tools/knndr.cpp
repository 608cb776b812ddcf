// knndr: command-line front end for the retrieval-skipping pipeline.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "knndr/datastore.hpp"
#include "knndr/engine.hpp"
#include "knndr/error.hpp"
#include "knndr/eval.hpp"
#include "knndr/pipeline.hpp"

namespace fs = std::filesystem;
using namespace knndr;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> work_dir;
};

// Command-specific overrides; unset values leave the config alone.
struct Overrides {
  std::optional<std::size_t> model_epochs;
  std::optional<double> keep_fraction;
  std::optional<std::string> criteria;
  std::optional<double> alpha_min;
  std::optional<double> gamma;
  std::optional<std::string> loss;
  std::optional<std::size_t> classifier_epochs;
  std::optional<double> ar_alpha;
  std::optional<std::size_t> ar_epochs;
  std::vector<std::string> modes;
  std::vector<std::size_t> batch_sizes;
  std::optional<std::size_t> repetitions;
  std::optional<std::size_t> max_sentences;
  std::optional<std::size_t> step;
  std::optional<std::size_t> min_eligible;
  std::vector<double> alpha_mins;
  std::optional<std::size_t> batch_size;
  std::string mode = "dr_skip";
  std::string split = "test";
};

PipelineConfig resolve_config(const Globals& g, const Overrides& o) {
  PipelineConfig cfg = g.config.empty() ? PipelineConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (g.workers) cfg.workers = *g.workers;
  if (g.work_dir) cfg.paths.work_dir = *g.work_dir;
  if (o.model_epochs) cfg.model.epochs = *o.model_epochs;
  if (o.keep_fraction) cfg.store.keep_fraction = *o.keep_fraction;
  if (o.criteria) {
    if (*o.criteria == "retrievability") cfg.samples.criteria = LabelCriteria::kRetrievability;
    else if (*o.criteria == "knn_beats_nmt") cfg.samples.criteria = LabelCriteria::kKnnBeatsNmt;
    else throw ValidationError("--criteria must be retrievability or knn_beats_nmt");
  }
  if (o.alpha_min) cfg.schedule.alpha_min = *o.alpha_min;
  if (o.gamma) cfg.classifier.gamma = *o.gamma;
  if (o.loss) {
    if (*o.loss == "focal") cfg.classifier.train.loss = ClassifierLoss::kFocal;
    else if (*o.loss == "weighted_ce") cfg.classifier.train.loss = ClassifierLoss::kWeightedCrossEntropy;
    else throw ValidationError("--loss must be focal or weighted_ce");
  }
  if (o.classifier_epochs) cfg.classifier.train.epochs = *o.classifier_epochs;
  if (o.ar_alpha) cfg.ar.decode.alpha = *o.ar_alpha;
  if (o.ar_epochs) cfg.ar.train.epochs = *o.ar_epochs;
  if (!o.modes.empty()) cfg.bench.modes = o.modes;
  if (!o.batch_sizes.empty()) cfg.bench.options.batch_sizes = o.batch_sizes;
  if (o.repetitions) cfg.bench.options.repetitions = *o.repetitions;
  if (o.max_sentences) cfg.bench.max_sentences = *o.max_sentences;
  if (o.step) cfg.intervals.step = *o.step;
  if (o.min_eligible) cfg.intervals.min_eligible = *o.min_eligible;
  if (!o.alpha_mins.empty()) cfg.sweep.alpha_mins = o.alpha_mins;
  if (o.batch_size) cfg.sweep.batch_size = *o.batch_size;
  cfg.bench.options.workers = cfg.workers;
  cfg.intervals.batch.workers = cfg.workers;
  cfg.validate();
  return cfg;
}

void require(const std::string& path, const char* producer) {
  if (!fs::exists(path)) {
    throw ValidationError("missing input file " + path + " (run " + producer + " first)");
  }
}

void ensure_dir(const std::string& file) {
  const auto parent = fs::path(file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

std::string domain_path(const PipelineConfig& cfg) { return cfg.domain_corpus_path(cfg.corpus.active_domain); }

std::vector<ParallelPair> head(const std::vector<ParallelPair>& pairs, std::size_t n) {
  if (n == 0 || n >= pairs.size()) return pairs;
  return {pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<Sequence> references(std::span<const ParallelPair> pairs) {
  std::vector<Sequence> out;
  for (const auto& p : pairs) out.push_back(strip_eos(p.target));
  return out;
}

// Everything a decoding command may need, loaded lazily and only if its file exists.
struct Loaded {
  ModelParams params;
  Datastore store;
  CorpusSplit domain;
  ThresholdSchedule schedule;
  std::optional<SkipClassifier> classifier;
  std::optional<LambdaEstimator> tran;
  std::vector<TrainingSample> heldout;
};

Loaded load_for_decoding(const PipelineConfig& cfg, bool need_classifier, bool need_tran) {
  require(cfg.path(cfg.paths.model), "train-base");
  require(cfg.path(cfg.paths.store), "build-store");
  require(domain_path(cfg), "gen-corpus");
  if (need_classifier) require(cfg.path(cfg.paths.classifier), "train-classifier");
  if (need_tran) require(cfg.path(cfg.paths.lambda_tran), "train-ar");
  Loaded l;
  l.params = load_model(cfg.path(cfg.paths.model));
  l.store = load_store(cfg.path(cfg.paths.store));
  check_compatible(l.params, l.store);
  l.domain = load_corpus(domain_path(cfg));
  l.schedule = resolve_schedule(cfg, l.domain);
  if (fs::exists(cfg.path(cfg.paths.classifier))) l.classifier = load_classifier(cfg.path(cfg.paths.classifier));
  if (fs::exists(cfg.path(cfg.paths.lambda_tran))) l.tran = load_estimator(cfg.path(cfg.paths.lambda_tran));
  if (fs::exists(cfg.path(cfg.paths.samples_heldout))) l.heldout = load_samples(cfg.path(cfg.paths.samples_heldout));
  return l;
}

DecodeMode mode_for(const std::string& name, const PipelineConfig& cfg, const Loaded& l) {
  return make_mode(name, l.classifier ? &*l.classifier : nullptr, l.schedule, l.tran ? &*l.tran : nullptr,
                   cfg.ar.decode);
}

bool needs_classifier(const std::string& mode) { return mode == "dr_skip"; }
bool needs_tran(const std::string& mode) { return mode == "ar_skip"; }

int gen_corpus(const PipelineConfig& cfg) {
  const Corpora c = generate_corpora(cfg);
  fs::create_directories(cfg.paths.work_dir);
  c.vocab.save(cfg.path(cfg.paths.vocab));
  save_corpus(c.general, cfg.path(cfg.paths.general_corpus));
  std::size_t domain_pairs = 0;
  for (const auto& d : c.domains) {
    save_corpus(d, cfg.domain_corpus_path(d.domain));
    domain_pairs += d.train.size() + d.valid.size() + d.test.size();
  }
  std::printf("gen-corpus: vocab %zu, general %zu pairs, %zu domain(s) with %zu pairs -> %s\n", c.vocab.size(),
              c.general.train.size() + c.general.valid.size() + c.general.test.size(), c.domains.size(), domain_pairs,
              cfg.paths.work_dir.c_str());
  return 0;
}

int train_base_cmd(const PipelineConfig& cfg) {
  require(cfg.path(cfg.paths.general_corpus), "gen-corpus");
  const CorpusSplit general = load_corpus(cfg.path(cfg.paths.general_corpus));
  const ModelParams params = train_base_model(cfg, general);
  save_model(params, cfg.path(cfg.paths.model));
  std::printf("train-base: %zu epochs, general valid accuracy %.4f -> %s\n", cfg.model.epochs,
              teacher_forced_accuracy(params, general.valid), cfg.path(cfg.paths.model).c_str());
  return 0;
}

int build_store_cmd(const PipelineConfig& cfg) {
  require(cfg.path(cfg.paths.model), "train-base");
  require(domain_path(cfg), "gen-corpus");
  const ModelParams params = load_model(cfg.path(cfg.paths.model));
  const CorpusSplit domain = load_corpus(domain_path(cfg));
  const Datastore store = build_domain_store(cfg, params, domain);
  save_store(store, cfg.path(cfg.paths.store));
  std::printf("build-store: %zu entries of dim %zu (keep %.3f) -> %s\n", store.size(), store.dim(),
              cfg.store.keep_fraction, cfg.path(cfg.paths.store).c_str());
  return 0;
}

std::size_t count_conduct(std::span<const TrainingSample> s) {
  std::size_t n = 0;
  for (const auto& x : s) n += x.label == SampleLabel::kConduct;
  return n;
}

int build_samples_cmd(const PipelineConfig& cfg) {
  require(cfg.path(cfg.paths.model), "train-base");
  require(cfg.path(cfg.paths.store), "build-store");
  require(domain_path(cfg), "gen-corpus");
  const ModelParams params = load_model(cfg.path(cfg.paths.model));
  const Datastore store = load_store(cfg.path(cfg.paths.store));
  check_compatible(params, store);
  const CorpusSplit domain = load_corpus(domain_path(cfg));
  const SampleSets s = build_sample_sets(cfg, params, store, domain);
  save_samples(s.train, cfg.path(cfg.paths.samples_train));
  save_samples(s.heldout, cfg.path(cfg.paths.samples_heldout));
  std::printf("build-samples: %zu train (%zu conduct), %zu held-out (%zu conduct)\n", s.train.size(),
              count_conduct(s.train), s.heldout.size(), count_conduct(s.heldout));
  return 0;
}

SampleSets load_sample_sets(const PipelineConfig& cfg) {
  require(cfg.path(cfg.paths.samples_train), "build-samples");
  require(cfg.path(cfg.paths.samples_heldout), "build-samples");
  return {load_samples(cfg.path(cfg.paths.samples_train)), load_samples(cfg.path(cfg.paths.samples_heldout))};
}

std::string f1_text(const F1Result& f) {
  if (!f.defined) return "undefined";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", f.f1);
  return buf;
}

int train_classifier_cmd(const PipelineConfig& cfg) {
  require(domain_path(cfg), "gen-corpus");
  const SampleSets s = load_sample_sets(cfg);
  const ThresholdSchedule schedule = resolve_schedule(cfg, load_corpus(domain_path(cfg)));
  const ClassifierTrainResult r = train_skip_classifier(cfg, s, schedule);
  save_classifier(r.classifier, cfg.path(cfg.paths.classifier));
  std::printf("train-classifier: best epoch %zu, held-out F1 %s (alpha_min %.2f, T %.2f)%s -> %s\n", r.best_epoch,
              f1_text(r.best_heldout).c_str(), schedule.alpha_min, schedule.T,
              r.single_class ? ", single-class training set" : "", cfg.path(cfg.paths.classifier).c_str());
  return 0;
}

int train_ar_cmd(const PipelineConfig& cfg) {
  const SampleSets s = load_sample_sets(cfg);
  const LambdaEstimator tran = train_estimator(cfg, LambdaObjective::kTran, s);
  const LambdaEstimator bina = train_estimator(cfg, LambdaObjective::kBina, s);
  save_estimator(tran, cfg.path(cfg.paths.lambda_tran));
  save_estimator(bina, cfg.path(cfg.paths.lambda_bina));
  std::string f1s;
  for (double a : cfg.ar.f1_alphas) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " %.2f:%s", a, f1_text(ar_skip_f1(tran, a, s.heldout)).c_str());
    f1s += buf;
  }
  std::printf("train-ar: tran and bina estimators saved; tran held-out F1 by alpha%s\n", f1s.c_str());
  return 0;
}

int translate_cmd(const PipelineConfig& cfg, const Overrides& o) {
  if (o.split != "test" && o.split != "valid") throw ValidationError("--split must be test or valid");
  const Loaded l = load_for_decoding(cfg, needs_classifier(o.mode), needs_tran(o.mode));
  const DecodeMode mode = mode_for(o.mode, cfg, l);
  const auto pairs = head(o.split == "test" ? l.domain.test : l.domain.valid, cfg.bench.max_sentences);
  std::vector<Sequence> sources;
  for (const auto& p : pairs) sources.push_back(p.source);
  const BatchDecode d =
      translate_batch(l.params, l.store, cfg.knn, mode, sources, {o.batch_size.value_or(1), cfg.workers});
  std::vector<Sequence> hyps;
  for (const auto& t : d.traces) hyps.push_back(strip_eos(t.output));
  const std::string traces = cfg.report_path("translate_" + mode_name(mode) + ".jsonl");
  ensure_dir(traces);
  write_traces(traces, d.traces);
  const BleuScore b = bleu(hyps, references(pairs));
  std::printf("translate: %s on %zu %s sentences, BLEU %.2f, retrieval rate %.4f -> %s\n", mode_name(mode).c_str(),
              pairs.size(), o.split.c_str(), b.score,
              d.token_count ? static_cast<double>(d.retrieval_count) / static_cast<double>(d.token_count) : 0.0,
              traces.c_str());
  return 0;
}

int bench_cmd(const PipelineConfig& cfg) {
  bool clf = false, tran = false;
  for (const auto& m : cfg.bench.modes) {
    clf |= needs_classifier(m);
    tran |= needs_tran(m);
  }
  const Loaded l = load_for_decoding(cfg, clf, tran);
  std::vector<NamedMode> modes;
  for (const auto& m : cfg.bench.modes) modes.push_back({m, mode_for(m, cfg, l)});
  const auto pairs = head(l.domain.test, cfg.bench.max_sentences);
  const auto rows = benchmark(l.params, l.store, cfg.knn, modes, pairs, cfg.bench.options, l.heldout);
  const std::string csv = cfg.report_path("report.csv");
  ensure_dir(csv);
  write_report_csv(csv, rows);
  write_report_md(cfg.report_path("report.md"), rows);
  std::string brief;
  for (const auto& r : rows) {
    if (r.batch_size != cfg.bench.options.batch_sizes.back()) continue;
    char buf[96];
    std::snprintf(buf, sizeof buf, " %s=%.1f tok/s", r.mode.c_str(), r.tok_per_sec);
    brief += buf;
  }
  std::printf("bench: %zu rows on %zu sentences; batch %zu:%s -> %s\n", rows.size(), pairs.size(),
              cfg.bench.options.batch_sizes.back(), brief.c_str(), csv.c_str());
  return 0;
}

int intervals_cmd(const PipelineConfig& cfg) {
  const Loaded l = load_for_decoding(cfg, false, false);
  const auto pairs = head(l.domain.test, cfg.bench.max_sentences);
  const auto rows = interval_analysis(l.params, l.store, cfg.knn, pairs, cfg.intervals);
  const std::string csv = cfg.report_path("intervals.csv");
  ensure_dir(csv);
  write_intervals_csv(csv, rows);
  std::size_t kept = 0;
  for (const auto& r : rows) kept += !r.omitted;
  std::printf("analyze-intervals: %zu intervals (%zu omitted) -> %s\n", rows.size(), rows.size() - kept, csv.c_str());
  return 0;
}

int sweep_cmd(const PipelineConfig& cfg) {
  const Loaded l = load_for_decoding(cfg, true, false);
  const auto pairs = head(l.domain.valid, cfg.bench.max_sentences);
  const auto rows = alpha_min_sweep(l.params, l.store, cfg.knn, *l.classifier, l.schedule, cfg.sweep.alpha_mins,
                                    pairs, {cfg.sweep.batch_size, cfg.workers}, l.heldout);
  const std::string csv = cfg.report_path("sweep.csv");
  ensure_dir(csv);
  write_report_csv(csv, rows);
  write_report_md(cfg.report_path("sweep.md"), rows);
  std::string brief;
  for (const auto& r : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " %.2f:%.4f", r.alpha_min.value_or(0.0), r.retrieval_rate);
    brief += buf;
  }
  std::printf("sweep-alpha: retrieval rate by alpha_min%s -> %s\n", brief.c_str(), csv.c_str());
  return 0;
}

int lambda_stats_cmd(const PipelineConfig& cfg) {
  require(cfg.path(cfg.paths.lambda_tran), "train-ar");
  require(cfg.path(cfg.paths.lambda_bina), "train-ar");
  require(cfg.path(cfg.paths.samples_heldout), "build-samples");
  const LambdaEstimator tran = load_estimator(cfg.path(cfg.paths.lambda_tran));
  const LambdaEstimator bina = load_estimator(cfg.path(cfg.paths.lambda_bina));
  std::vector<FeatureVector> stream;
  for (const auto& s : load_samples(cfg.path(cfg.paths.samples_heldout))) stream.push_back(s.features);
  const LambdaDivergence d = lambda_divergence_stats(tran, bina, stream);
  const std::string out = cfg.report_path("lambda_stats.json");
  ensure_dir(out);
  std::ofstream f(out);
  if (!f) throw IoError("cannot write " + out);
  f << nlohmann::json{{"count", d.count}, {"mean_abs_diff", d.mean_abs_diff}, {"frac_gt_02", d.frac_gt_02}}.dump(2)
    << "\n";
  if (!f) throw IoError("write failed: " + out);
  std::printf("lambda-stats: mean |bina - tran| %.4f, fraction > 0.2 %.4f over %zu steps -> %s\n", d.mean_abs_diff,
              d.frac_gt_02, d.count, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-skipping kNN-MT pipeline on synthetic domain-shift corpora"};
  app.require_subcommand(1);
  Globals g;
  Overrides o;
  app.add_option("--config", g.config, "JSON config file (defaults apply when omitted)");
  app.add_option("--seed", g.seed, "master seed; overrides the config");
  app.add_option("--workers", g.workers, "decoding threads");
  app.add_option("--work-dir", g.work_dir, "directory holding all artifacts");

  std::function<int(const PipelineConfig&)> run;
  auto sub = [&](const char* name, const char* help, std::function<int(const PipelineConfig&)> fn) {
    CLI::App* s = app.add_subcommand(name, help);
    s->callback([&run, fn] { run = fn; });
    return s;
  };

  sub("gen-corpus", "generate vocabulary, general and domain corpora", gen_corpus);
  sub("train-base", "train the base translation model on the general corpus", train_base_cmd)
      ->add_option("--epochs", o.model_epochs, "training epochs");
  sub("build-store", "build the datastore from the active domain's train split", build_store_cmd)
      ->add_option("--keep-fraction", o.keep_fraction, "fraction of entries kept by random pruning");
  sub("build-samples", "label teacher-forced steps of the domain validation split", build_samples_cmd)
      ->add_option("--criteria", o.criteria, "retrievability or knn_beats_nmt");
  auto* tc = sub("train-classifier", "train the skip classifier", train_classifier_cmd);
  tc->add_option("--alpha-min", o.alpha_min, "threshold floor used for model selection");
  tc->add_option("--gamma", o.gamma, "focal loss gamma");
  tc->add_option("--loss", o.loss, "focal or weighted_ce");
  tc->add_option("--epochs", o.classifier_epochs, "training epochs");
  auto* ta = sub("train-ar", "train the Tran and Bina lambda estimators", train_ar_cmd);
  ta->add_option("--alpha", o.ar_alpha, "skip threshold on lambda-hat");
  ta->add_option("--epochs", o.ar_epochs, "training epochs");
  auto* tr = sub("translate", "decode a domain split with one mode", [&o](const PipelineConfig& c) {
    return translate_cmd(c, o);
  });
  tr->add_option("--mode", o.mode, "base_only, vanilla_knn, ar_skip, dr_skip or interval:<lo>:<hi>");
  tr->add_option("--split", o.split, "test or valid");
  tr->add_option("--batch-size", o.batch_size, "sentences per batch");
  tr->add_option("--max-sentences", o.max_sentences, "decode only the first N sentences (0 = all)");
  tr->add_option("--alpha-min", o.alpha_min, "threshold floor for dr_skip");
  tr->add_option("--alpha", o.ar_alpha, "lambda-hat threshold for ar_skip");
  auto* be = sub("bench", "throughput, retrieval rate and BLEU per mode and batch size", bench_cmd);
  be->add_option("--modes", o.modes, "modes to benchmark");
  be->add_option("--batch-sizes", o.batch_sizes, "batch sizes");
  be->add_option("--repetitions", o.repetitions, "timed repetitions (>= 3)");
  be->add_option("--max-sentences", o.max_sentences, "use only the first N test sentences (0 = all)");
  be->add_option("--alpha-min", o.alpha_min, "threshold floor for dr_skip");
  be->add_option("--alpha", o.ar_alpha, "lambda-hat threshold for ar_skip");
  auto* ai = sub("analyze-intervals", "BLEU gain of retrieving only in [0, R]", intervals_cmd);
  ai->add_option("--step", o.step, "interval step");
  ai->add_option("--min-eligible", o.min_eligible, "minimum eligible sentences per interval");
  ai->add_option("--max-sentences", o.max_sentences, "use only the first N test sentences (0 = all)");
  auto* sw = sub("sweep-alpha", "dr_skip retrieval rate and BLEU per alpha_min", sweep_cmd);
  sw->add_option("--alpha-mins", o.alpha_mins, "alpha_min values");
  sw->add_option("--batch-size", o.batch_size, "decoding batch size");
  sw->add_option("--max-sentences", o.max_sentences, "use only the first N validation sentences (0 = all)");
  sub("lambda-stats", "divergence between Tran and Bina lambda estimates", lambda_stats_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    return run(resolve_config(g, o));
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
