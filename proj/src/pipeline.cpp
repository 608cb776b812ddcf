#include "knndr/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "knndr/error.hpp"
#include "knndr/rng.hpp"

namespace knndr {

namespace {

using nlohmann::json;

/// Reads optional keys of one JSON object and rejects any key it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(where() + " must be a JSON object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ValidationError(field(key) + " must be a number");
      out = v->get<double>();
    }
  }

  void get(const std::string& key, std::size_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<long long>() < 0) {
        throw ValidationError(field(key) + " must be a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }

  void get(const std::string& key, std::uint64_t& out, int) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        throw ValidationError(field(key) + " must be a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ValidationError(field(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  template <class T>
  void get_list(const std::string& key, std::vector<T>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array()) throw ValidationError(field(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        if constexpr (std::is_same_v<T, std::string>) {
          if (!e.is_string()) throw ValidationError(field(key) + " entries must be strings");
        } else if constexpr (std::is_integral_v<T>) {
          if (!e.is_number_integer() || e.get<long long>() < 0) {
            throw ValidationError(field(key) + " entries must be non-negative integers");
          }
        } else {
          if (!e.is_number()) throw ValidationError(field(key) + " entries must be numbers");
        }
        out.push_back(e.get<T>());
      }
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ValidationError("unknown config key '" + field(key) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_sizes(Section& parent, const std::string& key, SplitSizes& sizes) {
  if (const json* v = parent.find(key)) {
    Section s(*v, parent.field(key));
    s.get("train", sizes.train);
    s.get("valid", sizes.valid);
    s.get("test", sizes.test);
    s.finish();
  }
}

json sizes_json(const SplitSizes& s) { return {{"train", s.train}, {"valid", s.valid}, {"test", s.test}}; }

const char* criteria_name(LabelCriteria c) {
  return c == LabelCriteria::kRetrievability ? "retrievability" : "knn_beats_nmt";
}

const char* loss_name(ClassifierLoss l) { return l == ClassifierLoss::kFocal ? "focal" : "weighted_ce"; }

const char* const kFeatureNames[FeatureVector::kCount] = {"p_top1", "h_norm", "max_attn"};

std::vector<std::string> mask_names(std::uint32_t mask) {
  std::vector<std::string> out;
  for (std::size_t f = 0; f < FeatureVector::kCount; ++f) {
    if ((mask >> f) & 1u) out.emplace_back(kFeatureNames[f]);
  }
  return out;
}

void check_range(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ValidationError(field + " " + rule);
}

}  // namespace

void PipelineConfig::validate() const {
  check_range(workers >= 1, "workers", "must be >= 1");
  check_range(!paths.work_dir.empty(), "paths.work_dir", "must not be empty");
  check_range(corpus.vocab_size >= 2, "corpus.vocab_size", "must be >= 2");
  check_range(corpus.general_noise >= 0.0 && corpus.general_noise <= 1.0, "corpus.general_noise", "must be in [0,1]");
  check_range(corpus.general_sizes.train > 0 && corpus.general_sizes.valid > 0 && corpus.general_sizes.test > 0,
              "corpus.general_sizes", "must all be >= 1");
  check_range(corpus.length.min >= 1 && corpus.length.max >= corpus.length.min, "corpus.length",
              "must satisfy 1 <= min <= max");
  const auto& mx = corpus.mixing;
  for (const auto& [v, name] : {std::pair{mx.shifted_sense_rate, "shifted_sense_rate"},
                                {mx.polysemy_fraction, "polysemy_fraction"},
                                {mx.polysemy_rate, "polysemy_rate"}}) {
    check_range(v >= 0.0 && v <= 1.0, std::string("corpus.mixing.") + name, "must be in [0,1]");
  }
  check_range(!corpus.domains.empty(), "corpus.domains", "must list at least one domain");
  std::set<std::string> names;
  for (std::size_t i = 0; i < corpus.domains.size(); ++i) {
    const auto& d = corpus.domains[i];
    const std::string f = "corpus.domains[" + std::to_string(i) + "]";
    check_range(!d.name.empty() && d.name != "general" &&
                    std::none_of(d.name.begin(), d.name.end(), [](unsigned char c) { return std::isspace(c) || c == '/'; }),
                f + ".name", "must be a non-empty word other than 'general'");
    check_range(names.insert(d.name).second, f + ".name", "duplicates another domain");
    check_range(d.shift_fraction >= 0.0 && d.shift_fraction <= 1.0, f + ".shift_fraction", "must be in [0,1]");
    check_range(d.noise_rate >= 0.0 && d.noise_rate <= 1.0, f + ".noise_rate", "must be in [0,1]");
    check_range(d.sizes.train > 0 && d.sizes.valid > 0 && d.sizes.test > 0, f + ".sizes", "must all be >= 1");
  }
  check_range(names.count(corpus.active_domain) == 1, "corpus.active_domain", "must name one of corpus.domains");
  check_range(model.d >= 1, "model.d", "must be >= 1");
  check_range(model.d_ff >= 1, "model.d_ff", "must be >= 1");
  check_range(model.lr > 0.0, "model.lr", "must be > 0");
  check_range(model.batch_size >= 1, "model.batch_size", "must be >= 1");
  check_range(model.clip_norm >= 0.0, "model.clip_norm", "must be >= 0");
  knn.validate();
  check_range(store.keep_fraction > 0.0 && store.keep_fraction <= 1.0, "store.keep_fraction", "must be in (0,1]");
  check_range(samples.train_fraction > 0.0 && samples.train_fraction < 1.0, "samples.train_fraction",
              "must be in (0,1)");
  classifier.train.validate();
  check_range(classifier.gamma >= 0.0, "classifier.gamma", "must be >= 0");
  if (classifier.alpha_c) {
    check_range((*classifier.alpha_c)[0] > 0.0 && (*classifier.alpha_c)[1] > 0.0, "classifier.alpha_c",
                "entries must be > 0");
  }
  check_range(schedule.alpha_min >= 0.0 && schedule.alpha_min <= 0.5, "schedule.alpha_min", "must be in [0,0.5]");
  if (schedule.T) check_range(*schedule.T > 0.0, "schedule.T", "must be > 0");
  ar.decode.validate();
  ar.train.validate();
  for (double a : ar.f1_alphas) check_range(a >= 0.0 && a <= 1.0, "ar.f1_alphas", "entries must be in [0,1]");
  bench.options.validate();
  for (const auto& m : bench.modes) {
    check_range(m == "base_only" || m == "vanilla_knn" || m == "ar_skip" || m == "dr_skip", "bench.modes",
                "entries must be base_only, vanilla_knn, ar_skip or dr_skip (got '" + m + "')");
  }
  check_range(intervals.step >= 1, "intervals.step", "must be >= 1");
  check_range(intervals.batch.batch_size >= 1, "intervals.batch_size", "must be >= 1");
  for (double a : sweep.alpha_mins) check_range(a >= 0.0 && a <= 0.5, "sweep.alpha_mins", "entries must be in [0,0.5]");
  check_range(sweep.batch_size >= 1, "sweep.batch_size", "must be >= 1");
}

std::string PipelineConfig::path(const std::string& file) const {
  return (std::filesystem::path(paths.work_dir) / file).string();
}

std::string PipelineConfig::domain_corpus_path(const std::string& domain) const { return path(domain + ".corpus"); }

std::string PipelineConfig::report_path(const std::string& file) const {
  return (std::filesystem::path(paths.work_dir) / paths.reports / file).string();
}

PipelineConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig cfg;
  Section top(root, "");
  top.get("seed", cfg.seed, 0);
  top.get("workers", cfg.workers);

  if (const json* v = top.find("paths")) {
    Section s(*v, "paths");
    auto& p = cfg.paths;
    for (auto [key, field] : {std::pair{"work_dir", &p.work_dir}, {"vocab", &p.vocab},
                              {"general_corpus", &p.general_corpus}, {"model", &p.model}, {"store", &p.store},
                              {"samples_train", &p.samples_train}, {"samples_heldout", &p.samples_heldout},
                              {"classifier", &p.classifier}, {"lambda_tran", &p.lambda_tran},
                              {"lambda_bina", &p.lambda_bina}, {"reports", &p.reports}}) {
      s.get(key, *field);
    }
    s.finish();
  }

  if (const json* v = top.find("corpus")) {
    Section s(*v, "corpus");
    auto& c = cfg.corpus;
    s.get("vocab_size", c.vocab_size);
    s.get("general_noise", c.general_noise);
    read_sizes(s, "general_sizes", c.general_sizes);
    if (const json* l = s.find("length")) {
      Section ls(*l, "corpus.length");
      ls.get("min", c.length.min);
      ls.get("max", c.length.max);
      ls.finish();
    }
    if (const json* m = s.find("mixing")) {
      Section ms(*m, "corpus.mixing");
      ms.get("shifted_sense_rate", c.mixing.shifted_sense_rate);
      ms.get("polysemy_fraction", c.mixing.polysemy_fraction);
      ms.get("polysemy_rate", c.mixing.polysemy_rate);
      std::size_t common = c.mixing.common_weight;
      std::size_t rare = c.mixing.rare_weight;
      ms.get("common_weight", common);
      ms.get("rare_weight", rare);
      c.mixing.common_weight = static_cast<std::uint32_t>(common);
      c.mixing.rare_weight = static_cast<std::uint32_t>(rare);
      ms.finish();
    }
    if (const json* d = s.find("domains")) {
      if (!d->is_array()) throw ValidationError("corpus.domains must be an array");
      c.domains.clear();
      for (std::size_t i = 0; i < d->size(); ++i) {
        Section ds((*d)[i], "corpus.domains[" + std::to_string(i) + "]");
        DomainConfig dc;
        ds.get("name", dc.name);
        ds.get("shift_fraction", dc.shift_fraction);
        ds.get("noise_rate", dc.noise_rate);
        read_sizes(ds, "sizes", dc.sizes);
        ds.finish();
        c.domains.push_back(dc);
      }
    }
    s.get("active_domain", c.active_domain);
    s.finish();
  }

  if (const json* v = top.find("model")) {
    Section s(*v, "model");
    s.get("d", cfg.model.d);
    s.get("d_ff", cfg.model.d_ff);
    s.get("epochs", cfg.model.epochs);
    s.get("lr", cfg.model.lr);
    s.get("batch_size", cfg.model.batch_size);
    s.get("clip_norm", cfg.model.clip_norm);
    s.finish();
  }

  if (const json* v = top.find("knn")) {
    Section s(*v, "knn");
    s.get("k", cfg.knn.k);
    s.get("temperature", cfg.knn.temperature);
    s.get("lambda", cfg.knn.lambda);
    s.finish();
  }

  if (const json* v = top.find("store")) {
    Section s(*v, "store");
    s.get("keep_fraction", cfg.store.keep_fraction);
    s.finish();
  }

  if (const json* v = top.find("samples")) {
    Section s(*v, "samples");
    s.get("train_fraction", cfg.samples.train_fraction);
    std::string criteria = criteria_name(cfg.samples.criteria);
    s.get("criteria", criteria);
    if (criteria == "retrievability") cfg.samples.criteria = LabelCriteria::kRetrievability;
    else if (criteria == "knn_beats_nmt") cfg.samples.criteria = LabelCriteria::kKnnBeatsNmt;
    else throw ValidationError("samples.criteria must be 'retrievability' or 'knn_beats_nmt'");
    s.finish();
  }

  if (const json* v = top.find("classifier")) {
    Section s(*v, "classifier");
    auto& c = cfg.classifier;
    s.get("epochs", c.train.epochs);
    s.get("lr", c.train.lr);
    s.get("batch_size", c.train.batch_size);
    s.get("gamma", c.gamma);
    std::string loss = loss_name(c.train.loss);
    s.get("loss", loss);
    if (loss == "focal") c.train.loss = ClassifierLoss::kFocal;
    else if (loss == "weighted_ce") c.train.loss = ClassifierLoss::kWeightedCrossEntropy;
    else throw ValidationError("classifier.loss must be 'focal' or 'weighted_ce'");
    if (const json* a = s.find("alpha_c")) {
      if (a->is_string() && a->get<std::string>() == "balanced") {
        c.alpha_c.reset();
      } else if (a->is_array() && a->size() == 2 && (*a)[0].is_number() && (*a)[1].is_number()) {
        c.alpha_c = std::array<double, 2>{(*a)[0].get<double>(), (*a)[1].get<double>()};
      } else {
        throw ValidationError("classifier.alpha_c must be \"balanced\" or [alpha_skip, alpha_conduct]");
      }
    }
    std::vector<std::string> features = mask_names(c.train.feature_mask);
    s.get_list("features", features);
    std::uint32_t mask = 0;
    for (const auto& f : features) {
      const auto it = std::find(std::begin(kFeatureNames), std::end(kFeatureNames), f);
      if (it == std::end(kFeatureNames)) {
        throw ValidationError("classifier.features: unknown feature '" + f + "' (p_top1, h_norm, max_attn)");
      }
      mask |= 1u << (it - std::begin(kFeatureNames));
    }
    c.train.feature_mask = mask;
    s.finish();
  }

  if (const json* v = top.find("schedule")) {
    Section s(*v, "schedule");
    s.get("alpha_min", cfg.schedule.alpha_min);
    if (const json* t = s.find("T")) {
      if (t->is_null()) cfg.schedule.T.reset();
      else if (t->is_number()) cfg.schedule.T = t->get<double>();
      else throw ValidationError("schedule.T must be a number or null");
    }
    s.finish();
  }

  if (const json* v = top.find("ar")) {
    Section s(*v, "ar");
    s.get("alpha", cfg.ar.decode.alpha);
    s.get("hidden", cfg.ar.train.hidden);
    cfg.ar.decode.hidden = cfg.ar.train.hidden;
    s.get("epochs", cfg.ar.train.epochs);
    s.get("lr", cfg.ar.train.lr);
    s.get("batch_size", cfg.ar.train.batch_size);
    s.get_list("f1_alphas", cfg.ar.f1_alphas);
    s.finish();
  }

  if (const json* v = top.find("bench")) {
    Section s(*v, "bench");
    s.get_list("batch_sizes", cfg.bench.options.batch_sizes);
    s.get("repetitions", cfg.bench.options.repetitions);
    s.get_list("modes", cfg.bench.modes);
    s.get("max_sentences", cfg.bench.max_sentences);
    s.finish();
  }

  if (const json* v = top.find("intervals")) {
    Section s(*v, "intervals");
    s.get("step", cfg.intervals.step);
    s.get("min_eligible", cfg.intervals.min_eligible);
    s.get("batch_size", cfg.intervals.batch.batch_size);
    s.finish();
  }

  if (const json* v = top.find("sweep")) {
    Section s(*v, "sweep");
    s.get_list("alpha_mins", cfg.sweep.alpha_mins);
    s.get("batch_size", cfg.sweep.batch_size);
    s.finish();
  }
  top.finish();
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const PipelineConfig& cfg) {
  json domains = json::array();
  for (const auto& d : cfg.corpus.domains) {
    domains.push_back({{"name", d.name},
                       {"shift_fraction", d.shift_fraction},
                       {"noise_rate", d.noise_rate},
                       {"sizes", sizes_json(d.sizes)}});
  }
  const auto& p = cfg.paths;
  const auto& mx = cfg.corpus.mixing;
  json j = {
      {"seed", cfg.seed},
      {"workers", cfg.workers},
      {"paths",
       {{"work_dir", p.work_dir}, {"vocab", p.vocab}, {"general_corpus", p.general_corpus}, {"model", p.model},
        {"store", p.store}, {"samples_train", p.samples_train}, {"samples_heldout", p.samples_heldout},
        {"classifier", p.classifier}, {"lambda_tran", p.lambda_tran}, {"lambda_bina", p.lambda_bina},
        {"reports", p.reports}}},
      {"corpus",
       {{"vocab_size", cfg.corpus.vocab_size},
        {"general_noise", cfg.corpus.general_noise},
        {"general_sizes", sizes_json(cfg.corpus.general_sizes)},
        {"length", {{"min", cfg.corpus.length.min}, {"max", cfg.corpus.length.max}}},
        {"mixing",
         {{"shifted_sense_rate", mx.shifted_sense_rate},
          {"polysemy_fraction", mx.polysemy_fraction},
          {"polysemy_rate", mx.polysemy_rate},
          {"common_weight", mx.common_weight},
          {"rare_weight", mx.rare_weight}}},
        {"domains", domains},
        {"active_domain", cfg.corpus.active_domain}}},
      {"model",
       {{"d", cfg.model.d}, {"d_ff", cfg.model.d_ff}, {"epochs", cfg.model.epochs}, {"lr", cfg.model.lr},
        {"batch_size", cfg.model.batch_size}, {"clip_norm", cfg.model.clip_norm}}},
      {"knn", {{"k", cfg.knn.k}, {"temperature", cfg.knn.temperature}, {"lambda", cfg.knn.lambda}}},
      {"store", {{"keep_fraction", cfg.store.keep_fraction}}},
      {"samples",
       {{"train_fraction", cfg.samples.train_fraction}, {"criteria", criteria_name(cfg.samples.criteria)}}},
      {"classifier",
       {{"epochs", cfg.classifier.train.epochs},
        {"lr", cfg.classifier.train.lr},
        {"batch_size", cfg.classifier.train.batch_size},
        {"loss", loss_name(cfg.classifier.train.loss)},
        {"gamma", cfg.classifier.gamma},
        {"features", mask_names(cfg.classifier.train.feature_mask)}}},
      {"schedule", {{"alpha_min", cfg.schedule.alpha_min}}},
      {"ar",
       {{"alpha", cfg.ar.decode.alpha}, {"hidden", cfg.ar.train.hidden}, {"epochs", cfg.ar.train.epochs},
        {"lr", cfg.ar.train.lr}, {"batch_size", cfg.ar.train.batch_size}, {"f1_alphas", cfg.ar.f1_alphas}}},
      {"bench",
       {{"batch_sizes", cfg.bench.options.batch_sizes},
        {"repetitions", cfg.bench.options.repetitions},
        {"modes", cfg.bench.modes},
        {"max_sentences", cfg.bench.max_sentences}}},
      {"intervals",
       {{"step", cfg.intervals.step},
        {"min_eligible", cfg.intervals.min_eligible},
        {"batch_size", cfg.intervals.batch.batch_size}}},
      {"sweep", {{"alpha_mins", cfg.sweep.alpha_mins}, {"batch_size", cfg.sweep.batch_size}}},
  };
  if (cfg.classifier.alpha_c) j["classifier"]["alpha_c"] = *cfg.classifier.alpha_c;
  else j["classifier"]["alpha_c"] = "balanced";
  j["schedule"]["T"] = cfg.schedule.T ? json(*cfg.schedule.T) : json(nullptr);
  return j.dump(2);
}

std::uint64_t stream_seed(const PipelineConfig& cfg, const std::string& stream) {
  return derive_seed(cfg.seed, fnv1a(stream));
}

Corpora generate_corpora(const PipelineConfig& cfg) {
  cfg.validate();
  Corpora c{Vocab::synthetic(cfg.corpus.vocab_size), {}, {}, {}, {}};
  c.general_spec = make_general_domain(c.vocab, stream_seed(cfg, "corpus/general"), cfg.corpus.general_noise);
  for (const auto& d : cfg.corpus.domains) {
    c.domain_specs.push_back(
        derive_domain(c.general_spec, d.name, d.shift_fraction, d.noise_rate, stream_seed(cfg, "corpus/" + d.name)));
  }
  for (const auto& spec : c.domain_specs) {
    mix_domain_senses(c.general_spec, spec, cfg.corpus.mixing, stream_seed(cfg, "corpus/mixing"));
  }
  c.general = generate_domain(c.general_spec, c.vocab, cfg.corpus.general_sizes, cfg.corpus.length);
  for (std::size_t i = 0; i < c.domain_specs.size(); ++i) {
    c.domains.push_back(generate_domain(c.domain_specs[i], c.vocab, cfg.corpus.domains[i].sizes, cfg.corpus.length));
  }
  return c;
}

const CorpusSplit& find_domain(const std::vector<CorpusSplit>& domains, const std::string& name) {
  for (const auto& d : domains) {
    if (d.domain == name) return d;
  }
  throw ValidationError("no corpus for domain '" + name + "'");
}

ModelParams train_base_model(const PipelineConfig& cfg, const CorpusSplit& general) {
  ModelConfig mc = cfg.model;
  mc.seed = stream_seed(cfg, "model");
  return train_base(general.train, general.vocab_size, mc);
}

Datastore build_domain_store(const PipelineConfig& cfg, const ModelParams& params, const CorpusSplit& domain) {
  Datastore store = build_datastore(params, domain.train);
  if (cfg.store.keep_fraction < 1.0) store = prune_random(store, cfg.store.keep_fraction, stream_seed(cfg, "prune"));
  return store;
}

SampleSets build_sample_sets(const PipelineConfig& cfg, const ModelParams& params, const Datastore& store,
                             const CorpusSplit& domain) {
  const auto [train_pairs, heldout_pairs] = split_head(domain.valid, cfg.samples.train_fraction);
  if (train_pairs.empty() || heldout_pairs.empty()) {
    throw ValidationError("samples.train_fraction leaves an empty training or held-out part");
  }
  SampleSets s;
  s.train = build_training_samples(params, store, train_pairs, cfg.knn, cfg.samples.criteria);
  s.heldout = build_training_samples(params, store, heldout_pairs, cfg.knn, cfg.samples.criteria);
  return s;
}

ThresholdSchedule resolve_schedule(const PipelineConfig& cfg, const CorpusSplit& domain) {
  ThresholdSchedule s;
  s.alpha_min = cfg.schedule.alpha_min;
  s.T = cfg.schedule.T ? *cfg.schedule.T : corpus_stats(domain.valid).mean_target_length;
  s.validate();
  return s;
}

ClassifierTrainResult train_skip_classifier(const PipelineConfig& cfg, const SampleSets& samples,
                                            const ThresholdSchedule& schedule) {
  FocalLossConfig loss = FocalLossConfig::balanced(samples.train, cfg.classifier.gamma);
  if (cfg.classifier.alpha_c) loss.alpha_c = *cfg.classifier.alpha_c;
  ClassifierTrainConfig tc = cfg.classifier.train;
  tc.seed = stream_seed(cfg, "classifier");
  return train_classifier(samples.train, samples.heldout, loss, tc, schedule);
}

LambdaEstimator train_estimator(const PipelineConfig& cfg, LambdaObjective mode, const SampleSets& samples) {
  LambdaTrainConfig tc = cfg.ar.train;
  tc.seed = stream_seed(cfg, "lambda");
  return train_lambda(mode, samples.train, tc);
}

DecodeMode make_mode(const std::string& name, const SkipClassifier* classifier, const ThresholdSchedule& schedule,
                     const LambdaEstimator* tran, const ArConfig& ar) {
  if (name == "base_only") return BaseOnly{};
  if (name == "vanilla_knn") return VanillaKnn{};
  if (name == "ar_skip") {
    if (!tran) throw ValidationError("mode ar_skip needs a trained Tran-lambda estimator");
    return ArSkip{ar, *tran};
  }
  if (name == "dr_skip") {
    if (!classifier) throw ValidationError("mode dr_skip needs a trained classifier");
    return DrSkip{*classifier, schedule};
  }
  if (name.rfind("interval:", 0) == 0) {
    const auto rest = name.substr(9);
    const auto colon = rest.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument("missing ':'");
      std::size_t used = 0;
      const auto lo = std::stoull(rest.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument("bad lo");
      const auto hi_text = rest.substr(colon + 1);
      const auto hi = std::stoull(hi_text, &used);
      if (used != hi_text.size()) throw std::invalid_argument("bad hi");
      Interval iv{lo, hi};
      validate(DecodeMode{iv});
      return iv;
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const ValidationError*>(&e)) throw;
      throw ValidationError("mode '" + name + "' must look like interval:<lo>:<hi>");
    }
  }
  throw ValidationError("unknown mode '" + name + "' (base_only, vanilla_knn, ar_skip, dr_skip, interval:<lo>:<hi>)");
}

}  // namespace knndr
