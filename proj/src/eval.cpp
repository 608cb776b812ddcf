#include "knndr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "knndr/error.hpp"

namespace knndr {

namespace {

using NgramCounts = std::map<Sequence, std::size_t>;

NgramCounts count_ngrams(const Sequence& s, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sequence(s.begin() + i, s.begin() + i + n)];
  return counts;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<Sequence> sources_of(std::span<const ParallelPair> pairs) {
  std::vector<Sequence> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.source);
  return out;
}

std::vector<Sequence> references_of(std::span<const ParallelPair> pairs) {
  std::vector<Sequence> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(strip_eos(p.target));
  return out;
}

std::vector<Sequence> hypotheses_of(const BatchDecode& decoded) {
  std::vector<Sequence> out;
  out.reserve(decoded.traces.size());
  for (const auto& t : decoded.traces) out.push_back(strip_eos(t.output));
  return out;
}

std::string optional_cell(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream s;
  s << std::setprecision(10) << *v;
  return s.str();
}

}  // namespace

BleuScore bleu(std::span<const Sequence> hypotheses, std::span<const Sequence> references) {
  if (hypotheses.empty()) throw ValidationError("bleu: empty hypothesis list");
  if (hypotheses.size() != references.size()) throw ValidationError("bleu: hypothesis/reference count mismatch");

  BleuScore out;
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    out.hypothesis_length += hypotheses[i].size();
    out.reference_length += references[i].size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto hyp = count_ngrams(hypotheses[i], n);
      const auto ref = count_ngrams(references[i], n);
      for (const auto& [gram, count] : hyp) {
        totals[n - 1] += count;
        const auto it = ref.find(gram);
        if (it != ref.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    double p = kBleuSmoothing;
    if (totals[n] > 0) {
      const double m = matches[n] > 0 ? static_cast<double>(matches[n]) : kBleuSmoothing;
      p = m / static_cast<double>(totals[n]);
    }
    out.precisions[n] = p;
    log_sum += std::log(p);
  }
  const auto c = static_cast<double>(out.hypothesis_length);
  const auto r = static_cast<double>(out.reference_length);
  out.brevity_penalty = c == 0.0 ? 0.0 : std::min(1.0, std::exp(1.0 - r / c));
  out.score = 100.0 * out.brevity_penalty * std::exp(log_sum / 4.0);
  return out;
}

F1Result skip_f1(const std::vector<bool>& predicted, std::span<const SampleLabel> gold) {
  std::vector<bool> g(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) g[i] = gold[i] == SampleLabel::kConduct;
  return binary_f1(predicted, g);
}

void BenchOptions::validate() const {
  if (batch_sizes.empty()) throw ValidationError("bench.batch_sizes must not be empty");
  for (auto b : batch_sizes) {
    if (b == 0) throw ValidationError("bench.batch_sizes entries must be >= 1");
  }
  if (repetitions < 3) throw ValidationError("bench.repetitions must be >= 3");
  if (workers == 0) throw ValidationError("workers must be >= 1");
}

std::optional<F1Result> mode_f1(const DecodeMode& mode, std::span<const TrainingSample> samples) {
  if (samples.empty()) return std::nullopt;
  if (const auto* ar = std::get_if<ArSkip>(&mode)) return ar_skip_f1(ar->estimator, ar->config.alpha, samples);
  if (const auto* dr = std::get_if<DrSkip>(&mode)) return classifier_f1(dr->classifier, dr->schedule, samples);
  return std::nullopt;
}

std::vector<BenchResult> benchmark(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                                   std::span<const NamedMode> modes, std::span<const ParallelPair> pairs,
                                   const BenchOptions& options, std::span<const TrainingSample> f1_samples) {
  options.validate();
  if (pairs.empty()) throw ValidationError("benchmark: no sentences");
  const auto sources = sources_of(pairs);
  const auto refs = references_of(pairs);

  std::vector<BenchResult> rows;
  for (const auto& named : modes) {
    const auto f1 = mode_f1(named.mode, f1_samples);
    for (std::size_t batch : options.batch_sizes) {
      const BatchOptions bo{batch, options.workers};
      const BatchDecode warm = translate_batch(params, store, knn, named.mode, sources, bo);
      std::vector<double> rates;
      for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
        const BatchDecode run = translate_batch(params, store, knn, named.mode, sources, bo);
        if (run.token_count != warm.token_count || run.retrieval_count != warm.retrieval_count) {
          throw StateError("benchmark: repeated decoding produced different outputs");
        }
        rates.push_back(static_cast<double>(run.token_count) / run.total_seconds);
      }
      BenchResult r;
      r.mode = named.name;
      r.batch_size = batch;
      r.workers = options.workers;
      r.tok_per_sec = median(rates);
      r.token_count = warm.token_count;
      r.retrieval_count = warm.retrieval_count;
      r.retrieval_rate = static_cast<double>(warm.retrieval_count) / static_cast<double>(warm.token_count);
      r.bleu = bleu(hypotheses_of(warm), refs);
      if (f1 && f1->defined) r.f1 = f1->f1;
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

std::vector<BenchResult> alpha_min_sweep(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                                         const SkipClassifier& classifier, const ThresholdSchedule& schedule,
                                         std::span<const double> alpha_mins, std::span<const ParallelPair> pairs,
                                         const BatchOptions& options, std::span<const TrainingSample> f1_samples) {
  if (pairs.empty()) throw ValidationError("alpha_min_sweep: no sentences");
  const auto sources = sources_of(pairs);
  const auto refs = references_of(pairs);
  std::vector<BenchResult> rows;
  for (double a : alpha_mins) {
    const DecodeMode mode = DrSkip{classifier, ThresholdSchedule{a, schedule.T}};
    const BatchDecode run = translate_batch(params, store, knn, mode, sources, options);
    BenchResult r;
    r.mode = "dr_skip";
    r.batch_size = options.batch_size;
    r.workers = options.workers;
    r.tok_per_sec = static_cast<double>(run.token_count) / run.total_seconds;
    r.token_count = run.token_count;
    r.retrieval_count = run.retrieval_count;
    r.retrieval_rate = static_cast<double>(run.retrieval_count) / static_cast<double>(run.token_count);
    r.bleu = bleu(hypotheses_of(run), refs);
    const auto f1 = mode_f1(mode, f1_samples);
    if (f1 && f1->defined) r.f1 = f1->f1;
    r.alpha_min = a;
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<IntervalRow> interval_analysis(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                                           std::span<const ParallelPair> pairs, const IntervalOptions& options) {
  if (pairs.empty()) throw ValidationError("interval_analysis: empty split");
  if (options.step == 0) throw ValidationError("interval_analysis: step must be >= 1");
  const auto refs = references_of(pairs);
  std::size_t longest = 0;
  for (const auto& r : refs) longest = std::max(longest, r.size());

  // Hypotheses of the previous interval (or base_only) for every pair that was eligible then.
  std::vector<Sequence> previous = hypotheses_of(translate_batch(params, store, knn, BaseOnly{}, sources_of(pairs),
                                                                 options.batch));
  std::vector<std::size_t> previous_ids(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) previous_ids[i] = i;

  std::vector<IntervalRow> rows;
  bool exhausted = false;
  for (std::size_t right = options.step; right <= longest; right += options.step) {
    IntervalRow row;
    row.right = right;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (refs[i].size() >= right) ids.push_back(i);
    }
    row.eligible_count = ids.size();
    if (exhausted || ids.size() < options.min_eligible) {
      row.omitted = true;
      exhausted = true;
      rows.push_back(row);
      continue;
    }
    std::vector<Sequence> sources;
    std::vector<Sequence> subset_refs;
    std::vector<Sequence> before;
    std::size_t cursor = 0;
    for (std::size_t i : ids) {
      sources.push_back(pairs[i].source);
      subset_refs.push_back(refs[i]);
      while (previous_ids[cursor] != i) ++cursor;
      before.push_back(previous[cursor]);
    }
    auto current = hypotheses_of(translate_batch(params, store, knn, Interval{0, right}, sources, options.batch));
    row.bleu = bleu(current, subset_refs).score;
    row.delta_bleu = row.bleu - bleu(before, subset_refs).score;
    rows.push_back(row);
    previous = std::move(current);
    previous_ids = std::move(ids);
  }
  return rows;
}

void write_report_csv(const std::string& path, std::span<const BenchResult> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "mode,batch_size,workers,tok_per_sec,retrieval_rate,token_count,retrieval_count,bleu,bleu_p1,bleu_p2,"
         "bleu_p3,bleu_p4,brevity_penalty,f1,alpha_min\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.mode << ',' << r.batch_size << ',' << r.workers << ',' << r.tok_per_sec << ',' << r.retrieval_rate << ','
        << r.token_count << ',' << r.retrieval_count << ',' << r.bleu.score;
    for (double p : r.bleu.precisions) out << ',' << p;
    out << ',' << r.bleu.brevity_penalty << ',' << optional_cell(r.f1) << ',' << optional_cell(r.alpha_min) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

void write_report_md(const std::string& path, std::span<const BenchResult> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "| Mode | alpha_min | Batch | Workers | BLEU | #Tok/Sec | Retrieval rate | F1 |\n";
  out << "|---|---|---|---|---|---|---|---|\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out << "| " << r.mode << " | ";
    if (r.alpha_min) out << std::setprecision(2) << *r.alpha_min;
    out << " | " << r.batch_size << " | " << r.workers << " | " << std::setprecision(2) << r.bleu.score << " | "
        << std::setprecision(1) << r.tok_per_sec << " | " << std::setprecision(3) << r.retrieval_rate << " | ";
    if (r.f1) out << std::setprecision(3) << *r.f1;
    out << " |\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

void write_intervals_csv(const std::string& path, std::span<const IntervalRow> rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "R,eligible_count,bleu,delta_bleu,omitted\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.right << ',' << r.eligible_count << ',';
    if (!r.omitted) out << r.bleu << ',' << r.delta_bleu;
    else out << ',';
    out << ',' << (r.omitted ? 1 : 0) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace knndr
