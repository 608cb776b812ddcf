#include "knndr/engine.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <json.hpp>
#include <thread>

#include "knndr/error.hpp"

namespace knndr {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Policy {
  bool retrieve = false;
  double lambda = 0.0;
  std::optional<double> score;
  std::optional<double> alpha_t;
};

Policy choose(const DecodeMode& mode, const KnnConfig& knn, const DecoderStepOutput& step, std::size_t t) {
  Policy p;
  p.lambda = knn.lambda;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, BaseOnly>) {
          p.retrieve = false;
        } else if constexpr (std::is_same_v<M, VanillaKnn>) {
          p.retrieve = true;
        } else if constexpr (std::is_same_v<M, ArSkip>) {
          const auto d = ar_skip_decision(m.estimator, extract_features(step), m.config.alpha);
          p.retrieve = !d.skip;
          p.lambda = d.lambda_hat;
          p.score = d.lambda_hat;
        } else if constexpr (std::is_same_v<M, DrSkip>) {
          const auto d = dr_skip_decision(m.classifier, m.schedule, extract_features(step), t);
          p.retrieve = !d.skip;
          p.score = d.p_retrieve;
          p.alpha_t = d.alpha_t;
        } else {
          p.retrieve = t >= m.lo && t <= m.hi;
        }
      },
      mode);
  return p;
}

/// Decodes `sources` in lockstep into `traces` (same length, same order).
void decode_group(const ModelParams& params, const Datastore& store, const KnnConfig& knn, const DecodeMode& mode,
                  std::span<const Sequence> sources, std::span<DecodeTrace> traces) {
  const std::size_t n = sources.size();
  std::vector<Sequence> prefix(n, Sequence{Vocab::kBos});
  std::vector<bool> done(n, false);
  std::vector<std::size_t> limit(n);
  for (std::size_t i = 0; i < n; ++i) {
    limit[i] = max_output_length(sources[i]);
    traces[i] = DecodeTrace{};
  }

  std::vector<std::size_t> active;
  std::vector<DecoderStepOutput> steps;
  std::vector<Policy> policies;
  for (std::size_t t = 0;; ++t) {
    active.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (!done[i] && t < limit[i]) active.push_back(i);
    }
    if (active.empty()) break;

    steps.clear();
    policies.clear();
    std::vector<std::span<const double>> queries;
    std::vector<std::size_t> query_of(active.size(), SIZE_MAX);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      steps.push_back(decode_step(params, sources[i], prefix[i]));
      policies.push_back(choose(mode, knn, steps.back(), t));
    }
    for (std::size_t a = 0; a < active.size(); ++a) {
      if (policies[a].retrieve) {
        query_of[a] = queries.size();
        queries.emplace_back(steps[a].hidden.data(), static_cast<std::size_t>(steps[a].hidden.size()));
      }
    }
    std::vector<std::vector<Neighbor>> neighbors;
    if (!queries.empty()) neighbors = query_knn_batch(store, queries, knn.k);

    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      DecodeTrace& trace = traces[i];
      StepRecord rec;
      rec.t = t;
      rec.score = policies[a].score;
      rec.alpha_t = policies[a].alpha_t;
      TokenId next = 0;
      if (query_of[a] != SIZE_MAX && !neighbors[query_of[a]].empty()) {
        const Vector p_knn = knn_distribution(neighbors[query_of[a]], knn.temperature, params.vocab_size());
        next = static_cast<TokenId>(argmax(interpolate(p_knn, steps[a].dist, policies[a].lambda)));
        rec.skipped = false;
        ++trace.retrieval_count;
      } else {
        next = static_cast<TokenId>(argmax(steps[a].dist));
      }
      trace.steps.push_back(rec);
      trace.output.push_back(next);
      prefix[i].push_back(next);
      if (next == Vocab::kEos) done[i] = true;
    }
  }
  for (std::size_t i = 0; i < n; ++i) traces[i].token_count = traces[i].output.size();
}

}  // namespace

std::string mode_name(const DecodeMode& mode) {
  return std::visit(
      [](const auto& m) -> std::string {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, BaseOnly>) return "base_only";
        else if constexpr (std::is_same_v<M, VanillaKnn>) return "vanilla_knn";
        else if constexpr (std::is_same_v<M, ArSkip>) return "ar_skip";
        else if constexpr (std::is_same_v<M, DrSkip>) return "dr_skip";
        else return "interval";
      },
      mode);
}

void validate(const DecodeMode& mode) {
  std::visit(
      [](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, ArSkip>) {
          m.config.validate();
          if (!m.estimator.trained) throw StateError("ar_skip: estimator is not trained");
        } else if constexpr (std::is_same_v<M, DrSkip>) {
          m.schedule.validate();
          if (!m.classifier.trained) throw StateError("dr_skip: classifier is not trained");
        } else if constexpr (std::is_same_v<M, Interval>) {
          if (m.lo > m.hi) throw ValidationError("interval: lo must be <= hi");
        }
      },
      mode);
}

std::size_t max_output_length(std::span<const TokenId> source) { return 2 * source.size() + 10; }

Sequence strip_eos(const Sequence& tokens) {
  Sequence out = tokens;
  if (!out.empty() && out.back() == Vocab::kEos) out.pop_back();
  return out;
}

DecodeTrace translate(const ModelParams& params, const Datastore& store, const KnnConfig& knn, const DecodeMode& mode,
                      std::span<const TokenId> source) {
  const Sequence src(source.begin(), source.end());
  auto result = translate_batch(params, store, knn, mode, std::span<const Sequence>(&src, 1), {});
  return std::move(result.traces.front());
}

void BatchOptions::validate() const {
  if (batch_size == 0) throw ValidationError("batch_size must be >= 1");
  if (workers == 0) throw ValidationError("workers must be >= 1");
}

BatchDecode translate_batch(const ModelParams& params, const Datastore& store, const KnnConfig& knn,
                            const DecodeMode& mode, std::span<const Sequence> sources, const BatchOptions& options) {
  knn.validate();
  options.validate();
  validate(mode);
  check_consistent(params);
  check_compatible(params, store);
  for (const auto& s : sources) {
    if (s.empty()) throw ValidationError("translate: empty source sentence");
    for (TokenId id : s) {
      if (id >= params.vocab_size()) throw ValidationError("translate: source token outside vocabulary");
    }
  }

  BatchDecode out;
  out.traces.resize(sources.size());
  const auto total_start = Clock::now();
  for (std::size_t start = 0; start < sources.size(); start += options.batch_size) {
    const std::size_t end = std::min(sources.size(), start + options.batch_size);
    const std::size_t count = end - start;
    const std::size_t workers = std::min(options.workers, count);
    const auto batch_start = Clock::now();
    if (workers <= 1) {
      decode_group(params, store, knn, mode, sources.subspan(start, count),
                   std::span<DecodeTrace>(out.traces).subspan(start, count));
    } else {
      std::vector<std::thread> threads;
      std::vector<std::exception_ptr> errors(workers);
      for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = start + count * w / workers;
        const std::size_t hi = start + count * (w + 1) / workers;
        threads.emplace_back([&, w, lo, hi] {
          try {
            decode_group(params, store, knn, mode, sources.subspan(lo, hi - lo),
                         std::span<DecodeTrace>(out.traces).subspan(lo, hi - lo));
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
      for (auto& th : threads) th.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    const double secs = seconds_since(batch_start);
    out.batch_seconds.push_back(secs);
    for (std::size_t i = start; i < end; ++i) out.traces[i].elapsed = secs;
  }
  out.total_seconds = seconds_since(total_start);
  for (const auto& tr : out.traces) {
    out.token_count += tr.token_count;
    out.retrieval_count += tr.retrieval_count;
  }
  return out;
}

void write_traces(const std::string& path, std::span<const DecodeTrace> traces) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& tr : traces) {
    nlohmann::json j;
    j["output"] = tr.output;
    j["retrieval_count"] = tr.retrieval_count;
    j["token_count"] = tr.token_count;
    j["elapsed"] = tr.elapsed;
    auto& steps = j["steps"] = nlohmann::json::array();
    for (const auto& s : tr.steps) {
      nlohmann::json r{{"t", s.t}, {"skipped", s.skipped}};
      if (s.score) r["score"] = *s.score;
      if (s.alpha_t) r["alpha_t"] = *s.alpha_t;
      steps.push_back(std::move(r));
    }
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace knndr
