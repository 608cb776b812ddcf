#include "knndr/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "knndr/binary_io.hpp"
#include "knndr/error.hpp"
#include "knndr/rng.hpp"

namespace knndr {

namespace {

constexpr std::uint32_t kModelVersion = 1;

std::size_t offset_index(std::size_t j, std::size_t t) {
  const auto rel = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(t);
  const auto max = static_cast<std::ptrdiff_t>(ModelParams::kMaxOffset);
  return static_cast<std::size_t>(std::clamp(rel, -max, max) + max);
}

void softmax_inplace(Vector& v) {
  const double m = v.maxCoeff();
  v = (v.array() - m).exp();
  v /= v.sum();
}

/// Attention of one step: returns attention weights and the context vector.
struct AttentionResult {
  Vector attn;
  Vector context;
  Vector query;        ///< Wq^T e_q
  Vector key_query;    ///< Wk q
};

AttentionResult attend(const ModelParams& p, const RowMatrix& src_embed, TokenId query_token, std::size_t t) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.hidden_dim()));
  AttentionResult r;
  r.query = p.attn_query.transpose() * p.embed.row(query_token).transpose();
  r.key_query = p.attn_key * r.query;
  r.attn = src_embed * r.key_query * inv_sqrt_d;
  for (Eigen::Index j = 0; j < r.attn.size(); ++j) {
    r.attn[j] += p.offset_bias[static_cast<Eigen::Index>(offset_index(static_cast<std::size_t>(j), t))];
  }
  softmax_inplace(r.attn);
  r.context = src_embed.transpose() * r.attn;
  return r;
}

RowMatrix gather_rows(const RowMatrix& table, std::span<const TokenId> ids) {
  RowMatrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  return out;
}

void check_tokens(const ModelParams& p, std::span<const TokenId> ids, const char* what) {
  for (TokenId id : ids) {
    if (id >= p.vocab_size()) {
      throw ValidationError(std::string(what) + " token id " + std::to_string(id) + " outside the model vocabulary");
    }
  }
}

float to_f32(double x) { return static_cast<float>(x); }

}  // namespace

// ---------------------------------------------------------------------------
// ModelParams

ModelParams ModelParams::zeros(std::size_t vocab_size, std::size_t d, std::size_t d_ff) {
  if (vocab_size == 0 || d == 0 || d_ff == 0) throw ValidationError("model dimensions must be >= 1");
  const auto v = static_cast<Eigen::Index>(vocab_size);
  const auto h = static_cast<Eigen::Index>(d);
  const auto f = static_cast<Eigen::Index>(d_ff);
  ModelParams p;
  p.embed = RowMatrix::Zero(v, h);
  p.attn_query = RowMatrix::Zero(h, h);
  p.attn_key = RowMatrix::Zero(h, h);
  p.offset_bias = Vector::Zero(kNumOffsets);
  p.ff1 = RowMatrix::Zero(h, f);
  p.ff1_bias = Vector::Zero(f);
  p.ff2 = RowMatrix::Zero(f, h);
  p.ff2_bias = Vector::Zero(h);
  p.out_proj = RowMatrix::Zero(h, v);
  p.out_bias = Vector::Zero(v);
  return p;
}

ModelParams ModelParams::init(std::size_t vocab_size, std::size_t d, std::size_t d_ff, std::uint64_t seed) {
  ModelParams p = zeros(vocab_size, d, d_ff);
  p.seed = seed;
  Rng rng(derive_seed(seed, fnv1a("base-model-init")));
  for (auto t : p.tensors()) {
    for (double& x : t) x = rng.uniform(-0.08, 0.08);
  }
  p.round_to_f32();
  return p;
}

std::vector<std::span<double>> ModelParams::tensors() {
  auto s = [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); };
  return {s(embed), s(attn_query), s(attn_key), s(offset_bias), s(ff1), s(ff1_bias),
          s(ff2),   s(ff2_bias),   s(out_proj), s(out_bias)};
}

std::vector<std::span<const double>> ModelParams::tensors() const {
  std::vector<std::span<const double>> out;
  for (auto t : const_cast<ModelParams*>(this)->tensors()) out.emplace_back(t.data(), t.size());
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (auto t : tensors()) n += t.size();
  return n;
}

void ModelParams::round_to_f32() {
  for (auto t : tensors()) {
    for (double& x : t) x = static_cast<double>(static_cast<float>(x));
  }
}

std::uint64_t ModelParams::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto t : tensors()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
    for (std::size_t i = 0; i < t.size_bytes(); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (seed != other.seed || vocab_size() != other.vocab_size() || hidden_dim() != other.hidden_dim() ||
      ff_dim() != other.ff_dim()) {
    return false;
  }
  const auto a = tensors();
  const auto b = other.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size() || std::memcmp(a[i].data(), b[i].data(), a[i].size_bytes()) != 0) return false;
  }
  return true;
}

void check_consistent(const ModelParams& p) {
  const auto v = p.embed.rows();
  const auto d = p.embed.cols();
  const auto f = p.ff1.cols();
  const bool ok = v > 0 && d > 0 && f > 0 && p.attn_query.rows() == d && p.attn_query.cols() == d &&
                  p.attn_key.rows() == d && p.attn_key.cols() == d &&
                  p.offset_bias.size() == static_cast<Eigen::Index>(ModelParams::kNumOffsets) &&
                  p.ff1.rows() == d && p.ff1_bias.size() == f && p.ff2.rows() == f && p.ff2.cols() == d &&
                  p.ff2_bias.size() == d && p.out_proj.rows() == d && p.out_proj.cols() == v &&
                  p.out_bias.size() == v;
  if (!ok) throw ValidationError("model parameter dimensions are inconsistent");
}

// ---------------------------------------------------------------------------
// Forward

DecoderStepOutput decode_step(const ModelParams& params, std::span<const TokenId> source,
                              std::span<const TokenId> prefix) {
  if (source.empty()) throw ValidationError("decode_step: empty source");
  if (prefix.empty() || prefix.front() != Vocab::kBos) throw ValidationError("decode_step: prefix must start with BOS");
  check_tokens(params, source, "source");
  check_tokens(params, prefix, "prefix");

  const RowMatrix src_embed = gather_rows(params.embed, source);
  AttentionResult att = attend(params, src_embed, prefix.back(), prefix.size() - 1);

  Vector pre = params.ff1.transpose() * att.context + params.ff1_bias;
  pre = pre.cwiseMax(0.0);
  DecoderStepOutput out;
  out.hidden = att.context + params.ff2.transpose() * pre + params.ff2_bias;
  out.dist = params.out_proj.transpose() * out.hidden + params.out_bias;
  softmax_inplace(out.dist);
  out.attn = std::move(att.attn);
  return out;
}

std::vector<DecoderStepOutput> teacher_force_pass(const ModelParams& params, const ParallelPair& pair) {
  std::vector<DecoderStepOutput> outs;
  outs.reserve(pair.target.size());
  Sequence prefix = {Vocab::kBos};
  for (TokenId gold : pair.target) {
    outs.push_back(decode_step(params, pair.source, prefix));
    prefix.push_back(gold);
  }
  return outs;
}

std::size_t argmax(const Vector& v) {
  std::size_t best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
  }
  return best;
}

double batch_loss(const ModelParams& params, std::span<const ParallelPair> pairs) {
  double loss = 0.0;
  for (const auto& pair : pairs) {
    const auto outs = teacher_force_pass(params, pair);
    for (std::size_t t = 0; t < outs.size(); ++t) loss -= std::log(outs[t].dist[pair.target[t]]);
  }
  return loss / static_cast<double>(pairs.size());
}

double teacher_forced_accuracy(const ModelParams& params, std::span<const ParallelPair> pairs) {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const auto& pair : pairs) {
    const auto outs = teacher_force_pass(params, pair);
    for (std::size_t t = 0; t < outs.size(); ++t) {
      correct += argmax(outs[t].dist) == pair.target[t];
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Batched loss and gradient

LossGradient batch_loss_gradient(const ModelParams& params, std::span<const ParallelPair> pairs) {
  if (pairs.empty()) throw ValidationError("batch_loss_gradient: empty batch");
  check_consistent(params);
  const auto d = static_cast<Eigen::Index>(params.hidden_dim());
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double scale = 1.0 / static_cast<double>(pairs.size());

  std::size_t steps = 0;
  for (const auto& p : pairs) {
    if (p.source.empty() || p.target.empty()) throw ValidationError("batch_loss_gradient: empty sequence");
    check_tokens(params, p.source, "source");
    check_tokens(params, p.target, "target");
    steps += p.target.size();
  }
  const auto n = static_cast<Eigen::Index>(steps);

  // Attention per step.
  std::vector<RowMatrix> src_embeds;
  src_embeds.reserve(pairs.size());
  std::vector<AttentionResult> atts;
  atts.reserve(steps);
  RowMatrix context(n, d);
  Eigen::Index row = 0;
  for (const auto& pair : pairs) {
    src_embeds.push_back(gather_rows(params.embed, pair.source));
    for (std::size_t t = 0; t < pair.target.size(); ++t) {
      const TokenId q = t == 0 ? Vocab::kBos : pair.target[t - 1];
      atts.push_back(attend(params, src_embeds.back(), q, t));
      context.row(row++) = atts.back().context.transpose();
    }
  }

  // Feed-forward and output projection, batched.
  const RowMatrix pre = (context * params.ff1).rowwise() + params.ff1_bias.transpose();
  const RowMatrix act = pre.cwiseMax(0.0);
  RowMatrix hidden = act * params.ff2;
  hidden.rowwise() += params.ff2_bias.transpose();
  hidden += context;
  RowMatrix probs = (hidden * params.out_proj).rowwise() + params.out_bias.transpose();

  double loss = 0.0;
  row = 0;
  for (const auto& pair : pairs) {
    for (TokenId gold : pair.target) {
      auto r = probs.row(row);
      const double m = r.maxCoeff();
      r = (r.array() - m).exp();
      const double z = r.sum();
      r /= z;
      loss -= std::log(r[gold]);
      r[gold] -= 1.0;
      ++row;
    }
  }
  const RowMatrix d_logits = probs * scale;

  LossGradient out{loss * scale, ModelParams::zeros(params.vocab_size(), params.hidden_dim(), params.ff_dim())};
  ModelParams& g = out.grad;
  g.seed = params.seed;
  g.out_proj = hidden.transpose() * d_logits;
  g.out_bias = d_logits.colwise().sum().transpose();
  const RowMatrix d_hidden = d_logits * params.out_proj.transpose();
  g.ff2 = act.transpose() * d_hidden;
  g.ff2_bias = d_hidden.colwise().sum().transpose();
  RowMatrix d_pre = d_hidden * params.ff2.transpose();
  d_pre = d_pre.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
  g.ff1 = context.transpose() * d_pre;
  g.ff1_bias = d_pre.colwise().sum().transpose();
  const RowMatrix d_context = d_hidden + d_pre * params.ff1.transpose();

  // Attention backward per step.
  row = 0;
  std::size_t step = 0;
  for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
    const auto& pair = pairs[pi];
    const RowMatrix& src = src_embeds[pi];
    RowMatrix d_src = RowMatrix::Zero(src.rows(), d);
    for (std::size_t t = 0; t < pair.target.size(); ++t, ++step, ++row) {
      const AttentionResult& a = atts[step];
      const Vector dc = d_context.row(row).transpose();
      const Vector d_attn = src * dc;
      d_src += a.attn * dc.transpose();
      const double mean = a.attn.dot(d_attn);
      const Vector d_score = a.attn.cwiseProduct(d_attn.array().matrix() - Vector::Constant(a.attn.size(), mean));
      for (Eigen::Index j = 0; j < d_score.size(); ++j) {
        g.offset_bias[static_cast<Eigen::Index>(offset_index(static_cast<std::size_t>(j), t))] += d_score[j];
      }
      d_src += d_score * a.key_query.transpose() * inv_sqrt_d;
      const Vector d_key_query = src.transpose() * d_score * inv_sqrt_d;
      g.attn_key += d_key_query * a.query.transpose();
      const Vector d_query = params.attn_key.transpose() * d_key_query;
      const TokenId q = t == 0 ? Vocab::kBos : pair.target[t - 1];
      g.attn_query += params.embed.row(q).transpose() * d_query.transpose();
      g.embed.row(q) += (params.attn_query * d_query).transpose();
    }
    for (std::size_t j = 0; j < pair.source.size(); ++j) {
      g.embed.row(pair.source[j]) += d_src.row(static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

ModelParams train_base(std::span<const ParallelPair> corpus, std::size_t vocab_size, const ModelConfig& config,
                       const std::function<void(const EpochLog&)>& on_epoch) {
  if (corpus.empty()) throw ValidationError("train_base: empty corpus");
  if (config.d < 1 || config.d_ff < 1) throw ValidationError("train_base: d and d_ff must be >= 1");
  if (config.batch_size < 1) throw ValidationError("train_base: batch_size must be >= 1");
  if (!(config.lr > 0.0)) throw ValidationError("train_base: lr must be positive");
  if (!(config.clip_norm >= 0.0)) throw ValidationError("train_base: clip_norm must be >= 0");

  ModelParams params = ModelParams::init(vocab_size, config.d, config.d_ff, config.seed);
  std::vector<std::size_t> order(corpus.size());
  std::vector<ParallelPair> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, 1000 + epoch));
    rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_size, ++b) {
      batch.clear();
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(corpus[order[i]]);
        epoch_tokens += corpus[order[i]].target.size();
      }
      const LossGradient lg = batch_loss_gradient(params, batch);
      if (!std::isfinite(lg.loss)) throw TrainingDiverged("train_base", epoch, b);
      epoch_loss += lg.loss * static_cast<double>(batch.size());

      const auto src = lg.grad.tensors();
      double sq = 0.0;
      for (auto t : src) {
        for (double x : t) sq += x * x;
      }
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) throw TrainingDiverged("train_base", epoch, b);
      const double step = config.clip_norm > 0.0 && norm > config.clip_norm ? config.lr * config.clip_norm / norm
                                                                              : config.lr;
      auto dst = params.tensors();
      for (std::size_t k = 0; k < dst.size(); ++k) {
        for (std::size_t i = 0; i < dst[k].size(); ++i) dst[k][i] -= step * src[k][i];
      }
    }
    if (on_epoch) on_epoch({epoch, epoch_loss / static_cast<double>(epoch_tokens)});
  }
  params.round_to_f32();
  return params;
}

// ---------------------------------------------------------------------------
// Serialization

void save_model(const ModelParams& params, const std::string& path) {
  check_consistent(params);
  io::BinaryWriter w(path);
  w.magic("RGDM");
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(params.vocab_size()));
  w.u32(static_cast<std::uint32_t>(params.hidden_dim()));
  w.u32(static_cast<std::uint32_t>(params.ff_dim()));
  w.u32(static_cast<std::uint32_t>(ModelParams::kMaxOffset));
  w.u64(params.seed);
  std::vector<float> buf;
  for (auto t : params.tensors()) {
    buf.resize(t.size());
    std::transform(t.begin(), t.end(), buf.begin(), to_f32);
    w.f32s(buf);
  }
  w.close();
}

ModelParams load_model(const std::string& path) {
  io::BinaryReader r(path);
  r.expect_magic("RGDM");
  const auto version = r.u32();
  if (version != kModelVersion) throw FormatError(path + ": unsupported model version " + std::to_string(version));
  const auto v = r.u32();
  const auto d = r.u32();
  const auto f = r.u32();
  const auto max_offset = r.u32();
  if (v == 0 || d == 0 || f == 0) throw FormatError(path + ": zero model dimension");
  if (max_offset != ModelParams::kMaxOffset) throw FormatError(path + ": unsupported attention offset range");
  ModelParams p = ModelParams::zeros(v, d, f);
  p.seed = r.u64();
  std::vector<float> buf;
  for (auto t : p.tensors()) {
    buf.resize(t.size());
    r.f32s(buf);
    std::copy(buf.begin(), buf.end(), t.begin());
  }
  r.expect_end();
  return p;
}

}  // namespace knndr
