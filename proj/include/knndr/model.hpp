#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "knndr/corpus.hpp"

namespace knndr {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  std::size_t d = 64;
  std::size_t d_ff = 128;
  std::size_t epochs = 20;
  double lr = 0.1;
  std::size_t batch_size = 32;
  double clip_norm = 5.0;  ///< global gradient-norm clip; 0 disables
  std::uint64_t seed = 1;
};

/// Parameters of the single-layer attention encoder-decoder.
///
/// Step t attends from the embedding of the last prefix token to the source
/// embeddings; scores are (E[y_{t-1}] Wq) . (E[x_j] Wk) / sqrt(d) plus a learned bias
/// indexed by the clipped relative offset j - t. The attention context c feeds a
/// residual feed-forward block whose output is the hidden state
///   h = c + ff2^T relu(ff1^T c + b1) + b2
/// and the next-token distribution is softmax(out_proj^T h + out_bias).
struct ModelParams {
  static constexpr std::size_t kMaxOffset = 4;
  static constexpr std::size_t kNumOffsets = 2 * kMaxOffset + 1;

  RowMatrix embed;       ///< V x d
  RowMatrix attn_query;  ///< d x d
  RowMatrix attn_key;    ///< d x d
  Vector offset_bias;    ///< kNumOffsets
  RowMatrix ff1;         ///< d x d_ff
  Vector ff1_bias;
  RowMatrix ff2;  ///< d_ff x d
  Vector ff2_bias;
  RowMatrix out_proj;  ///< d x V
  Vector out_bias;
  std::uint64_t seed = 0;

  static ModelParams zeros(std::size_t vocab_size, std::size_t d, std::size_t d_ff);
  /// Uniform(-0.08, 0.08) from the seeded generator, rounded to f32 precision.
  static ModelParams init(std::size_t vocab_size, std::size_t d, std::size_t d_ff, std::uint64_t seed);

  std::size_t vocab_size() const { return static_cast<std::size_t>(embed.rows()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(embed.cols()); }
  std::size_t ff_dim() const { return static_cast<std::size_t>(ff1.cols()); }

  /// Every tensor's storage, in serialization order.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
  std::size_t parameter_count() const;

  /// Rounds every parameter to the nearest f32 value (the storage precision).
  void round_to_f32();
  std::uint64_t hash() const;
  bool operator==(const ModelParams& other) const;
};

/// One decoding step's view of the model.
struct DecoderStepOutput {
  Vector hidden;  ///< pre-projection activation h_t, the datastore key
  Vector dist;    ///< softmax over the vocabulary
  Vector attn;    ///< softmax over source positions
};

/// Validates dimensions; throws ValidationError.
void check_consistent(const ModelParams& params);

/// `prefix` must start with BOS; predicts the token at position prefix.size() - 1.
DecoderStepOutput decode_step(const ModelParams& params, std::span<const TokenId> source,
                              std::span<const TokenId> prefix);

/// One output per target position, each conditioned on the gold prefix.
std::vector<DecoderStepOutput> teacher_force_pass(const ModelParams& params, const ParallelPair& pair);

/// Sum of token cross-entropies divided by the number of pairs, with its gradient.
struct LossGradient {
  double loss = 0.0;
  ModelParams grad;
};
LossGradient batch_loss_gradient(const ModelParams& params, std::span<const ParallelPair> pairs);

/// Same loss as batch_loss_gradient, evaluated step by step through decode_step.
double batch_loss(const ModelParams& params, std::span<const ParallelPair> pairs);

struct EpochLog {
  std::size_t epoch = 0;
  double mean_token_loss = 0.0;
};

/// Plain SGD with global-norm clipping over shuffled pair batches. epochs = 0 returns the initialization.
/// Throws TrainingDiverged on a non-finite batch loss.
ModelParams train_base(std::span<const ParallelPair> corpus, std::size_t vocab_size, const ModelConfig& config,
                       const std::function<void(const EpochLog&)>& on_epoch = {});

/// Fraction of teacher-forced steps whose argmax equals the gold token.
double teacher_forced_accuracy(const ModelParams& params, std::span<const ParallelPair> pairs);

/// Lowest index among the maximal entries.
std::size_t argmax(const Vector& v);

/// Binary model file, magic "RGDM".
void save_model(const ModelParams& params, const std::string& path);
ModelParams load_model(const std::string& path);

}  // namespace knndr
