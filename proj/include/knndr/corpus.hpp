#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace knndr {

using TokenId = std::uint32_t;
using Sequence = std::vector<TokenId>;

/// Dense token vocabulary. Ids 0..3 are PAD, BOS, EOS, UNK.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kNumSpecials = 4;

  /// Throws ValidationError on duplicates or if the first four entries are not the specials.
  explicit Vocab(std::vector<std::string> tokens);

  /// Specials followed by `content_size` placeholder tokens "w0", "w1", ...
  static Vocab synthetic(std::size_t content_size);

  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t content_size() const { return tokens_.size() - kNumSpecials; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::optional<TokenId> find(const std::string& token) const;
  static bool is_special(TokenId id) { return id < kNumSpecials; }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Generative description of one domain's cipher translation.
///
/// A source token x translates to substitution_table[x]. When alternate_table is
/// non-empty and alternate_rate[x] > 0, the token instead takes its secondary sense
/// alternate_table[x] with that probability. Independently of senses, each content
/// target token is replaced by a uniform random content token with noise_rate.
/// Source tokens are drawn proportionally to source_weights (uniform when empty).
struct DomainSpec {
  std::string name;
  std::vector<TokenId> substitution_table;
  double shift_fraction = 0.0;
  double noise_rate = 0.0;
  std::uint64_t seed = 0;
  std::vector<TokenId> alternate_table;
  std::vector<double> alternate_rate;
  std::vector<std::uint32_t> source_weights;
};

/// How the general domain blends in the secondary senses that a specialised
/// domain makes primary.
struct SenseMixing {
  double shifted_sense_rate = 0.3;  ///< general-domain rate of the domain sense for shifted tokens
  double polysemy_fraction = 0.15;  ///< fraction of unshifted content tokens given a minor second sense
  double polysemy_rate = 0.15;      ///< general-domain rate of that minor sense
  std::uint32_t common_weight = 5;  ///< sampling weight of ordinary tokens in the general domain
  std::uint32_t rare_weight = 1;    ///< sampling weight of the domain's shifted tokens in the general domain
};

struct ParallelPair {
  Sequence source;  ///< content tokens followed by EOS
  Sequence target;  ///< content tokens followed by EOS

  bool operator==(const ParallelPair&) const = default;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
};

struct LengthRange {
  std::size_t min = 5;
  std::size_t max = 30;
};

struct CorpusSplit {
  std::vector<ParallelPair> train;
  std::vector<ParallelPair> valid;
  std::vector<ParallelPair> test;
  std::string domain;
  std::uint64_t seed = 0;
  std::size_t vocab_size = 0;

  bool operator==(const CorpusSplit&) const = default;
};

struct CorpusStats {
  std::size_t pair_count = 0;
  std::size_t token_count = 0;  ///< target tokens including the EOS step
  double mean_target_length = 0.0;  ///< excludes EOS
};

/// General domain: a seeded permutation cipher over content tokens, no shift.
DomainSpec make_general_domain(const Vocab& vocab, std::uint64_t seed, double noise_rate);

/// Copies `general`'s table and remaps exactly round(shift_fraction * content_size)
/// source tokens to a different content target.
DomainSpec derive_domain(const DomainSpec& general, const std::string& name, double shift_fraction,
                         double noise_rate, std::uint64_t seed);

/// Gives the general domain the domain's shifted senses as rare secondary senses,
/// adds minor polysemy on a subset of unshifted tokens, and down-weights shifted
/// source tokens. `general` must be the domain's parent.
void mix_domain_senses(DomainSpec& general, const DomainSpec& domain, const SenseMixing& mixing,
                       std::uint64_t seed);

/// Number of substitution-table entries where the two specs disagree.
std::size_t count_differing_entries(const DomainSpec& a, const DomainSpec& b);

/// Throws ValidationError if the spec is inconsistent with the vocabulary.
void validate(const DomainSpec& spec, const Vocab& vocab);

/// Deterministic corpus for one domain; each split uses its own derived seed.
CorpusSplit generate_domain(const DomainSpec& spec, const Vocab& vocab, const SplitSizes& sizes,
                            const LengthRange& length_range);

/// Throws ValidationError on an empty list.
CorpusStats corpus_stats(std::span<const ParallelPair> pairs);

/// Leading round(fraction * n) pairs and the remainder.
std::pair<std::vector<ParallelPair>, std::vector<ParallelPair>> split_head(std::span<const ParallelPair> pairs,
                                                                          double fraction);

/// Text format: header line, then per split a "#split=<name> count=<n>" line followed
/// by n lines of "source-ids TAB target-ids".
void save_corpus(const CorpusSplit& split, const std::string& path);
CorpusSplit load_corpus(const std::string& path);

}  // namespace knndr
