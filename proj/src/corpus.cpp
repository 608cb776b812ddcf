#include "knndr/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "knndr/error.hpp"
#include "knndr/rng.hpp"

namespace knndr {

namespace {

constexpr std::uint64_t kPpm = 1'000'000;

std::uint64_t to_ppm(double rate) { return static_cast<std::uint64_t>(std::llround(rate * static_cast<double>(kPpm))); }

void check_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw ValidationError(std::string(what) + " must be in [0,1], got " + std::to_string(rate));
  }
}

std::vector<TokenId> content_ids(std::size_t vocab_size) {
  std::vector<TokenId> ids;
  ids.reserve(vocab_size - Vocab::kNumSpecials);
  for (auto id = Vocab::kNumSpecials; id < vocab_size; ++id) ids.push_back(id);
  return ids;
}

/// Uniform content token different from `avoid`.
TokenId other_content_token(Rng& rng, std::size_t vocab_size, TokenId avoid) {
  const std::size_t n = vocab_size - Vocab::kNumSpecials;
  auto pick = static_cast<TokenId>(Vocab::kNumSpecials + rng.below(n - 1));
  if (pick >= avoid) ++pick;
  return pick;
}

/// Partial Fisher-Yates: the first `count` entries of a seeded shuffle of `pool`.
std::vector<TokenId> sample_without_replacement(std::vector<TokenId> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  }
  pool.resize(count);
  return pool;
}

class PairGenerator {
 public:
  PairGenerator(const DomainSpec& spec, std::size_t vocab_size) : spec_(spec), vocab_size_(vocab_size) {
    const bool uniform = spec.source_weights.empty();
    std::uint64_t total = 0;
    for (auto id = Vocab::kNumSpecials; id < vocab_size; ++id) {
      const std::uint64_t w = uniform ? 1 : spec.source_weights[id];
      if (w == 0) continue;
      total += w;
      ids_.push_back(id);
      cumulative_.push_back(total);
    }
    if (total == 0) throw ValidationError("domain '" + spec.name + "' has no sampleable source tokens");
    noise_ppm_ = to_ppm(spec.noise_rate);
    if (!spec.alternate_table.empty()) {
      alt_ppm_.resize(vocab_size);
      for (std::size_t i = 0; i < vocab_size; ++i) alt_ppm_[i] = to_ppm(spec.alternate_rate[i]);
    }
  }

  ParallelPair next(Rng& rng, const LengthRange& range) {
    ParallelPair pair;
    const std::size_t len = range.min + rng.below(range.max - range.min + 1);
    pair.source.reserve(len + 1);
    pair.target.reserve(len + 1);
    for (std::size_t i = 0; i < len; ++i) {
      const TokenId src = draw_source(rng);
      pair.source.push_back(src);
      pair.target.push_back(translate(src, rng));
    }
    pair.source.push_back(Vocab::kEos);
    pair.target.push_back(Vocab::kEos);
    return pair;
  }

 private:
  TokenId draw_source(Rng& rng) const {
    const std::uint64_t r = rng.below(cumulative_.back());
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), r);
    return ids_[static_cast<std::size_t>(it - cumulative_.begin())];
  }

  TokenId translate(TokenId src, Rng& rng) const {
    if (rng.below(kPpm) < noise_ppm_) {
      return static_cast<TokenId>(Vocab::kNumSpecials + rng.below(vocab_size_ - Vocab::kNumSpecials));
    }
    if (!alt_ppm_.empty() && alt_ppm_[src] > 0 && rng.below(kPpm) < alt_ppm_[src]) {
      return spec_.alternate_table[src];
    }
    return spec_.substitution_table[src];
  }

  const DomainSpec& spec_;
  std::size_t vocab_size_;
  std::vector<TokenId> ids_;
  std::vector<std::uint64_t> cumulative_;
  std::uint64_t noise_ppm_ = 0;
  std::vector<std::uint64_t> alt_ppm_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  static const char* const kSpecials[] = {"<pad>", "<s>", "</s>", "<unk>"};
  if (tokens_.size() < kNumSpecials) throw ValidationError("vocabulary needs at least the four special tokens");
  for (TokenId i = 0; i < kNumSpecials; ++i) {
    if (tokens_[i] != kSpecials[i]) {
      throw ValidationError("vocabulary id " + std::to_string(i) + " must be " + kSpecials[i]);
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocab Vocab::synthetic(std::size_t content_size) {
  std::vector<std::string> tokens = {"<pad>", "<s>", "</s>", "<unk>"};
  for (std::size_t i = 0; i < content_size; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocab(std::move(tokens));
}

std::optional<TokenId> Vocab::find(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("write failed: " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return Vocab(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Domains

DomainSpec make_general_domain(const Vocab& vocab, std::uint64_t seed, double noise_rate) {
  check_rate(noise_rate, "noise_rate");
  if (vocab.content_size() < 2) throw ValidationError("vocabulary needs at least two content tokens");
  DomainSpec spec;
  spec.name = "general";
  spec.noise_rate = noise_rate;
  spec.seed = seed;
  spec.substitution_table.resize(vocab.size());
  for (TokenId i = 0; i < Vocab::kNumSpecials; ++i) spec.substitution_table[i] = i;

  Rng rng(derive_seed(seed, fnv1a("general-table")));
  auto perm = content_ids(vocab.size());
  rng.shuffle(perm);
  for (std::size_t i = 0; i < perm.size(); ++i) spec.substitution_table[Vocab::kNumSpecials + i] = perm[i];
  return spec;
}

DomainSpec derive_domain(const DomainSpec& general, const std::string& name, double shift_fraction,
                         double noise_rate, std::uint64_t seed) {
  check_rate(shift_fraction, "shift_fraction");
  check_rate(noise_rate, "noise_rate");
  const std::size_t vocab_size = general.substitution_table.size();
  const std::size_t content = vocab_size - Vocab::kNumSpecials;
  const auto shifted = static_cast<std::size_t>(std::llround(shift_fraction * static_cast<double>(content)));

  DomainSpec spec;
  spec.name = name;
  spec.shift_fraction = shift_fraction;
  spec.noise_rate = noise_rate;
  spec.seed = seed;
  spec.substitution_table = general.substitution_table;

  Rng rng(derive_seed(seed, fnv1a("shift:" + name)));
  for (TokenId src : sample_without_replacement(content_ids(vocab_size), shifted, rng)) {
    spec.substitution_table[src] = other_content_token(rng, vocab_size, general.substitution_table[src]);
  }
  return spec;
}

void mix_domain_senses(DomainSpec& general, const DomainSpec& domain, const SenseMixing& mixing,
                       std::uint64_t seed) {
  check_rate(mixing.shifted_sense_rate, "shifted_sense_rate");
  check_rate(mixing.polysemy_fraction, "polysemy_fraction");
  check_rate(mixing.polysemy_rate, "polysemy_rate");
  const std::size_t vocab_size = general.substitution_table.size();
  if (domain.substitution_table.size() != vocab_size) {
    throw ValidationError("domain '" + domain.name + "' table size differs from the general domain");
  }
  if (general.alternate_table.empty()) {
    general.alternate_table = general.substitution_table;
    general.alternate_rate.assign(vocab_size, 0.0);
    general.source_weights.assign(vocab_size, mixing.common_weight);
    for (TokenId i = 0; i < Vocab::kNumSpecials; ++i) general.source_weights[i] = 0;
  }

  std::vector<TokenId> unshifted;
  for (auto src = Vocab::kNumSpecials; src < vocab_size; ++src) {
    if (domain.substitution_table[src] != general.substitution_table[src]) {
      general.alternate_table[src] = domain.substitution_table[src];
      general.alternate_rate[src] = mixing.shifted_sense_rate;
      general.source_weights[src] = mixing.rare_weight;
    } else if (general.alternate_rate[src] == 0.0) {
      unshifted.push_back(src);
    }
  }

  Rng rng(derive_seed(seed, fnv1a("polysemy:" + domain.name)));
  const std::size_t content = vocab_size - Vocab::kNumSpecials;
  const auto count = std::min(
      unshifted.size(),
      static_cast<std::size_t>(std::llround(mixing.polysemy_fraction * static_cast<double>(content))));
  for (TokenId src : sample_without_replacement(unshifted, count, rng)) {
    general.alternate_table[src] = other_content_token(rng, vocab_size, general.substitution_table[src]);
    general.alternate_rate[src] = mixing.polysemy_rate;
  }
}

std::size_t count_differing_entries(const DomainSpec& a, const DomainSpec& b) {
  if (a.substitution_table.size() != b.substitution_table.size()) {
    throw ValidationError("substitution tables have different sizes");
  }
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.substitution_table.size(); ++i) {
    n += a.substitution_table[i] != b.substitution_table[i];
  }
  return n;
}

void validate(const DomainSpec& spec, const Vocab& vocab) {
  if (spec.name.empty() || std::any_of(spec.name.begin(), spec.name.end(), [](unsigned char c) { return std::isspace(c); })) {
    throw ValidationError("domain name must be non-empty without whitespace, got '" + spec.name + "'");
  }
  check_rate(spec.shift_fraction, "shift_fraction");
  check_rate(spec.noise_rate, "noise_rate");
  const std::size_t v = vocab.size();
  if (spec.substitution_table.size() != v) {
    throw ValidationError("domain '" + spec.name + "': substitution table must cover all " + std::to_string(v) +
                          " vocabulary ids");
  }
  for (TokenId i = 0; i < v; ++i) {
    const TokenId t = spec.substitution_table[i];
    if (Vocab::is_special(i) ? t != i : (t >= v || Vocab::is_special(t))) {
      throw ValidationError("domain '" + spec.name + "': bad substitution entry for id " + std::to_string(i));
    }
  }
  if (!spec.alternate_table.empty()) {
    if (spec.alternate_table.size() != v || spec.alternate_rate.size() != v) {
      throw ValidationError("domain '" + spec.name + "': alternate sense tables must cover the vocabulary");
    }
    for (TokenId i = Vocab::kNumSpecials; i < v; ++i) {
      check_rate(spec.alternate_rate[i], "alternate_rate");
      if (spec.alternate_table[i] >= v || Vocab::is_special(spec.alternate_table[i])) {
        throw ValidationError("domain '" + spec.name + "': bad alternate entry for id " + std::to_string(i));
      }
    }
  }
  if (!spec.source_weights.empty() && spec.source_weights.size() != v) {
    throw ValidationError("domain '" + spec.name + "': source weights must cover the vocabulary");
  }
}

CorpusSplit generate_domain(const DomainSpec& spec, const Vocab& vocab, const SplitSizes& sizes,
                            const LengthRange& length_range) {
  validate(spec, vocab);
  if (sizes.train == 0 || sizes.valid == 0 || sizes.test == 0) {
    throw ValidationError("split sizes must all be positive");
  }
  if (length_range.min < 1 || length_range.max < length_range.min) {
    throw ValidationError("length range must satisfy 1 <= min <= max");
  }

  CorpusSplit split;
  split.domain = spec.name;
  split.seed = spec.seed;
  split.vocab_size = vocab.size();

  PairGenerator gen(spec, vocab.size());
  const std::pair<std::vector<ParallelPair>*, std::size_t> parts[] = {
      {&split.train, sizes.train}, {&split.valid, sizes.valid}, {&split.test, sizes.test}};
  std::uint64_t stream = 1;
  for (const auto& [out, count] : parts) {
    Rng rng(derive_seed(spec.seed, stream++));
    out->reserve(count);
    for (std::size_t i = 0; i < count; ++i) out->push_back(gen.next(rng, length_range));
  }
  return split;
}

CorpusStats corpus_stats(std::span<const ParallelPair> pairs) {
  if (pairs.empty()) throw ValidationError("corpus_stats: empty split");
  CorpusStats stats;
  stats.pair_count = pairs.size();
  std::size_t content = 0;
  for (const auto& p : pairs) {
    stats.token_count += p.target.size();
    content += p.target.size() - (!p.target.empty() && p.target.back() == Vocab::kEos ? 1 : 0);
  }
  stats.mean_target_length = static_cast<double>(content) / static_cast<double>(pairs.size());
  return stats;
}

std::pair<std::vector<ParallelPair>, std::vector<ParallelPair>> split_head(std::span<const ParallelPair> pairs,
                                                                          double fraction) {
  check_rate(fraction, "fraction");
  const auto head = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pairs.size())));
  return {{pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(head)},
          {pairs.begin() + static_cast<std::ptrdiff_t>(head), pairs.end()}};
}

// ---------------------------------------------------------------------------
// Corpus files

namespace {

void write_ids(std::ostream& out, const Sequence& seq) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out << ' ';
    out << seq[i];
  }
}

/// Value of `key=` inside a whitespace-separated header, or nullopt.
std::optional<std::string> header_field(const std::string& line, const std::string& key) {
  std::istringstream ss(line.substr(1));
  std::string field;
  while (ss >> field) {
    if (field.rfind(key + "=", 0) == 0) return field.substr(key.size() + 1);
  }
  return std::nullopt;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

class CorpusParser {
 public:
  explicit CorpusParser(const std::string& path) : path_(path), in_(path) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  CorpusSplit parse() {
    CorpusSplit split;
    std::string line;
    if (!next_line(line) || line.rfind("#vocab=", 0) != 0) fail("expected header '#vocab=<size> domain=<name> seed=<n>'");
    const auto vocab = header_field(line, "vocab");
    const auto domain = header_field(line, "domain");
    const auto seed = header_field(line, "seed");
    if (!vocab || !domain || !seed || !parse_number(*vocab, split.vocab_size) ||
        !parse_number(*seed, split.seed)) {
      fail("malformed header");
    }
    split.domain = *domain;

    bool seen[3] = {false, false, false};
    while (next_line(line)) {
      if (line.empty()) continue;
      if (line.rfind("#split=", 0) != 0) fail("expected '#split=<train|valid|test> count=<n>'");
      const auto name = header_field(line, "split");
      const auto count_text = header_field(line, "count");
      std::size_t count = 0;
      if (!name || !count_text || !parse_number(*count_text, count)) fail("malformed split line");
      int which = *name == "train" ? 0 : *name == "valid" ? 1 : *name == "test" ? 2 : -1;
      if (which < 0) fail("unknown split '" + *name + "'");
      if (seen[which]) fail("duplicate split '" + *name + "'");
      seen[which] = true;
      auto& dest = which == 0 ? split.train : which == 1 ? split.valid : split.test;
      dest.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        if (!next_line(line)) {
          ++line_no_;
          fail("unexpected end of file: split '" + *name + "' declares " + std::to_string(count) + " pairs, found " +
               std::to_string(i));
        }
        dest.push_back(parse_pair(line, split.vocab_size));
      }
    }
    if (!(seen[0] && seen[1] && seen[2])) {
      ++line_no_;
      fail("unexpected end of file: missing split section");
    }
    return split;
  }

 private:
  bool next_line(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    return true;
  }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(path_, line_no_, what); }

  Sequence parse_ids(std::string_view text, std::size_t vocab_size) const {
    Sequence seq;
    std::size_t pos = 0;
    while (pos < text.size()) {
      const std::size_t end = std::min(text.find(' ', pos), text.size());
      TokenId id = 0;
      if (end == pos || !parse_number(text.substr(pos, end - pos), id)) fail("malformed token id list");
      if (id >= vocab_size) {
        throw ValidationError(path_ + ":" + std::to_string(line_no_) + ": token id " + std::to_string(id) +
                              " >= vocabulary size " + std::to_string(vocab_size));
      }
      seq.push_back(id);
      pos = end + 1;
    }
    return seq;
  }

  ParallelPair parse_pair(const std::string& line, std::size_t vocab_size) const {
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      fail("expected exactly one TAB separating source and target");
    }
    ParallelPair pair{parse_ids(std::string_view(line).substr(0, tab), vocab_size),
                      parse_ids(std::string_view(line).substr(tab + 1), vocab_size)};
    if (pair.source.empty() || pair.target.empty()) fail("empty source or target");
    if (pair.target.back() != Vocab::kEos) fail("target must end with EOS");
    for (const auto* seq : {&pair.source, &pair.target}) {
      if (std::find(seq->begin(), seq->end(), Vocab::kPad) != seq->end()) fail("PAD inside a sequence");
    }
    return pair;
  }

  std::string path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

}  // namespace

void save_corpus(const CorpusSplit& split, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "#vocab=" << split.vocab_size << " domain=" << split.domain << " seed=" << split.seed << '\n';
  const std::pair<const char*, const std::vector<ParallelPair>*> parts[] = {
      {"train", &split.train}, {"valid", &split.valid}, {"test", &split.test}};
  for (const auto& [name, pairs] : parts) {
    out << "#split=" << name << " count=" << pairs->size() << '\n';
    for (const auto& p : *pairs) {
      write_ids(out, p.source);
      out << '\t';
      write_ids(out, p.target);
      out << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

CorpusSplit load_corpus(const std::string& path) { return CorpusParser(path).parse(); }

}  // namespace knndr
