#pragma once

#include "dal/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dal {

inline constexpr Index kPadId = 0;
inline constexpr Index kUnkId = 1;
inline constexpr Index kClsId = 2;
inline constexpr Index kSepId = 3;
inline constexpr Index kMaskId = 4;
inline constexpr Index kReservedIds = 5;

// Lowercased whitespace tokens with every ASCII punctuation character split
// off as its own token.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
 public:
  Vocab();
  // Reserved tokens followed by the given corpus tokens in id order.
  explicit Vocab(std::vector<std::string> corpus_tokens);

  Index size() const { return static_cast<Index>(tokens_.size()); }
  Index id(const std::string& token) const;  // kUnkId when absent
  const std::string& token(Index id) const;
  std::vector<Index> encode(std::string_view text) const;
  // Corpus tokens only, in id order.
  std::vector<std::string> corpus_tokens() const;

  // One token per line; line n holds id n + kReservedIds.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, Index, std::less<>> ids_;
};

// Frequency-ranked vocabulary capped at size_cap ids (reserved included);
// ties are broken lexicographically.
Vocab build_vocab(std::span<const std::string> documents, Index size_cap);

// One document per non-empty line.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

struct CorruptionOptions {
  double mask_rate = 0.15;
  Index span_max = 3;
  double replace_with_mask = 0.8;
  double replace_with_random = 0.1;  // the rest stay unchanged
  Index vocab_size = 0;              // random replacements drawn from [kReservedIds, vocab_size)
};

enum class Corruption : std::uint8_t { mask, random, unchanged };

struct CorruptedSequence {
  std::vector<Index> corrupted;
  std::vector<Index> masked;  // sorted positions, every one predicted
  std::vector<Corruption> kinds;  // parallel to masked
};

// Span-masks about mask_rate of the maskable (non CLS/SEP/PAD) tokens. Span
// lengths are uniform in 1..span_max and spans never touch each other, so
// every run of selected positions is one span. Then each selected token is
// replaced by MASK, a random id, or kept, per the configured split.
CorruptedSequence corrupt(std::span<const Index> ids, std::mt19937_64& rng, const CorruptionOptions& options);

struct MaskedBatch {
  IndexMatrix original;   // B x N
  IndexMatrix corrupted;  // B x N
  std::vector<std::vector<Index>> masked;
  std::vector<std::vector<bool>> padding;

  Index size() const { return original.rows(); }
  Index length() const { return original.cols(); }
  std::span<const Index> original_row(Index b) const;
  std::span<const Index> corrupted_row(Index b) const;
  std::uint64_t hash() const;
};

// [CLS] tokens [SEP] [PAD]..., truncated to n - 2 interior tokens. The
// corrupted ids equal the originals until corrupt_batch runs.
MaskedBatch make_batch(std::span<const std::vector<Index>> sequences, Index n);
void corrupt_batch(MaskedBatch& batch, std::mt19937_64& rng, const CorruptionOptions& options);

// Splits each document into chunks of at most n - 2 tokens.
std::vector<std::vector<Index>> chunk_documents(std::span<const std::vector<Index>> documents, Index n);

// Deterministic batch stream: batch s is a pure function of (seed, s).
class BatchStream {
 public:
  BatchStream(std::vector<std::vector<Index>> sequences, Index length, Index batch_size, std::uint64_t seed,
              CorruptionOptions corruption);

  MaskedBatch batch(std::int64_t step) const;
  std::size_t sequence_count() const { return sequences_.size(); }

 private:
  std::vector<Index> epoch_order(std::int64_t epoch) const;

  std::vector<std::vector<Index>> sequences_;
  Index length_;
  Index batch_size_;
  std::uint64_t seed_;
  CorruptionOptions corruption_;
};

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace dal
