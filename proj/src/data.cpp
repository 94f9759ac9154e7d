#include "dal/data.hpp"

#include "dal/errors.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <unordered_map>

namespace dal {

namespace {

const char* const kReservedTokens[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

bool maskable(Index id) { return id != kPadId && id != kClsId && id != kSepId; }

class Fnv1a {
 public:
  void add(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h_ ^= (v >> (8 * i)) & 0xffu;
      h_ *= 1099511628211ull;
    }
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 14695981039346656037ull;
};

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      word.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> corpus_tokens) {
  for (const char* t : kReservedTokens) tokens_.emplace_back(t);
  for (auto& t : corpus_tokens) tokens_.push_back(std::move(t));
  for (Index i = 0; i < size(); ++i) {
    if (!ids_.emplace(tokens_[static_cast<std::size_t>(i)], i).second) {
      throw IngestionError("vocabulary token \"" + tokens_[static_cast<std::size_t>(i)] + "\" appears twice");
    }
  }
}

Index Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(Index id) const {
  if (id < 0 || id >= size()) throw BoundsError("vocab id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<Index> Vocab::encode(std::string_view text) const {
  std::vector<Index> ids;
  for (const auto& t : tokenize(text)) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::corpus_tokens() const {
  return {tokens_.begin() + kReservedIds, tokens_.end()};
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write vocabulary " + path.string());
  for (std::size_t i = kReservedIds; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) tokens.push_back(line);
  return Vocab(std::move(tokens));
}

Vocab build_vocab(std::span<const std::string> documents, Index size_cap) {
  if (size_cap < kReservedIds) throw ConfigError("vocabulary cap must be at least the 5 reserved ids");
  std::unordered_map<std::string, std::int64_t> counts;
  std::size_t total = 0;
  for (const auto& doc : documents) {
    for (auto& t : tokenize(doc)) {
      ++counts[std::move(t)];
      ++total;
    }
  }
  if (total == 0) throw IngestionError("corpus contains no tokens");
  std::vector<std::pair<std::string, std::int64_t>> ranked;
  for (auto& [token, count] : counts) {
    // Never let corpus text collide with a reserved spelling.
    if (std::find(std::begin(kReservedTokens), std::end(kReservedTokens), token) != std::end(kReservedTokens)) {
      continue;
    }
    ranked.emplace_back(token, count);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const auto keep = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(size_cap - kReservedIds));
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(std::move(ranked[i].first));
  return Vocab(std::move(tokens));
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError("cannot read corpus " + path.string());
  std::vector<std::string> docs;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) docs.push_back(line);
  }
  if (docs.empty()) throw IngestionError("corpus " + path.string() + " is empty");
  return docs;
}

CorruptedSequence corrupt(std::span<const Index> ids, std::mt19937_64& rng, const CorruptionOptions& options) {
  if (options.span_max < 1) throw ConfigError("span_max must be >= 1");
  if (options.mask_rate <= 0.0 || options.mask_rate > 1.0) throw ConfigError("mask_rate must be in (0, 1]");
  if (options.replace_with_random > 0.0 && options.vocab_size <= kReservedIds) {
    throw ConfigError("random replacement needs vocab_size > 5");
  }
  const auto n = static_cast<Index>(ids.size());
  std::vector<Index> candidates;
  for (Index i = 0; i < n; ++i) {
    if (maskable(ids[static_cast<std::size_t>(i)])) candidates.push_back(i);
  }
  if (candidates.empty()) throw ContractError("sequence has no maskable tokens");

  // Expected coverage is exactly mask_rate * m: the fractional part of the
  // target is resolved by a Bernoulli draw.
  const double exact = options.mask_rate * static_cast<double>(candidates.size());
  Index target = static_cast<Index>(std::floor(exact));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < exact - static_cast<double>(target)) ++target;
  target = std::min<Index>(target, static_cast<Index>(candidates.size()));

  std::vector<char> selected(static_cast<std::size_t>(n), 0);
  auto free_at = [&](Index p) {
    return p >= 0 && p < n && maskable(ids[static_cast<std::size_t>(p)]) && !selected[static_cast<std::size_t>(p)];
  };
  auto clear_at = [&](Index p) { return p < 0 || p >= n || !selected[static_cast<std::size_t>(p)]; };

  std::uniform_int_distribution<Index> span_length(1, options.span_max);
  std::uniform_int_distribution<std::size_t> pick_start(0, candidates.size() - 1);
  Index covered = 0;
  const std::size_t max_attempts = 50 * candidates.size() + 100;
  for (std::size_t attempt = 0; covered < target && attempt < max_attempts; ++attempt) {
    const Index len = std::min(span_length(rng), target - covered);
    const Index start = candidates[pick_start(rng)];
    bool ok = clear_at(start - 1) && clear_at(start + len);
    for (Index p = start; ok && p < start + len; ++p) ok = free_at(p);
    if (!ok) continue;
    for (Index p = start; p < start + len; ++p) selected[static_cast<std::size_t>(p)] = 1;
    covered += len;
  }
  if (covered < target) {
    // Only reachable at very high mask rates; spans may then abut.
    std::vector<Index> rest;
    for (Index p : candidates) {
      if (!selected[static_cast<std::size_t>(p)]) rest.push_back(p);
    }
    std::shuffle(rest.begin(), rest.end(), rng);
    for (std::size_t i = 0; covered < target; ++i, ++covered) selected[static_cast<std::size_t>(rest[i])] = 1;
  }

  CorruptedSequence out;
  out.corrupted.assign(ids.begin(), ids.end());
  std::uniform_int_distribution<Index> random_id(kReservedIds, std::max(kReservedIds, options.vocab_size - 1));
  for (Index p = 0; p < n; ++p) {
    if (!selected[static_cast<std::size_t>(p)]) continue;
    const double u = unit(rng);
    Corruption kind = Corruption::unchanged;
    if (u < options.replace_with_mask) {
      kind = Corruption::mask;
      out.corrupted[static_cast<std::size_t>(p)] = kMaskId;
    } else if (u < options.replace_with_mask + options.replace_with_random) {
      kind = Corruption::random;
      out.corrupted[static_cast<std::size_t>(p)] = random_id(rng);
    }
    out.masked.push_back(p);
    out.kinds.push_back(kind);
  }
  return out;
}

std::span<const Index> MaskedBatch::original_row(Index b) const {
  return {original.data() + b * original.cols(), static_cast<std::size_t>(original.cols())};
}

std::span<const Index> MaskedBatch::corrupted_row(Index b) const {
  return {corrupted.data() + b * corrupted.cols(), static_cast<std::size_t>(corrupted.cols())};
}

std::uint64_t MaskedBatch::hash() const {
  Fnv1a h;
  h.add(static_cast<std::uint64_t>(original.rows()));
  h.add(static_cast<std::uint64_t>(original.cols()));
  for (Index i = 0; i < original.size(); ++i) h.add(static_cast<std::uint64_t>(original.data()[i]));
  for (Index i = 0; i < corrupted.size(); ++i) h.add(static_cast<std::uint64_t>(corrupted.data()[i]));
  for (const auto& row : masked) {
    h.add(row.size());
    for (Index p : row) h.add(static_cast<std::uint64_t>(p));
  }
  return h.value();
}

MaskedBatch make_batch(std::span<const std::vector<Index>> sequences, Index n) {
  if (n < 3) throw ConfigError("sequence length must be >= 3 to hold [CLS] x [SEP], got " + std::to_string(n));
  if (sequences.empty()) throw ContractError("make_batch needs at least one sequence");
  const auto b = static_cast<Index>(sequences.size());
  MaskedBatch batch;
  batch.original = IndexMatrix::Constant(b, n, kPadId);
  batch.masked.resize(static_cast<std::size_t>(b));
  batch.padding.assign(static_cast<std::size_t>(b), std::vector<bool>(static_cast<std::size_t>(n), true));
  for (Index r = 0; r < b; ++r) {
    const auto& seq = sequences[static_cast<std::size_t>(r)];
    const Index interior = std::min<Index>(static_cast<Index>(seq.size()), n - 2);
    batch.original(r, 0) = kClsId;
    for (Index i = 0; i < interior; ++i) batch.original(r, i + 1) = seq[static_cast<std::size_t>(i)];
    batch.original(r, interior + 1) = kSepId;
    for (Index i = 0; i < interior + 2; ++i) batch.padding[static_cast<std::size_t>(r)][static_cast<std::size_t>(i)] = false;
  }
  batch.corrupted = batch.original;
  return batch;
}

void corrupt_batch(MaskedBatch& batch, std::mt19937_64& rng, const CorruptionOptions& options) {
  for (Index r = 0; r < batch.size(); ++r) {
    CorruptedSequence c = corrupt(batch.original_row(r), rng, options);
    for (Index i = 0; i < batch.length(); ++i) batch.corrupted(r, i) = c.corrupted[static_cast<std::size_t>(i)];
    batch.masked[static_cast<std::size_t>(r)] = std::move(c.masked);
  }
}

std::vector<std::vector<Index>> chunk_documents(std::span<const std::vector<Index>> documents, Index n) {
  if (n < 3) throw ConfigError("sequence length must be >= 3, got " + std::to_string(n));
  const auto width = static_cast<std::size_t>(n - 2);
  std::vector<std::vector<Index>> out;
  for (const auto& doc : documents) {
    for (std::size_t at = 0; at < doc.size(); at += width) {
      const auto end = std::min(doc.size(), at + width);
      out.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(at), doc.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return out;
}

std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

BatchStream::BatchStream(std::vector<std::vector<Index>> sequences, Index length, Index batch_size,
                         std::uint64_t seed, CorruptionOptions corruption)
    : sequences_(std::move(sequences)),
      length_(length),
      batch_size_(batch_size),
      seed_(seed),
      corruption_(corruption) {
  if (sequences_.empty()) throw IngestionError("no training sequences");
  if (batch_size_ < 1) throw ConfigError("trainer.batch_size: must be >= 1");
}

std::vector<Index> BatchStream::epoch_order(std::int64_t epoch) const {
  std::vector<Index> order(sequences_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);
  auto rng = derived_rng(seed_, 1, static_cast<std::uint64_t>(epoch));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

MaskedBatch BatchStream::batch(std::int64_t step) const {
  const auto count = static_cast<std::int64_t>(sequences_.size());
  std::vector<std::vector<Index>> picked;
  std::int64_t cached_epoch = -1;
  std::vector<Index> order;
  for (Index i = 0; i < batch_size_; ++i) {
    const std::int64_t sample = step * batch_size_ + i;
    const std::int64_t epoch = sample / count;
    if (epoch != cached_epoch) {
      order = epoch_order(epoch);
      cached_epoch = epoch;
    }
    picked.push_back(sequences_[static_cast<std::size_t>(order[static_cast<std::size_t>(sample % count)])]);
  }
  MaskedBatch b = make_batch(picked, length_);
  auto rng = derived_rng(seed_, 2, static_cast<std::uint64_t>(step));
  corrupt_batch(b, rng, corruption_);
  return b;
}

}  // namespace dal
