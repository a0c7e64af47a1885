#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "trimkit/model.hpp"

namespace trimkit::inline TRIMKIT_NS {

inline constexpr std::uint32_t kBos = 256;
inline constexpr std::uint32_t kEos = 257;
inline constexpr std::size_t kByteVocab = 258;

enum class Split { train, val };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Document {
  std::size_t begin = 0;  // [begin, end) into ids
  std::size_t end = 0;
  Split split = Split::train;
  bool operator==(const Document&) const = default;
};

/// Flat token stream plus document boundaries and split tags.
struct TokenDataset {
  std::size_t vocab_size = kByteVocab;
  std::vector<std::uint32_t> ids;
  std::vector<Document> documents;

  void validate() const;
  std::size_t tokens(Split split) const;
  bool operator==(const TokenDataset&) const = default;
};

/// Byte-level tokens; documents are separated by blank lines. Each document is
/// assigned to val when a seeded hash of its index falls below val_fraction.
TokenDataset ingest_text(const std::string& text, std::uint64_t seed, double val_fraction = 0.1);
TokenDataset ingest_text_file(const std::filesystem::path& path, std::uint64_t seed,
                              double val_fraction = 0.1);

/// Writes `<stem>.bin` (u32 LE ids) and `<stem>.json` (manifest).
void save_dataset(const TokenDataset& ds, const std::filesystem::path& stem);
TokenDataset load_dataset(const std::filesystem::path& stem);

/// n distinct non-overlapping windows of seq_len tokens from one split, drawn
/// by a seeded shuffle (no replacement).
TokenBatch sample_calibration(const TokenDataset& ds, Split split, std::size_t n,
                              std::size_t seq_len, std::uint64_t seed);

/// Uniformly random windows (with replacement) for training batches.
class WindowSampler {
 public:
  WindowSampler(const TokenDataset& ds, Split split, std::size_t seq_len, std::uint64_t seed);
  TokenBatch next(std::size_t batch);

 private:
  const TokenDataset* ds_;
  std::size_t seq_len_;
  std::vector<std::size_t> starts_;  // every valid window start in the split
  std::mt19937_64 rng_;
};

/// `count` batches of fixed windows; deterministic in seed.
std::vector<TokenBatch> fixed_batches(const TokenDataset& ds, Split split, std::size_t count,
                                      std::size_t batch, std::size_t seq_len, std::uint64_t seed);

/// Synthetic corpus from a random sparse bigram chain: each token has
/// `branching` successors with random Dirichlet-like weights.
TokenDataset make_bigram_corpus(std::size_t vocab, std::size_t branching, std::size_t documents,
                                std::size_t doc_len, std::uint64_t seed, double val_fraction = 0.1);

/// Seeded splitmix64 hash.
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace trimkit
