#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gramlm {

struct TokenizeConfig {
  bool lowercase = true;
  // One document per line; otherwise documents are separated by blank lines.
  bool doc_per_line = true;
};

using Words = std::vector<std::string>;

// Word-level documents. No document is empty and no word is empty;
// n-grams never span two documents.
struct WordStream {
  std::vector<Words> documents;

  std::size_t word_count() const;
  bool operator==(const WordStream&) const = default;
};

// Throws DecodeError carrying the offset of the first invalid byte.
void validate_utf8(std::string_view bytes);

// Whitespace split with every ASCII punctuation character detached into its
// own word. Lowercasing touches ASCII letters only.
Words split_words(std::string_view line, bool lowercase);

WordStream ingest_text(std::string_view text, const TokenizeConfig& config);
WordStream ingest(std::span<const std::filesystem::path> paths,
                  const TokenizeConfig& config);

// Space-joined surface; words never contain whitespace, so this is a
// faithful key for a word tuple.
std::string join_words(std::span<const std::string> words);
Words split_surface(std::string_view surface);

// Exact l-gram counts for 1 <= l <= n_max, within documents.
class CountTables {
 public:
  explicit CountTables(int n_max);

  int n_max() const { return n_max_; }
  // l-gram occurrences N_l.
  std::uint64_t total(int order) const;
  std::uint64_t count(std::span<const std::string> words) const;
  std::uint64_t count(int order, const std::string& surface) const;
  const std::unordered_map<std::string, std::uint64_t>& table(int order) const;

  void add_document(std::span<const std::string> words);
  void merge(const CountTables& other);

  bool operator==(const CountTables&) const = default;

 private:
  int n_max_;
  // Indexed by order; slot 0 unused.
  std::vector<std::unordered_map<std::string, std::uint64_t>> tables_;
  std::vector<std::uint64_t> totals_;
};

CountTables count_ngrams(const WordStream& stream, int n_max);
// Counts contiguous document shards on separate threads and merges them.
CountTables count_ngrams_sharded(const WordStream& stream, int n_max,
                                 unsigned shards);

}  // namespace gramlm
