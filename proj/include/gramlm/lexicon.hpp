#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gramlm/corpus.hpp"
#include "gramlm/vocab.hpp"

namespace gramlm {

struct ScoredNGram {
  Words words;
  double score = 0.0;
  std::uint64_t count = 0;

  int order() const { return static_cast<int>(words.size()); }
  std::string surface() const { return join_words(words); }
  bool operator==(const ScoredNGram&) const = default;
};

// t = (p(w) - prod_i p(x_i)) / sqrt(p(w)(1 - p(w)) / N_l), with
// p(w) = Count(w) / N_l and p(x_i) = Count(x_i) / N_1.
//
// Throws DomainError when w or one of its words is unseen, and
// DegenerateStatisticError when p(w) == 1.
double t_statistic(const CountTables& counts, std::span<const std::string> words);

// Ranking used for top-k selection: higher score, then higher count, then
// lexicographically smaller word tuple.
bool ranks_before(const ScoredNGram& a, const ScoredNGram& b);

// Per-order ranked lists merged into one id space. Merged ids follow
// (order, rank).
class NGramLexicon {
 public:
  NGramLexicon() = default;
  explicit NGramLexicon(std::map<int, std::vector<ScoredNGram>> by_order);

  std::size_t size() const { return merged_.size(); }
  bool empty() const { return merged_.empty(); }
  int max_order() const { return max_order_; }
  const std::map<int, std::vector<ScoredNGram>>& by_order() const { return by_order_; }
  const ScoredNGram& at(std::size_t id) const {
    const auto [order, rank] = merged_.at(id);
    return by_order_.at(order)[rank];
  }

  std::optional<std::uint32_t> find(std::string_view surface) const;
  std::optional<std::uint32_t> find(std::span<const std::string> words) const;
  bool contains(std::span<const std::string> words) const { return find(words).has_value(); }

  bool operator==(const NGramLexicon& other) const { return by_order_ == other.by_order_; }

 private:
  std::map<int, std::vector<ScoredNGram>> by_order_;
  // (order, rank) per merged id.
  std::vector<std::pair<int, std::size_t>> merged_;
  std::unordered_map<std::string, std::uint32_t> index_;
  int max_order_ = 0;
};

struct LexiconConfig {
  // k_l per order l >= 2.
  std::map<int, std::size_t> k{{2, 2000}, {3, 1000}};
  std::uint64_t min_count = 5;
};

// Top-k_l l-grams by t-statistic among those with count >= min_count.
// Candidates whose statistic is degenerate are skipped.
NGramLexicon extract_lexicon(const CountTables& counts, const LexiconConfig& config);

// TSV: a '#' header line, then `surface \t order \t t_score \t count` rows
// ordered by (order, rank). Scores are written with 17 significant digits.
void write_lexicon_tsv(std::ostream& out, const NGramLexicon& lexicon,
                       std::string_view header);
NGramLexicon read_lexicon_tsv(std::istream& in);
NGramLexicon load_lexicon(const std::filesystem::path& path);

// <V_F, V_N>: fine ids in [0, |V_F|), n-gram ids in [|V_F|, |V_F| + |V_N|).
class JointVocab {
 public:
  enum class Kind { kFine, kNGram };
  struct Entry {
    Kind kind;
    std::string surface;
    bool operator==(const Entry&) const = default;
  };

  JointVocab(FineVocab fine, NGramLexicon ngrams);

  std::size_t size() const { return fine_.size() + ngrams_.size(); }
  std::size_t fine_size() const { return fine_.size(); }
  std::size_t ngram_size() const { return ngrams_.size(); }
  const FineVocab& fine() const { return fine_; }
  const NGramLexicon& ngrams() const { return ngrams_; }

  Entry entry(std::uint32_t id) const;
  std::optional<std::uint32_t> lookup(Kind kind, std::string_view surface) const;
  // Joint id of a multi-word n-gram, if it is in V_N.
  std::optional<std::uint32_t> ngram_id(std::span<const std::string> words) const;
  bool is_ngram(std::uint32_t id) const { return id >= fine_.size() && id < size(); }

 private:
  FineVocab fine_;
  NGramLexicon ngrams_;
};

}  // namespace gramlm
