#include "gramlm/lexicon.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <queue>

#include "gramlm/error.hpp"

namespace gramlm {

double t_statistic(const CountTables& counts, std::span<const std::string> words) {
  const int order = static_cast<int>(words.size());
  if (order < 1 || order > counts.n_max()) {
    throw DomainError("n-gram order " + std::to_string(order) + " outside counted range");
  }
  const std::uint64_t c = counts.count(words);
  if (c == 0) throw DomainError("n-gram not in corpus: " + join_words(words));
  const double n_l = static_cast<double>(counts.total(order));
  const double n_1 = static_cast<double>(counts.total(1));

  double independent = 1.0;
  for (const auto& w : words) {
    const std::uint64_t cw = counts.count(std::span(&w, 1));
    if (cw == 0) throw DomainError("word not in corpus: " + w);
    independent *= static_cast<double>(cw) / n_1;
  }
  const double p = static_cast<double>(c) / n_l;
  const double variance = p * (1.0 - p);
  if (!(variance > 0.0)) {
    throw DegenerateStatisticError("n-gram covers the whole corpus: " + join_words(words));
  }
  return (p - independent) / std::sqrt(variance / n_l);
}

bool ranks_before(const ScoredNGram& a, const ScoredNGram& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.count != b.count) return a.count > b.count;
  return a.words < b.words;
}

NGramLexicon::NGramLexicon(std::map<int, std::vector<ScoredNGram>> by_order)
    : by_order_(std::move(by_order)) {
  for (const auto& [order, list] : by_order_) {
    for (std::size_t rank = 0; rank < list.size(); ++rank) {
      const ScoredNGram& g = list[rank];
      if (g.order() != order) {
        throw ArgumentError("n-gram '" + g.surface() + "' filed under order " +
                            std::to_string(order));
      }
      const auto id = static_cast<std::uint32_t>(merged_.size());
      if (!index_.emplace(g.surface(), id).second) {
        throw ArgumentError("duplicate n-gram in lexicon: " + g.surface());
      }
      merged_.emplace_back(order, rank);
      max_order_ = std::max(max_order_, order);
    }
  }
}

std::optional<std::uint32_t> NGramLexicon::find(std::string_view surface) const {
  const auto it = index_.find(std::string(surface));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::uint32_t> NGramLexicon::find(std::span<const std::string> words) const {
  if (words.size() < 2 || static_cast<int>(words.size()) > max_order_) return std::nullopt;
  return find(join_words(words));
}

NGramLexicon extract_lexicon(const CountTables& counts, const LexiconConfig& config) {
  std::map<int, std::vector<ScoredNGram>> by_order;
  // Heap top is the worst kept candidate.
  const auto worse_first = [](const ScoredNGram& a, const ScoredNGram& b) {
    return ranks_before(a, b);
  };
  for (const auto& [order, k] : config.k) {
    if (order < 2 || order > counts.n_max()) {
      throw ArgumentError("lexicon order " + std::to_string(order) + " not counted");
    }
    if (k < 1) throw ArgumentError("k for order " + std::to_string(order) + " must be >= 1");
    std::priority_queue<ScoredNGram, std::vector<ScoredNGram>, decltype(worse_first)> heap(
        worse_first);
    for (const auto& [surface, c] : counts.table(order)) {
      if (c < config.min_count) continue;
      ScoredNGram g{split_surface(surface), 0.0, c};
      try {
        g.score = t_statistic(counts, g.words);
      } catch (const DegenerateStatisticError&) {
        continue;
      }
      if (heap.size() < k) {
        heap.push(std::move(g));
      } else if (ranks_before(g, heap.top())) {
        heap.pop();
        heap.push(std::move(g));
      }
    }
    auto& list = by_order[order];
    list.reserve(heap.size());
    while (!heap.empty()) {
      list.push_back(heap.top());
      heap.pop();
    }
    std::reverse(list.begin(), list.end());
  }
  return NGramLexicon(std::move(by_order));
}

void write_lexicon_tsv(std::ostream& out, const NGramLexicon& lexicon,
                       std::string_view header) {
  out << "# " << header << '\n';
  char buf[64];
  for (const auto& [order, list] : lexicon.by_order()) {
    for (const auto& g : list) {
      const auto r = std::to_chars(buf, buf + sizeof buf, g.score,
                                   std::chars_format::general, 17);
      out << g.surface() << '\t' << order << '\t' << std::string_view(buf, r.ptr - buf)
          << '\t' << g.count << '\n';
    }
  }
}

NGramLexicon read_lexicon_tsv(std::istream& in) {
  std::map<int, std::vector<ScoredNGram>> by_order;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_offset = offset;
    offset += line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto tab = rest.find('\t');
      fields.push_back(rest.substr(0, tab));
      if (tab == std::string_view::npos) break;
      rest.remove_prefix(tab + 1);
    }
    if (fields.size() != 4) throw ParseError("lexicon row needs 4 tab-separated fields", line_offset);
    ScoredNGram g;
    g.words = split_surface(fields[0]);
    int order = 0;
    const auto parse_failed = [&](std::string_view f, auto& value) {
      const auto r = std::from_chars(f.data(), f.data() + f.size(), value);
      return r.ec != std::errc{} || r.ptr != f.data() + f.size();
    };
    if (parse_failed(fields[1], order) || parse_failed(fields[2], g.score) ||
        parse_failed(fields[3], g.count)) {
      throw ParseError("malformed numeric field in lexicon row", line_offset);
    }
    if (order != g.order() || order < 2) {
      throw ParseError("order column disagrees with surface '" + std::string(fields[0]) + "'",
                       line_offset);
    }
    auto& list = by_order[order];
    if (!list.empty() && ranks_before(g, list.back())) {
      throw ParseError("lexicon rows are not in rank order", line_offset);
    }
    list.push_back(std::move(g));
  }
  try {
    return NGramLexicon(std::move(by_order));
  } catch (const ArgumentError& e) {
    throw ParseError(e.what(), offset);
  }
}

NGramLexicon load_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read lexicon file: " + path.string());
  try {
    return read_lexicon_tsv(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

JointVocab::JointVocab(FineVocab fine, NGramLexicon ngrams)
    : fine_(std::move(fine)), ngrams_(std::move(ngrams)) {}

JointVocab::Entry JointVocab::entry(std::uint32_t id) const {
  if (id < fine_.size()) return {Kind::kFine, fine_.piece(id)};
  if (id < size()) return {Kind::kNGram, ngrams_.at(id - fine_.size()).surface()};
  throw ArgumentError("joint id out of range: " + std::to_string(id));
}

std::optional<std::uint32_t> JointVocab::lookup(Kind kind, std::string_view surface) const {
  if (kind == Kind::kFine) return fine_.find(surface);
  const auto id = ngrams_.find(surface);
  if (!id) return std::nullopt;
  return static_cast<std::uint32_t>(fine_.size()) + *id;
}

std::optional<std::uint32_t> JointVocab::ngram_id(std::span<const std::string> words) const {
  const auto id = ngrams_.find(words);
  if (!id) return std::nullopt;
  return static_cast<std::uint32_t>(fine_.size()) + *id;
}

}  // namespace gramlm
