#include "gramlm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <sstream>
#include <thread>

#include "gramlm/error.hpp"

namespace gramlm {

std::size_t WordStream::word_count() const {
  std::size_t n = 0;
  for (const auto& doc : documents) n += doc.size();
  return n;
}

void validate_utf8(std::string_view bytes) {
  const auto* s = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char c = s[i];
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      throw DecodeError("invalid UTF-8 lead byte at offset " + std::to_string(i), i);
    }
    if (i + len > n) {
      throw DecodeError("truncated UTF-8 sequence at offset " + std::to_string(i), i);
    }
    for (std::size_t k = 1; k < len; ++k) {
      if ((s[i + k] & 0xC0) != 0x80) {
        throw DecodeError(
            "invalid UTF-8 continuation byte at offset " + std::to_string(i + k),
            i + k);
      }
      cp = (cp << 6) | (s[i + k] & 0x3F);
    }
    static constexpr std::uint32_t kMin[] = {0, 0, 0x80, 0x800, 0x10000};
    if (cp < kMin[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      throw DecodeError("invalid UTF-8 code point at offset " + std::to_string(i), i);
    }
    i += len;
  }
}

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_ascii_punct(unsigned char c) {
  return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) ||
         (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw IoError("error while reading file: " + path.string());
  return std::move(buf).str();
}

}  // namespace

Words split_words(std::string_view line, bool lowercase) {
  Words words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (unsigned char c : line) {
    if (is_space(c)) {
      flush();
    } else if (is_ascii_punct(c)) {
      flush();
      words.emplace_back(1, static_cast<char>(c));
    } else {
      if (lowercase && c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
      current.push_back(static_cast<char>(c));
    }
  }
  flush();
  return words;
}

WordStream ingest_text(std::string_view text, const TokenizeConfig& config) {
  validate_utf8(text);
  WordStream stream;
  Words pending;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    Words words = split_words(line, config.lowercase);
    if (config.doc_per_line) {
      if (!words.empty()) stream.documents.push_back(std::move(words));
    } else if (words.empty()) {
      if (!pending.empty()) stream.documents.push_back(std::move(pending));
      pending.clear();
    } else {
      std::move(words.begin(), words.end(), std::back_inserter(pending));
    }
    pos = end + 1;
  }
  if (!pending.empty()) stream.documents.push_back(std::move(pending));
  return stream;
}

WordStream ingest(std::span<const std::filesystem::path> paths,
                  const TokenizeConfig& config) {
  WordStream stream;
  for (const auto& path : paths) {
    const std::string text = read_file(path);
    WordStream part;
    try {
      part = ingest_text(text, config);
    } catch (const DecodeError& e) {
      throw DecodeError(path.string() + ": " + e.what(), e.offset());
    }
    std::move(part.documents.begin(), part.documents.end(),
              std::back_inserter(stream.documents));
  }
  return stream;
}

std::string join_words(std::span<const std::string> words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

Words split_surface(std::string_view surface) {
  Words words;
  std::size_t pos = 0;
  while (pos < surface.size()) {
    std::size_t end = surface.find(' ', pos);
    if (end == std::string_view::npos) end = surface.size();
    if (end > pos) words.emplace_back(surface.substr(pos, end - pos));
    pos = end + 1;
  }
  return words;
}

CountTables::CountTables(int n_max) : n_max_(n_max) {
  if (n_max < 2) throw ArgumentError("n_max must be >= 2, got " + std::to_string(n_max));
  tables_.resize(n_max + 1);
  totals_.assign(n_max + 1, 0);
}

std::uint64_t CountTables::total(int order) const {
  if (order < 1 || order > n_max_) return 0;
  return totals_[order];
}

std::uint64_t CountTables::count(int order, const std::string& surface) const {
  if (order < 1 || order > n_max_) return 0;
  const auto it = tables_[order].find(surface);
  return it == tables_[order].end() ? 0 : it->second;
}

std::uint64_t CountTables::count(std::span<const std::string> words) const {
  return count(static_cast<int>(words.size()), join_words(words));
}

const std::unordered_map<std::string, std::uint64_t>& CountTables::table(int order) const {
  if (order < 1 || order > n_max_) {
    throw ArgumentError("order out of range: " + std::to_string(order));
  }
  return tables_[order];
}

void CountTables::add_document(std::span<const std::string> words) {
  const std::size_t n = words.size();
  for (int order = 1; order <= n_max_; ++order) {
    if (n < static_cast<std::size_t>(order)) break;
    auto& table = tables_[order];
    for (std::size_t i = 0; i + order <= n; ++i) {
      ++table[join_words(words.subspan(i, order))];
    }
    totals_[order] += n - order + 1;
  }
}

void CountTables::merge(const CountTables& other) {
  if (other.n_max_ != n_max_) throw ArgumentError("cannot merge count tables of different n_max");
  for (int order = 1; order <= n_max_; ++order) {
    for (const auto& [key, c] : other.tables_[order]) tables_[order][key] += c;
    totals_[order] += other.totals_[order];
  }
}

CountTables count_ngrams(const WordStream& stream, int n_max) {
  CountTables tables(n_max);
  for (const auto& doc : stream.documents) tables.add_document(doc);
  return tables;
}

CountTables count_ngrams_sharded(const WordStream& stream, int n_max,
                                 unsigned shards) {
  shards = std::max(1u, shards);
  const std::size_t n = stream.documents.size();
  std::vector<CountTables> parts(shards, CountTables(n_max));
  {
    std::vector<std::jthread> workers;
    for (unsigned s = 0; s < shards; ++s) {
      workers.emplace_back([&, s] {
        const std::size_t begin = n * s / shards;
        const std::size_t end = n * (s + 1) / shards;
        for (std::size_t d = begin; d < end; ++d) parts[s].add_document(stream.documents[d]);
      });
    }
  }
  CountTables merged(n_max);
  for (const auto& part : parts) merged.merge(part);
  return merged;
}

}  // namespace gramlm
