#include "gramlm/vocab.hpp"

#include <fstream>

#include "gramlm/error.hpp"
#include "gramlm/hash.hpp"

namespace gramlm {

namespace {

constexpr std::size_t kMaxWordBytes = 100;

std::string query_symbol(int i) { return "[M" + std::to_string(i) + "]"; }

}  // namespace

FineVocab FineVocab::with_pieces(const std::vector<std::string>& pieces,
                                 int max_query) {
  if (max_query < 1) throw ArgumentError("max_query must be >= 1");
  std::vector<std::string> lines{std::string(kPad), std::string(kUnk),
                                 std::string(kCls), std::string(kSep),
                                 std::string(kMask)};
  for (int i = 1; i <= max_query; ++i) lines.push_back(query_symbol(i));
  lines.insert(lines.end(), pieces.begin(), pieces.end());
  return from_lines(std::move(lines));
}

FineVocab FineVocab::from_lines(std::vector<std::string> lines) {
  const std::string_view fixed[] = {kPad, kUnk, kCls, kSep, kMask};
  std::size_t offset = 0;
  for (std::size_t i = 0; i < std::size(fixed); ++i) {
    if (i >= lines.size() || lines[i] != fixed[i]) {
      throw ParseError("vocab line " + std::to_string(i) + " must be " +
                           std::string(fixed[i]),
                       offset);
    }
    offset += lines[i].size() + 1;
  }
  FineVocab vocab;
  std::size_t line = std::size(fixed);
  while (line < lines.size() && lines[line] == query_symbol(vocab.max_query_ + 1)) {
    ++vocab.max_query_;
    ++line;
  }
  if (vocab.max_query_ == 0) {
    throw ParseError("vocab must list [M1] after [MASK]", offset);
  }
  vocab.pieces_ = std::move(lines);
  offset = 0;
  for (std::size_t i = 0; i < vocab.pieces_.size(); ++i) {
    const std::string& p = vocab.pieces_[i];
    if (p.empty()) throw ParseError("empty vocab entry on line " + std::to_string(i), offset);
    if (!vocab.index_.emplace(p, static_cast<TokenId>(i)).second) {
      throw ParseError("duplicate vocab entry '" + p + "' on line " + std::to_string(i),
                       offset);
    }
    offset += p.size() + 1;
  }
  return vocab;
}

FineVocab FineVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read vocab file: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  try {
    return from_lines(std::move(lines));
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.offset());
  }
}

void FineVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocab file: " + path.string());
  for (const auto& p : pieces_) out << p << '\n';
  if (!out) throw IoError("error while writing vocab file: " + path.string());
}

std::optional<TokenId> FineVocab::find(std::string_view piece) const {
  const auto it = index_.find(std::string(piece));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& FineVocab::piece(TokenId id) const {
  if (id >= pieces_.size()) throw ArgumentError("fine id out of range: " + std::to_string(id));
  return pieces_[id];
}

TokenId FineVocab::query_id(int i) const {
  if (i < 1 || i > max_query_) {
    throw ConfigError("query symbol [M" + std::to_string(i) + "] not in vocab (max " +
                      std::to_string(max_query_) + ")");
  }
  return static_cast<TokenId>(4 + i);
}

std::string FineVocab::content_hash() const {
  Fnv1a h;
  for (const auto& p : pieces_) h.update(p).update("\n");
  return h.hex();
}

SubwordEncoding subword_tokenize(std::span<const std::string> words,
                                 const FineVocab& vocab) {
  SubwordEncoding out;
  out.spans.reserve(words.size());
  std::vector<TokenId> pieces;
  for (const std::string& word : words) {
    pieces.clear();
    bool ok = word.size() <= kMaxWordBytes;
    std::size_t start = 0;
    while (ok && start < word.size()) {
      std::size_t end = word.size();
      std::optional<TokenId> match;
      while (end > start) {
        std::string candidate = word.substr(start, end - start);
        if (start > 0) candidate.insert(0, FineVocab::kContinuation);
        match = vocab.find(candidate);
        if (match) break;
        --end;
      }
      if (!match) {
        ok = false;
        break;
      }
      pieces.push_back(*match);
      start = end;
    }
    const auto begin = static_cast<std::uint32_t>(out.ids.size());
    if (ok && !pieces.empty()) {
      out.ids.insert(out.ids.end(), pieces.begin(), pieces.end());
    } else {
      out.ids.push_back(vocab.unk_id());
    }
    out.spans.push_back({begin, static_cast<std::uint32_t>(out.ids.size()) - begin});
  }
  return out;
}

}  // namespace gramlm
