#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace gramlm {

using TokenId = std::uint32_t;

// Fine-grained (subword) vocabulary. Ids are dense in [0, size()).
//
// File layout: one piece per line, id = 0-based line number. The reserved
// symbols come first in this order:
//   [PAD] [UNK] [CLS] [SEP] [MASK] [M1] [M2] ... [Mk]
// where k >= 1 is the number of indexed query symbols. Continuation pieces
// carry a "##" prefix.
class FineVocab {
 public:
  static constexpr std::string_view kPad = "[PAD]";
  static constexpr std::string_view kUnk = "[UNK]";
  static constexpr std::string_view kCls = "[CLS]";
  static constexpr std::string_view kSep = "[SEP]";
  static constexpr std::string_view kMask = "[MASK]";
  static constexpr std::string_view kContinuation = "##";

  FineVocab() = default;

  // Reserved symbols are prepended; `pieces` must not repeat them.
  static FineVocab with_pieces(const std::vector<std::string>& pieces,
                               int max_query = 8);
  // Validates the reserved prefix; throws ParseError on violations.
  static FineVocab from_lines(std::vector<std::string> lines);
  static FineVocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return pieces_.size(); }
  std::optional<TokenId> find(std::string_view piece) const;
  const std::string& piece(TokenId id) const;

  TokenId pad_id() const { return 0; }
  TokenId unk_id() const { return 1; }
  TokenId cls_id() const { return 2; }
  TokenId sep_id() const { return 3; }
  TokenId mask_id() const { return 4; }
  // Indexed query symbol [Mi], i in [1, max_query()].
  TokenId query_id(int i) const;
  int max_query() const { return max_query_; }

  const std::vector<std::string>& pieces() const { return pieces_; }
  std::string content_hash() const;

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  int max_query_ = 0;
};

struct WordSpan {
  std::uint32_t begin = 0;
  std::uint32_t length = 0;
  bool operator==(const WordSpan&) const = default;
};

struct SubwordEncoding {
  std::vector<TokenId> ids;
  // One span per input word; spans tile `ids` in order.
  std::vector<WordSpan> spans;
};

// Greedy longest-match wordpiece segmentation. A word with no complete
// segmentation maps to a single [UNK].
SubwordEncoding subword_tokenize(std::span<const std::string> words,
                                 const FineVocab& vocab);

}  // namespace gramlm
