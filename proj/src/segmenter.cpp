#include "gramlm/segmenter.hpp"

#include <algorithm>
#include <limits>

#include "gramlm/error.hpp"

namespace gramlm {

BoundarySeq unigram_boundaries(std::size_t length) {
  BoundarySeq seq;
  seq.b.resize(length + 1);
  for (std::size_t i = 0; i <= length; ++i) seq.b[i] = static_cast<std::uint32_t>(i + 1);
  return seq;
}

void validate_boundaries(const BoundarySeq& b, std::size_t length) {
  if (b.b.size() < 2 && length > 0) throw ArgumentError("boundary list too short");
  if (b.b.empty() || b.b.front() != 1 || b.b.back() != length + 1) {
    throw ArgumentError("boundaries must start at 1 and end at |x|+1");
  }
  for (std::size_t i = 1; i < b.b.size(); ++i) {
    if (b.b[i] <= b.b[i - 1]) throw ArgumentError("boundaries must be strictly increasing");
  }
}

namespace {

bool segment_valid(std::span<const std::string> words, std::size_t begin, std::size_t len,
                   const NGramLexicon& lexicon) {
  return len == 1 || lexicon.contains(words.subspan(begin, len));
}

void enumerate_from(std::span<const std::string> words, std::size_t pos,
                    const NGramLexicon& lexicon, std::vector<std::uint32_t>& prefix,
                    std::vector<BoundarySeq>& out) {
  if (pos == words.size()) {
    BoundarySeq seq{prefix};
    seq.b.push_back(static_cast<std::uint32_t>(words.size() + 1));
    out.push_back(std::move(seq));
    return;
  }
  prefix.push_back(static_cast<std::uint32_t>(pos + 1));
  for (std::size_t len = 1; pos + len <= words.size(); ++len) {
    if (segment_valid(words, pos, len, lexicon)) {
      enumerate_from(words, pos + len, lexicon, prefix, out);
    }
  }
  prefix.pop_back();
}

}  // namespace

std::vector<BoundarySeq> enumerate_paths(std::span<const std::string> words,
                                         const NGramLexicon& lexicon) {
  if (words.size() > kMaxEnumerationLength) {
    throw ArgumentError("enumerate_paths is capped at " +
                        std::to_string(kMaxEnumerationLength) + " words");
  }
  std::vector<BoundarySeq> out;
  if (words.empty()) {
    out.push_back(BoundarySeq{{1}});
    return out;
  }
  std::vector<std::uint32_t> prefix;
  enumerate_from(words, 0, lexicon, prefix, out);
  return out;
}

BoundarySeq extract_boundaries(std::span<const std::string> words,
                               const NGramLexicon& lexicon) {
  const std::size_t n = words.size();
  const std::size_t max_len = static_cast<std::size_t>(std::max(1, lexicon.max_order()));
  // fewest[i]: minimum number of segments tiling words[i..n).
  std::vector<std::uint32_t> fewest(n + 1, std::numeric_limits<std::uint32_t>::max());
  fewest[n] = 0;
  for (std::size_t i = n; i-- > 0;) {
    for (std::size_t len = 1; len <= max_len && i + len <= n; ++len) {
      if (fewest[i + len] + 1 < fewest[i] && segment_valid(words, i, len, lexicon)) {
        fewest[i] = fewest[i + len] + 1;
      }
    }
  }
  BoundarySeq seq;
  std::size_t pos = 0;
  while (pos < n) {
    seq.b.push_back(static_cast<std::uint32_t>(pos + 1));
    for (std::size_t len = std::min(max_len, n - pos); len >= 1; --len) {
      if (fewest[pos + len] + 1 == fewest[pos] && segment_valid(words, pos, len, lexicon)) {
        pos += len;
        break;
      }
    }
  }
  seq.b.push_back(static_cast<std::uint32_t>(n + 1));
  return seq;
}

}  // namespace gramlm
