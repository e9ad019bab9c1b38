#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gramlm/lexicon.hpp"

namespace gramlm {

// N-gram starting boundaries b = {b_1, ..., b_|b|}, 1-based, with b_1 = 1 and
// b_|b| = |x| + 1. Segment i (0-based here) covers [b[i], b[i+1]).
struct BoundarySeq {
  std::vector<std::uint32_t> b;

  std::size_t segment_count() const { return b.empty() ? 0 : b.size() - 1; }
  // 0-based [begin, end) of segment i.
  std::uint32_t segment_begin(std::size_t i) const { return b[i] - 1; }
  std::uint32_t segment_end(std::size_t i) const { return b[i + 1] - 1; }
  std::uint32_t segment_length(std::size_t i) const { return b[i + 1] - b[i]; }

  bool operator==(const BoundarySeq&) const = default;
  auto operator<=>(const BoundarySeq&) const = default;
};

BoundarySeq unigram_boundaries(std::size_t length);

// Throws ArgumentError unless b tiles [1, length + 1] with strictly
// increasing boundaries.
void validate_boundaries(const BoundarySeq& b, std::size_t length);

inline constexpr std::size_t kMaxEnumerationLength = 24;

// Every tiling whose multi-word segments are in the lexicon. Exponential;
// throws ArgumentError above kMaxEnumerationLength words.
std::vector<BoundarySeq> enumerate_paths(std::span<const std::string> words,
                                         const NGramLexicon& lexicon);

// A tiling with the fewest segments. Among several, the one whose segment
// lengths are lexicographically largest (leftmost-longest). O(|x| * n_max).
BoundarySeq extract_boundaries(std::span<const std::string> words,
                               const NGramLexicon& lexicon);

}  // namespace gramlm
