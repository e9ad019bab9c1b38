#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gramlm/lexicon.hpp"
#include "gramlm/rng.hpp"
#include "gramlm/segmenter.hpp"
#include "gramlm/vocab.hpp"

namespace gramlm {

enum class Objective : std::uint8_t {
  kContiguous = 0,
  kExplicit = 1,
  kComprehensive = 2,
  kRelation = 3,
};

std::string_view objective_name(Objective objective);
// Throws ArgumentError for unknown names.
Objective parse_objective(std::string_view name);

// A subword sequence with n-gram boundaries mapped from word level, plus the
// joint identity of each segment: the V_N id of a multi-word segment, the
// fine id of a single-subword word, or nothing for a word split into
// several subwords.
struct SegmentedSequence {
  std::vector<TokenId> tokens;
  BoundarySeq boundaries;
  std::vector<std::uint32_t> word_counts;
  std::vector<std::optional<std::uint32_t>> identities;

  std::size_t segment_count() const { return boundaries.segment_count(); }
  bool operator==(const SegmentedSequence&) const = default;
};

SegmentedSequence segment_words(std::span<const std::string> words,
                                const BoundarySeq& word_boundaries,
                                const JointVocab& joint);
// Word boundaries from extract_boundaries against the joint vocab's V_N.
SegmentedSequence segment_sequence(std::span<const std::string> words,
                                   const JointVocab& joint);
// Splits at segment boundaries into windows of at most max_tokens subwords.
// A single segment longer than max_tokens gets a window of its own.
std::vector<SegmentedSequence> split_windows(const SegmentedSequence& seq,
                                             std::size_t max_tokens);

// Sorted 1-based segment indexes (indexes into b, e.g. {2, 4}).
using MaskedSet = std::vector<std::uint32_t>;

// |M| = max(1, round(rate * (|b| - 1))) segments drawn uniformly without
// replacement.
MaskedSet sample_mask(const BoundarySeq& b, double rate, RngState& rng);

// Same draw restricted to multi-word segments (held-out n-gram evaluation).
// Empty when the sequence has none.
MaskedSet sample_ngram_mask(const SegmentedSequence& seq, double rate, RngState& rng);

struct Target {
  // Coarse: context slot. Fine: row in the full (T + Q) layout, i.e. a
  // context slot for contiguous masking or T + query index.
  std::uint32_t index = 0;
  std::uint32_t id = 0;
  bool operator==(const Target&) const = default;
};

// Per masked segment, how many coarse and fine targets it owns. Target lists
// are segment-major in M order.
struct MaskedSegment {
  std::uint32_t segment = 0;
  std::uint32_t coarse = 0;
  std::uint32_t fine = 0;
  bool operator==(const MaskedSegment&) const = default;
};

struct MaskPlan {
  Objective objective = Objective::kContiguous;
  std::vector<TokenId> context_ids;     // T, joint-space ids
  std::vector<std::uint32_t> positions;  // T + Q; queries share their slot's position
  std::vector<TokenId> query_ids;       // Q indexed mask symbols
  std::vector<Target> coarse;           // y_M at context slots
  std::vector<Target> fine;             // z_M tokens
  std::optional<std::vector<std::uint8_t>> rtd_labels;  // T labels, 1 = original
  std::vector<MaskedSegment> masked;

  std::size_t context_length() const { return context_ids.size(); }
  std::size_t query_count() const { return query_ids.size(); }
  std::size_t length() const { return context_ids.size() + query_ids.size(); }
  // context ids followed by query ids.
  std::vector<TokenId> input_ids() const;

  bool operator==(const MaskPlan&) const = default;
};

struct PlanOptions {
  // Segments with more subwords than this are masked contiguously.
  int max_query = 8;
};

// Each masked subword becomes its own [MASK]; fine targets at those slots.
MaskPlan plan_contiguous(const SegmentedSequence& seq, const MaskedSet& masked,
                         const FineVocab& fine);
// Each masked segment collapses to one [MASK] slot predicting its joint id.
MaskPlan plan_explicit(const SegmentedSequence& seq, const MaskedSet& masked,
                       const JointVocab& joint);
// Explicit layout plus [M1]..[Mn] queries per masked segment.
MaskPlan plan_comprehensive(const SegmentedSequence& seq, const MaskedSet& masked,
                            const JointVocab& joint, const PlanOptions& options = {});
// Comprehensive layout with slot ids replaced by sampled identities and RTD
// labels against the original identities.
MaskPlan plan_relation(const SegmentedSequence& seq, const MaskedSet& masked,
                       const JointVocab& joint, std::span<const std::uint32_t> sampled,
                       const PlanOptions& options = {});

// Fills the coarse slots of a comprehensive-layout plan with `sampled` (one
// per coarse target). Slots flagged in keep_mask stay [MASK].
MaskPlan fill_relation(const MaskPlan& base, std::span<const std::uint32_t> sampled,
                       std::size_t joint_size, TokenId mask_id,
                       std::span<const std::uint8_t> keep_mask = {});

// Context with every coarse slot showing [MASK]: the explicit view the
// generator reads.
std::vector<TokenId> masked_context(const MaskPlan& plan, TokenId mask_id);

// Additive attention mask over the (T + Q) layout: context rows see all
// context columns and no query; query rows see all context columns and
// only themselves among queries.
template <typename Scalar = float>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> build_attention_mask(
    const MaskPlan& plan) {
  const Eigen::Index t = static_cast<Eigen::Index>(plan.context_length());
  const Eigen::Index q = static_cast<Eigen::Index>(plan.query_count());
  const Scalar blocked = -std::numeric_limits<Scalar>::infinity();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> mask =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(t + q, t + q);
  mask.topRightCorner(t, q).setConstant(blocked);
  mask.bottomRightCorner(q, q).setConstant(blocked);
  mask.bottomRightCorner(q, q).diagonal().setZero();
  return mask;
}

}  // namespace gramlm
