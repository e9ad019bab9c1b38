#include "gramlm/maskplan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gramlm/error.hpp"

namespace gramlm {

std::string_view objective_name(Objective objective) {
  switch (objective) {
    case Objective::kContiguous: return "contiguous";
    case Objective::kExplicit: return "explicit";
    case Objective::kComprehensive: return "comprehensive";
    case Objective::kRelation: return "relation";
  }
  return "unknown";
}

Objective parse_objective(std::string_view name) {
  for (auto o : {Objective::kContiguous, Objective::kExplicit, Objective::kComprehensive,
                 Objective::kRelation}) {
    if (objective_name(o) == name) return o;
  }
  throw ArgumentError("unknown objective: " + std::string(name));
}

std::vector<TokenId> MaskPlan::input_ids() const {
  std::vector<TokenId> ids = context_ids;
  ids.insert(ids.end(), query_ids.begin(), query_ids.end());
  return ids;
}

SegmentedSequence segment_words(std::span<const std::string> words,
                                const BoundarySeq& word_boundaries,
                                const JointVocab& joint) {
  validate_boundaries(word_boundaries, words.size());
  const SubwordEncoding enc = subword_tokenize(words, joint.fine());
  SegmentedSequence seq;
  seq.tokens = enc.ids;
  seq.boundaries.b.push_back(1);
  for (std::size_t s = 0; s < word_boundaries.segment_count(); ++s) {
    const std::uint32_t wb = word_boundaries.segment_begin(s);
    const std::uint32_t we = word_boundaries.segment_end(s);
    const std::uint32_t nwords = we - wb;
    const std::uint32_t sub_end = enc.spans[we - 1].begin + enc.spans[we - 1].length;
    seq.boundaries.b.push_back(sub_end + 1);
    seq.word_counts.push_back(nwords);
    if (nwords >= 2) {
      seq.identities.push_back(joint.ngram_id(words.subspan(wb, nwords)));
    } else if (enc.spans[wb].length == 1) {
      seq.identities.push_back(enc.ids[enc.spans[wb].begin]);
    } else {
      seq.identities.push_back(std::nullopt);
    }
  }
  return seq;
}

SegmentedSequence segment_sequence(std::span<const std::string> words,
                                   const JointVocab& joint) {
  return segment_words(words, extract_boundaries(words, joint.ngrams()), joint);
}

std::vector<SegmentedSequence> split_windows(const SegmentedSequence& seq,
                                             std::size_t max_tokens) {
  if (max_tokens == 0) throw ArgumentError("window size must be positive");
  std::vector<SegmentedSequence> windows;
  std::size_t s = 0;
  const std::size_t n = seq.segment_count();
  while (s < n) {
    SegmentedSequence w;
    const std::uint32_t start = seq.boundaries.segment_begin(s);
    w.boundaries.b.push_back(1);
    do {
      const std::uint32_t end = seq.boundaries.segment_end(s);
      w.boundaries.b.push_back(end - start + 1);
      w.word_counts.push_back(seq.word_counts[s]);
      w.identities.push_back(seq.identities[s]);
      ++s;
    } while (s < n && seq.boundaries.segment_end(s) - start <= max_tokens);
    w.tokens.assign(seq.tokens.begin() + start,
                    seq.tokens.begin() + (w.boundaries.b.back() - 1 + start));
    windows.push_back(std::move(w));
  }
  return windows;
}

MaskedSet sample_mask(const BoundarySeq& b, double rate, RngState& rng) {
  if (!(rate > 0.0 && rate < 1.0)) throw ArgumentError("mask rate must be in (0, 1)");
  const std::size_t segments = b.segment_count();
  if (segments == 0) throw ArgumentError("cannot sample a mask from an empty boundary list");
  const auto wanted = static_cast<std::size_t>(std::llround(rate * static_cast<double>(segments)));
  const std::size_t k = std::clamp<std::size_t>(wanted, 1, segments);
  std::vector<std::uint32_t> pool(segments);
  std::iota(pool.begin(), pool.end(), 1u);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(segments - i);
    std::swap(pool[i], pool[j]);
  }
  MaskedSet masked(pool.begin(), pool.begin() + k);
  std::sort(masked.begin(), masked.end());
  return masked;
}

MaskedSet sample_ngram_mask(const SegmentedSequence& seq, double rate, RngState& rng) {
  if (!(rate > 0.0 && rate < 1.0)) throw ArgumentError("mask rate must be in (0, 1)");
  std::vector<std::uint32_t> pool;
  for (std::size_t s = 0; s < seq.word_counts.size(); ++s) {
    if (seq.word_counts[s] >= 2) pool.push_back(static_cast<std::uint32_t>(s + 1));
  }
  if (pool.empty()) return {};
  const auto wanted = static_cast<std::size_t>(std::llround(rate * static_cast<double>(pool.size())));
  const std::size_t k = std::clamp<std::size_t>(wanted, 1, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  MaskedSet masked(pool.begin(), pool.begin() + k);
  std::sort(masked.begin(), masked.end());
  return masked;
}

namespace {

void validate_masked(const SegmentedSequence& seq, const MaskedSet& masked) {
  validate_boundaries(seq.boundaries, seq.tokens.size());
  if (seq.identities.size() != seq.segment_count() ||
      seq.word_counts.size() != seq.segment_count()) {
    throw ArgumentError("segment metadata does not match boundaries");
  }
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i] < 1 || masked[i] > seq.segment_count()) {
      throw ArgumentError("masked index " + std::to_string(masked[i]) + " out of range");
    }
    if (i > 0 && masked[i] <= masked[i - 1]) {
      throw ArgumentError("masked indexes must be strictly increasing");
    }
  }
}

enum class SlotKind { kKeep, kCollapse, kSpread };

// Builds the context and records, per masked segment, which kind of masking
// applies and where its first slot landed.
struct ContextLayout {
  std::vector<SlotKind> kinds;            // per segment
  std::vector<std::uint32_t> first_slot;  // per segment
};

MaskPlan collapsed_plan(Objective objective, const SegmentedSequence& seq,
                        const MaskedSet& masked, const JointVocab& joint,
                        int max_query) {
  validate_masked(seq, masked);
  const FineVocab& fine = joint.fine();
  const std::size_t segments = seq.segment_count();
  ContextLayout layout{std::vector<SlotKind>(segments, SlotKind::kKeep),
                       std::vector<std::uint32_t>(segments, 0)};
  for (std::uint32_t m : masked) {
    const std::size_t s = m - 1;
    const auto& identity = seq.identities[s];
    if (!identity && seq.word_counts[s] >= 2) {
      throw PlanError("masked n-gram segment " + std::to_string(m) + " is not in the lexicon");
    }
    if (identity && *identity >= joint.size()) {
      throw PlanError("segment identity out of joint range");
    }
    const bool too_long = objective != Objective::kExplicit &&
                          seq.boundaries.segment_length(s) > static_cast<std::uint32_t>(max_query);
    layout.kinds[s] = (identity && !too_long) ? SlotKind::kCollapse : SlotKind::kSpread;
  }

  MaskPlan plan;
  plan.objective = objective;
  for (std::size_t s = 0; s < segments; ++s) {
    layout.first_slot[s] = static_cast<std::uint32_t>(plan.context_ids.size());
    const std::uint32_t begin = seq.boundaries.segment_begin(s);
    const std::uint32_t end = seq.boundaries.segment_end(s);
    switch (layout.kinds[s]) {
      case SlotKind::kKeep:
        plan.context_ids.insert(plan.context_ids.end(), seq.tokens.begin() + begin,
                                seq.tokens.begin() + end);
        break;
      case SlotKind::kCollapse:
        plan.context_ids.push_back(fine.mask_id());
        break;
      case SlotKind::kSpread:
        plan.context_ids.insert(plan.context_ids.end(), end - begin, fine.mask_id());
        break;
    }
  }
  const auto t = static_cast<std::uint32_t>(plan.context_ids.size());
  plan.positions.resize(t);
  std::iota(plan.positions.begin(), plan.positions.end(), 1u);

  const bool with_queries = objective != Objective::kExplicit;
  for (std::uint32_t m : masked) {
    const std::size_t s = m - 1;
    const std::uint32_t begin = seq.boundaries.segment_begin(s);
    const std::uint32_t len = seq.boundaries.segment_length(s);
    const std::uint32_t slot = layout.first_slot[s];
    MaskedSegment entry{m, 0, 0};
    if (layout.kinds[s] == SlotKind::kCollapse) {
      plan.coarse.push_back({slot, *seq.identities[s]});
      entry.coarse = 1;
      if (with_queries) {
        for (std::uint32_t i = 0; i < len; ++i) {
          const auto row = t + static_cast<std::uint32_t>(plan.query_ids.size());
          plan.query_ids.push_back(fine.query_id(static_cast<int>(i + 1)));
          plan.positions.push_back(plan.positions[slot]);
          plan.fine.push_back({row, seq.tokens[begin + i]});
        }
        entry.fine = len;
      }
    } else {
      for (std::uint32_t i = 0; i < len; ++i) {
        plan.fine.push_back({slot + i, seq.tokens[begin + i]});
      }
      entry.fine = len;
    }
    plan.masked.push_back(entry);
  }
  return plan;
}

}  // namespace

MaskPlan plan_contiguous(const SegmentedSequence& seq, const MaskedSet& masked,
                         const FineVocab& fine) {
  validate_masked(seq, masked);
  MaskPlan plan;
  plan.objective = Objective::kContiguous;
  plan.context_ids = seq.tokens;
  for (std::uint32_t m : masked) {
    const std::uint32_t begin = seq.boundaries.segment_begin(m - 1);
    const std::uint32_t end = seq.boundaries.segment_end(m - 1);
    for (std::uint32_t i = begin; i < end; ++i) {
      plan.context_ids[i] = fine.mask_id();
      plan.fine.push_back({i, seq.tokens[i]});
    }
    plan.masked.push_back({m, 0, end - begin});
  }
  plan.positions.resize(plan.context_ids.size());
  std::iota(plan.positions.begin(), plan.positions.end(), 1u);
  return plan;
}

MaskPlan plan_explicit(const SegmentedSequence& seq, const MaskedSet& masked,
                       const JointVocab& joint) {
  return collapsed_plan(Objective::kExplicit, seq, masked, joint, 0);
}

MaskPlan plan_comprehensive(const SegmentedSequence& seq, const MaskedSet& masked,
                            const JointVocab& joint, const PlanOptions& options) {
  if (options.max_query < 1) throw ConfigError("max_query must be >= 1");
  if (options.max_query > joint.fine().max_query()) {
    throw ConfigError("max_query " + std::to_string(options.max_query) +
                      " exceeds the vocabulary's query symbols (" +
                      std::to_string(joint.fine().max_query()) + ")");
  }
  return collapsed_plan(Objective::kComprehensive, seq, masked, joint, options.max_query);
}

MaskPlan fill_relation(const MaskPlan& base, std::span<const std::uint32_t> sampled,
                       std::size_t joint_size, TokenId mask_id,
                       std::span<const std::uint8_t> keep_mask) {
  if (sampled.size() != base.coarse.size()) {
    throw ArgumentError("expected one sampled identity per masked slot");
  }
  if (!keep_mask.empty() && keep_mask.size() != sampled.size()) {
    throw ArgumentError("keep-mask flags must match the sampled identities");
  }
  MaskPlan plan = base;
  plan.objective = Objective::kRelation;
  std::vector<TokenId> original = base.context_ids;
  for (const Target& c : base.coarse) original[c.index] = c.id;
  for (const Target& f : base.fine) {
    if (f.index < original.size()) original[f.index] = f.id;
  }
  for (std::size_t i = 0; i < sampled.size(); ++i) {
    if (sampled[i] >= joint_size) {
      throw ArgumentError("sampled id " + std::to_string(sampled[i]) + " outside joint vocab");
    }
    const bool keep = !keep_mask.empty() && keep_mask[i] != 0;
    plan.context_ids[base.coarse[i].index] = keep ? mask_id : sampled[i];
  }
  std::vector<std::uint8_t> labels(plan.context_ids.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = plan.context_ids[i] == original[i] ? 1 : 0;
  }
  plan.rtd_labels = std::move(labels);
  return plan;
}

MaskPlan plan_relation(const SegmentedSequence& seq, const MaskedSet& masked,
                       const JointVocab& joint, std::span<const std::uint32_t> sampled,
                       const PlanOptions& options) {
  const MaskPlan base = plan_comprehensive(seq, masked, joint, options);
  return fill_relation(base, sampled, joint.size(), joint.fine().mask_id());
}

std::vector<TokenId> masked_context(const MaskPlan& plan, TokenId mask_id) {
  std::vector<TokenId> ids = plan.context_ids;
  for (const Target& c : plan.coarse) ids[c.index] = mask_id;
  return ids;
}

}  // namespace gramlm
