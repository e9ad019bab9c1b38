#pragma once

// Small vocabularies, random plans and a finite-difference gradient check
// shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gramlm/lexicon.hpp"
#include "gramlm/maskplan.hpp"
#include "gramlm/model.hpp"
#include "gramlm/objective.hpp"

namespace gramlm::testing {

// w0..w11 as single pieces, "walk ##ed" for a split word, six lexicon entries.
inline JointVocab toy_joint(int max_query = 8) {
  std::vector<std::string> pieces;
  for (int i = 0; i < 12; ++i) pieces.push_back("w" + std::to_string(i));
  pieces.push_back("walk");
  pieces.push_back("##ed");
  std::map<int, std::vector<ScoredNGram>> by_order;
  by_order[2] = {{{"w0", "w1"}, 6, 9}, {{"w2", "w3"}, 5, 9}, {{"w4", "w5"}, 4, 9},
                 {{"w6", "w7"}, 3, 9}};
  by_order[3] = {{{"w8", "w9", "w10"}, 2, 9}, {{"w0", "w1", "w2"}, 1, 9}};
  return JointVocab(FineVocab::with_pieces(pieces, max_query), NGramLexicon(by_order));
}

// With split_words, about one word in 14 is "walked", which has no single
// identity and so is always masked token by token.
inline Words random_words(RngState& rng, std::size_t min_len, std::size_t max_len,
                          bool split_words = true) {
  const std::size_t n = min_len + rng.below(max_len - min_len + 1);
  Words w(n);
  for (auto& x : w) {
    x = split_words && rng.below(14) == 0 ? "walked" : "w" + std::to_string(rng.below(12));
  }
  return w;
}

// Plans for one objective; relation plans get random sampled identities.
inline std::vector<MaskPlan> random_plans(const JointVocab& joint, Objective objective,
                                          std::size_t count, RngState& rng, double rate = 0.3,
                                          std::size_t max_len = 10, bool split_words = true) {
  std::vector<MaskPlan> out;
  while (out.size() < count) {
    const Words words = random_words(rng, 3, max_len, split_words);
    const SegmentedSequence seq = segment_sequence(words, joint);
    const MaskedSet m = sample_mask(seq.boundaries, rate, rng);
    switch (objective) {
      case Objective::kContiguous:
        out.push_back(plan_contiguous(seq, m, joint.fine()));
        break;
      case Objective::kExplicit:
        out.push_back(plan_explicit(seq, m, joint));
        break;
      case Objective::kComprehensive:
        out.push_back(plan_comprehensive(seq, m, joint));
        break;
      case Objective::kRelation: {
        const MaskPlan base = plan_comprehensive(seq, m, joint);
        std::vector<std::uint32_t> sampled;
        for (const Target& c : base.coarse) {
          sampled.push_back(rng.below(2) ? c.id : static_cast<std::uint32_t>(rng.below(joint.size())));
        }
        out.push_back(fill_relation(base, sampled, joint.size(), joint.fine().mask_id()));
        break;
      }
    }
  }
  return out;
}

inline ModelConfig tiny_config(const JointVocab& joint, int layers = 2, int hidden = 16,
                               int heads = 2, int ffn = 32) {
  ModelConfig c;
  c.layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.ffn = ffn;
  c.max_positions = 32;
  c.fine_vocab = static_cast<int>(joint.fine_size());
  c.ngram_vocab = static_cast<int>(joint.ngram_size());
  c.dropout = 0.0;
  c.max_query = joint.fine().max_query();
  return c;
}

struct GradSample {
  std::string tensor;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradSample> samples;
  double max_rel_error = 0.0;
  GradSample worst;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps parameters whose
// gradient is at roundoff level from dominating.
inline double grad_rel_error(double a, double n, double floor = 1e-7) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Central differences on `count` parameters drawn from tensors that receive a
// gradient, compared against evaluate_batch's analytic gradient.
inline GradCheckReport finite_difference_check(ModelParams<double> params,
                                               std::span<const MaskPlan> plans,
                                               const LossWeights& weights, std::size_t count,
                                               RngState& rng, double eps = 1e-4) {
  const BatchOptions options{};
  ModelParams<double> grads = zeros_like(params);
  evaluate_batch(params, plans, weights, options, &grads);
  auto p_refs = tensor_refs(params);
  const auto g_refs = tensor_refs(std::as_const(grads));
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < g_refs.size(); ++i) {
    if (g_refs[i].map().cwiseAbs().maxCoeff() > 0.0) live.push_back(i);
  }
  GradCheckReport report;
  for (std::size_t s = 0; s < count && !live.empty(); ++s) {
    const std::size_t t = live[rng.below(live.size())];
    // Within embedding-like tensors prefer entries that carry gradient.
    std::vector<Eigen::Index> nonzero;
    for (Eigen::Index e = 0; e < g_refs[t].size(); ++e) {
      if (g_refs[t].data[e] != 0.0) nonzero.push_back(e);
    }
    const Eigen::Index e = nonzero.empty()
                               ? static_cast<Eigen::Index>(rng.below(g_refs[t].size()))
                               : nonzero[rng.below(nonzero.size())];
    double& w = p_refs[t].data[e];
    const double saved = w;
    w = saved + eps;
    const double up = evaluate_batch(params, plans, weights, options).total;
    w = saved - eps;
    const double down = evaluate_batch(params, plans, weights, options).total;
    w = saved;
    GradSample sample{p_refs[t].name, e, g_refs[t].data[e], (up - down) / (2 * eps), 0.0};
    sample.rel_error = grad_rel_error(sample.analytic, sample.numeric);
    if (report.samples.empty() || sample.rel_error > report.max_rel_error) {
      report.max_rel_error = sample.rel_error;
      report.worst = sample;
    }
    report.samples.push_back(sample);
  }
  return report;
}

}  // namespace gramlm::testing
