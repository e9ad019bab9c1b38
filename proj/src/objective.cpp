#include "gramlm/objective.hpp"

#include <string>
#include <vector>

#include "gramlm/error.hpp"

namespace gramlm {

namespace {

std::vector<std::uint32_t> indexes(const std::vector<Target>& targets) {
  std::vector<std::uint32_t> out;
  out.reserve(targets.size());
  for (const Target& t : targets) out.push_back(t.index);
  return out;
}

std::vector<std::uint32_t> ids(const std::vector<Target>& targets) {
  std::vector<std::uint32_t> out;
  out.reserve(targets.size());
  for (const Target& t : targets) out.push_back(t.id);
  return out;
}

double safe_div(double a, std::size_t n) { return n ? a / static_cast<double>(n) : 0.0; }

// Linear head on gathered rows: accumulates dW, db and scatters dH.
template <typename S>
void head_backward(const Matrix<S>& hidden, std::span<const std::uint32_t> rows,
                   const Matrix<S>& d_logits, const Matrix<S>& w, Matrix<S>& dw, RowVector<S>& db,
                   Matrix<S>& d_hidden) {
  if (rows.empty()) return;
  const Matrix<S> h = gather_rows(hidden, rows);
  dw.noalias() += h.transpose() * d_logits;
  db += d_logits.colwise().sum();
  const Matrix<S> dh = d_logits * w.transpose();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    d_hidden.row(rows[i]) += dh.row(static_cast<Eigen::Index>(i));
  }
}

}  // namespace

template <typename S>
LossReport evaluate_batch(const ModelParams<S>& params, std::span<const MaskPlan> plans,
                          const LossWeights& weights, const BatchOptions& options,
                          ModelParams<S>* grads) {
  if (plans.empty()) throw ArgumentError("evaluate_batch: empty batch");
  const Objective objective = plans.front().objective;
  std::size_t n_fine = 0;
  std::size_t n_coarse = 0;
  std::size_t n_rtd = 0;
  for (const MaskPlan& plan : plans) {
    if (plan.objective != objective) throw PlanError("batch mixes objectives");
    if (objective == Objective::kRelation && !plan.rtd_labels) {
      throw PlanError("relation plan has no sampled identities; fill it before training");
    }
    n_fine += plan.fine.size();
    n_coarse += plan.coarse.size();
    if (plan.rtd_labels) n_rtd += plan.rtd_labels->size();
  }

  // Gradient scale per target for each term.
  double fine_scale = 0.0;
  double coarse_scale = 0.0;
  switch (objective) {
    case Objective::kContiguous:
      fine_scale = safe_div(weights.contiguous, n_fine);
      break;
    case Objective::kExplicit:
      fine_scale = safe_div(weights.contiguous, n_fine);
      coarse_scale = safe_div(weights.explicit_ngram, n_coarse);
      break;
    case Objective::kComprehensive:
    case Objective::kRelation:
      fine_scale = coarse_scale = safe_div(weights.comprehensive, n_fine + n_coarse);
      break;
  }
  const bool relation = objective == Objective::kRelation;
  const double rtd_scale = relation ? safe_div(weights.rtd, n_rtd) : 0.0;
  const double gen_scale = relation ? safe_div(weights.generator, n_coarse) : 0.0;

  LossReport report;
  for (const MaskPlan& plan : plans) {
    const std::vector<TokenId> input = plan.input_ids();
    const Matrix<S> mask = build_attention_mask<S>(plan);
    const Activations<S> act =
        encode(params.encoder, std::span<const TokenId>(input), plan.positions, mask,
               options.dropout);
    const Matrix<S>& hidden = act.output();
    Matrix<S> d_hidden;
    if (grads) d_hidden = Matrix<S>::Zero(hidden.rows(), hidden.cols());

    const auto fine_rows = indexes(plan.fine);
    const auto fine_ids = ids(plan.fine);
    const auto coarse_rows = indexes(plan.coarse);
    const auto coarse_ids = ids(plan.coarse);

    if (!fine_rows.empty()) {
      const Matrix<S> logits = predict_fine(act, fine_rows, params);
      Matrix<S> d_logits;
      const Nll nll = softmax_nll(logits, fine_ids, grads ? &d_logits : nullptr, fine_scale);
      report.fine_sum += nll.sum;
      report.fine_count += nll.count;
      if (grads) {
        head_backward(hidden, fine_rows, d_logits, params.fine_w, grads->fine_w, grads->fine_b,
                      d_hidden);
      }
    }
    if (!coarse_rows.empty()) {
      const Matrix<S> logits = predict_ngram(act, coarse_rows, params);
      Matrix<S> d_logits;
      const Nll nll = softmax_nll(logits, coarse_ids, grads ? &d_logits : nullptr, coarse_scale);
      report.coarse_sum += nll.sum;
      report.coarse_count += nll.count;
      if (grads) {
        head_backward(hidden, coarse_rows, d_logits, params.ngram_w, grads->ngram_w,
                      grads->ngram_b, d_hidden);
      }
    }
    if (relation) {
      const std::size_t t = plan.context_length();
      const Vector<S> logits = predict_rtd(act, t, params);
      Vector<S> d_logits;
      const Nll nll = sigmoid_bce(logits, *plan.rtd_labels, grads ? &d_logits : nullptr, rtd_scale);
      report.rtd_sum += nll.sum;
      report.rtd_count += nll.count;
      if (grads) {
        const auto ht = hidden.topRows(static_cast<Eigen::Index>(t));
        grads->rtd_w.noalias() += ht.transpose() * d_logits;
        grads->rtd_b(0) += d_logits.sum();
        d_hidden.topRows(static_cast<Eigen::Index>(t)).noalias() +=
            d_logits * params.rtd_w.transpose();
      }

      // Generator: explicit MLM on the masked view.
      const std::vector<TokenId> gen_input = masked_context(plan, options.mask_id);
      const std::span<const std::uint32_t> gen_positions(plan.positions.data(), t);
      const auto n = static_cast<Eigen::Index>(t);
      const Activations<S> gen_act =
          encode(params.generator, std::span<const TokenId>(gen_input), gen_positions,
                 Matrix<S>::Zero(n, n).eval(), options.dropout);
      const Matrix<S> gen_h = gather_rows(gen_act.output(), coarse_rows);
      const Matrix<S> gen_logits = (gen_h * params.gen_ngram_w).rowwise() + params.gen_ngram_b;
      Matrix<S> d_gen;
      const Nll gen = softmax_nll(gen_logits, coarse_ids, grads ? &d_gen : nullptr, gen_scale);
      report.generator_sum += gen.sum;
      report.generator_count += gen.count;
      if (grads && !coarse_rows.empty()) {
        Matrix<S> d_gen_hidden = Matrix<S>::Zero(gen_act.output().rows(), gen_act.output().cols());
        head_backward(gen_act.output(), coarse_rows, d_gen, params.gen_ngram_w,
                      grads->gen_ngram_w, grads->gen_ngram_b, d_gen_hidden);
        backward_encoder(params.generator, gen_act, d_gen_hidden, grads->generator);
      }
    }
    if (grads) backward_encoder(params.encoder, act, d_hidden, grads->encoder);
  }

  report.contiguous = safe_div(report.fine_sum, report.fine_count);
  report.explicit_ngram = safe_div(report.coarse_sum, report.coarse_count);
  report.generator = safe_div(report.generator_sum, report.generator_count);
  report.rtd = safe_div(report.rtd_sum, report.rtd_count);
  report.comprehensive_sum = report.coarse_sum + report.fine_sum;
  switch (objective) {
    case Objective::kContiguous:
      report.total = weights.contiguous * report.contiguous;
      break;
    case Objective::kExplicit:
      report.total = weights.explicit_ngram * report.explicit_ngram +
                     weights.contiguous * report.contiguous;
      break;
    case Objective::kComprehensive:
      report.comprehensive =
          safe_div(report.comprehensive_sum, report.coarse_count + report.fine_count);
      report.total = weights.comprehensive * report.comprehensive;
      break;
    case Objective::kRelation: {
      report.comprehensive =
          safe_div(report.comprehensive_sum, report.coarse_count + report.fine_count);
      LossReport generator_part;
      generator_part.generator = weights.generator * report.generator;
      LossReport standard_part;
      standard_part.comprehensive = weights.comprehensive * report.comprehensive;
      standard_part.rtd = report.rtd;
      report.total = loss_joint_relation(generator_part, standard_part, weights.rtd);
      break;
    }
  }
  if (!std::isfinite(report.total)) throw NumericError("non-finite loss");
  return report;
}

template <typename S>
void check_finite_gradients(const ModelParams<S>& grads) {
  visit_params(grads, [](const std::string& name, const auto& t, bool) {
    if (!t.allFinite()) throw NumericError("non-finite gradient in tensor " + name);
  });
}

template LossReport evaluate_batch<float>(const ModelParams<float>&, std::span<const MaskPlan>,
                                          const LossWeights&, const BatchOptions&,
                                          ModelParams<float>*);
template LossReport evaluate_batch<double>(const ModelParams<double>&, std::span<const MaskPlan>,
                                           const LossWeights&, const BatchOptions&,
                                           ModelParams<double>*);
template void check_finite_gradients<float>(const ModelParams<float>&);
template void check_finite_gradients<double>(const ModelParams<double>&);

}  // namespace gramlm
