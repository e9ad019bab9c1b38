#pragma once

#include <span>

#include "gramlm/loss.hpp"
#include "gramlm/maskplan.hpp"
#include "gramlm/model.hpp"

namespace gramlm {

struct BatchOptions {
  TokenId mask_id = 4;
  DropoutSpec dropout;
};

// Forward (and, with `grads`, backward) over one batch of plans sharing an
// objective. Each term is averaged over its targets in the batch and the
// gradient is that of report.total. Gradients are accumulated into `grads`,
// which must be shaped like `params`.
//
//   contiguous     total = w_c * contiguous
//   explicit       total = w_e * explicit + w_c * contiguous (fallback spans)
//   comprehensive  total = w_comp * comprehensive
//   relation       total = w_gen * generator + w_comp * comprehensive + lambda * rtd
//
// Relation plans must already carry sampled identities and labels. The
// generator sees only the explicit view, so standard-model terms never reach
// its parameters.
template <typename Scalar>
LossReport evaluate_batch(const ModelParams<Scalar>& params, std::span<const MaskPlan> plans,
                          const LossWeights& weights, const BatchOptions& options,
                          ModelParams<Scalar>* grads = nullptr);

// Throws NumericError naming the first tensor with a non-finite entry.
template <typename Scalar>
void check_finite_gradients(const ModelParams<Scalar>& grads);

}  // namespace gramlm
