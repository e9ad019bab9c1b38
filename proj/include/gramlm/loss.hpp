#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "gramlm/maskplan.hpp"
#include "gramlm/model.hpp"

namespace gramlm {

// Summed negative log-likelihood (nats) over `count` targets.
struct Nll {
  double sum = 0.0;
  std::size_t count = 0;
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

// Softmax cross-entropy per row. With `grad`, writes
// grad_scale * (softmax - onehot). Throws ArgumentError on out-of-range
// targets or a row/target count mismatch.
template <typename Scalar>
Nll softmax_nll(const Matrix<Scalar>& logits, std::span<const std::uint32_t> targets,
                Matrix<Scalar>* grad = nullptr, double grad_scale = 1.0);

// Binary cross-entropy with label 1 = original. Gradient is
// grad_scale * (sigmoid(z) - y).
template <typename Scalar>
Nll sigmoid_bce(const Vector<Scalar>& logits, std::span<const std::uint8_t> labels,
                Vector<Scalar>* grad = nullptr, double grad_scale = 1.0);

// Masked-token MLM over V_F.
template <typename Scalar>
Nll loss_contiguous(const Matrix<Scalar>& logits, std::span<const std::uint32_t> targets) {
  return softmax_nll(logits, targets);
}

// One identity per slot over the joint space.
template <typename Scalar>
Nll loss_explicit(const Matrix<Scalar>& logits, std::span<const std::uint32_t> targets) {
  return softmax_nll(logits, targets);
}

struct ComprehensiveNll {
  Nll coarse;
  Nll fine;
  // coarse.sum + fine.sum, evaluated in that order.
  double sum = 0.0;
  double per_target() const {
    const std::size_t n = coarse.count + fine.count;
    return n ? sum / static_cast<double>(n) : 0.0;
  }
};

// Coarse logits row-aligned with plan.coarse, fine logits with plan.fine.
template <typename Scalar>
ComprehensiveNll loss_comprehensive(const Matrix<Scalar>& coarse_logits,
                                    const Matrix<Scalar>& fine_logits, const MaskPlan& plan);

template <typename Scalar>
Nll loss_rtd(const Vector<Scalar>& logits, std::span<const std::uint8_t> labels) {
  return sigmoid_bce(logits, labels);
}

struct LossWeights {
  double contiguous = 1.0;
  double explicit_ngram = 1.0;
  double comprehensive = 1.0;
  double generator = 1.0;
  double rtd = 1.0;  // lambda

  bool operator==(const LossWeights&) const = default;
};

// Per-term means (nats per target) plus the raw sums behind them. A term
// with no targets in the batch reports 0.
struct LossReport {
  double contiguous = 0.0;
  double explicit_ngram = 0.0;
  double comprehensive = 0.0;
  double generator = 0.0;
  double rtd = 0.0;
  double total = 0.0;

  double fine_sum = 0.0;
  double coarse_sum = 0.0;
  double comprehensive_sum = 0.0;
  double generator_sum = 0.0;
  double rtd_sum = 0.0;
  std::size_t fine_count = 0;
  std::size_t coarse_count = 0;
  std::size_t generator_count = 0;
  std::size_t rtd_count = 0;
};

// total = generator + comprehensive + lambda * rtd.
double loss_joint_relation(const LossReport& generator, const LossReport& standard,
                           double lambda);

}  // namespace gramlm
