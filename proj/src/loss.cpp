#include "gramlm/loss.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "gramlm/error.hpp"

namespace gramlm {

template <typename S>
Nll softmax_nll(const Matrix<S>& logits, std::span<const std::uint32_t> targets, Matrix<S>* grad,
                double grad_scale) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw ArgumentError("loss: " + std::to_string(logits.rows()) + " logit rows for " +
                        std::to_string(targets.size()) + " targets");
  }
  if (grad) grad->resize(logits.rows(), logits.cols());
  Nll out;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const std::uint32_t t = targets[static_cast<std::size_t>(i)];
    if (t >= logits.cols()) {
      throw ArgumentError("loss: target id " + std::to_string(t) + " outside " +
                          std::to_string(logits.cols()) + " classes");
    }
    const auto row = logits.row(i);
    const S top = row.maxCoeff();
    const S total = (row.array() - top).exp().sum();
    const S log_z = top + std::log(total);
    out.sum += static_cast<double>(log_z - row(t));
    ++out.count;
    if (grad) {
      grad->row(i) = (row.array() - log_z).exp() * static_cast<S>(grad_scale);
      (*grad)(i, t) -= static_cast<S>(grad_scale);
    }
  }
  return out;
}

template <typename S>
Nll sigmoid_bce(const Vector<S>& logits, std::span<const std::uint8_t> labels, Vector<S>* grad,
                double grad_scale) {
  if (static_cast<std::size_t>(logits.size()) != labels.size()) {
    throw ArgumentError("rtd loss: " + std::to_string(logits.size()) + " logits for " +
                        std::to_string(labels.size()) + " labels");
  }
  if (grad) grad->resize(logits.size());
  Nll out;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double z = static_cast<double>(logits(i));
    const bool original = labels[static_cast<std::size_t>(i)] != 0;
    // -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    const double x = original ? -z : z;
    out.sum += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    ++out.count;
    if (grad) {
      const double p = 1.0 / (1.0 + std::exp(-z));
      (*grad)(i) = static_cast<S>(grad_scale * (p - (original ? 1.0 : 0.0)));
    }
  }
  return out;
}

template <typename S>
ComprehensiveNll loss_comprehensive(const Matrix<S>& coarse_logits, const Matrix<S>& fine_logits,
                                    const MaskPlan& plan) {
  std::vector<std::uint32_t> coarse;
  std::vector<std::uint32_t> fine;
  for (const Target& c : plan.coarse) coarse.push_back(c.id);
  for (const Target& f : plan.fine) fine.push_back(f.id);
  ComprehensiveNll out;
  out.coarse = loss_explicit(coarse_logits, coarse);
  out.fine = loss_contiguous(fine_logits, fine);
  out.sum = out.coarse.sum + out.fine.sum;
  return out;
}

double loss_joint_relation(const LossReport& generator, const LossReport& standard,
                           double lambda) {
  return generator.generator + standard.comprehensive + lambda * standard.rtd;
}

#define GRAMLM_INSTANTIATE_LOSS(S)                                                              \
  template Nll softmax_nll<S>(const Matrix<S>&, std::span<const std::uint32_t>, Matrix<S>*,    \
                              double);                                                          \
  template Nll sigmoid_bce<S>(const Vector<S>&, std::span<const std::uint8_t>, Vector<S>*,     \
                              double);                                                          \
  template ComprehensiveNll loss_comprehensive<S>(const Matrix<S>&, const Matrix<S>&,          \
                                                  const MaskPlan&);

GRAMLM_INSTANTIATE_LOSS(float)
GRAMLM_INSTANTIATE_LOSS(double)

}  // namespace gramlm
