#pragma once

#include <vector>

#include "ssm/ssm_head.hpp"
#include "ssm/tensor.hpp"

namespace ssm {

// Mean softmax cross-entropy over the batch, computed with max-subtraction.
// Backward is the closed form (softmax - onehot) / B.
template <typename Scalar>
TensorPtr<Scalar> cross_entropy(Tape<Scalar>& tape, TensorPtr<Scalar> logits,
                                const std::vector<int>& labels) {
  if (logits->ndim() != 2 || logits->shape[0] != static_cast<Index>(labels.size()))
    throw ShapeError("cross_entropy: logits " + shape_str(logits->shape) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const Index B = logits->shape[0], K = logits->shape[1];
  for (int label : labels)
    if (label < 0 || label >= K)
      throw DomainError("cross_entropy: label " + std::to_string(label) + " outside [0, " +
                        std::to_string(K) + ")");

  auto softmax = std::make_shared<MatRM<Scalar>>(B, K);
  auto out = make_tensor<Scalar>({1}, logits->requires_grad);
  Scalar total = 0;
  for (Index b = 0; b < B; ++b) {
    auto row = logits->mat().row(b);
    Scalar m = row.maxCoeff();
    Eigen::Array<Scalar, 1, Eigen::Dynamic> shifted = row.array() - m;
    Eigen::Array<Scalar, 1, Eigen::Dynamic> exps = shifted.exp();
    Scalar z = exps.sum();
    softmax->row(b) = (exps / z).matrix();
    total += std::log(z) - shifted[labels[b]];
  }
  out->data[0] = total / Scalar(B);

  auto labels_copy = std::make_shared<std::vector<int>>(labels);
  tape.record(out, [logits, out, softmax, labels_copy, B] {
    if (!logits->requires_grad) return;
    logits->ensure_grad();
    Scalar g = out->grad[0] / Scalar(B);
    logits->grad_mat() += g * (*softmax);
    for (Index b = 0; b < B; ++b) logits->grad_mat()(b, (*labels_copy)[b]) -= g;
  });
  return out;
}

// Joint scheme: loss on the averaged output. Individual scheme: mean of the
// per-head losses, so gradient scale stays comparable across schemes.
template <typename Scalar>
TensorPtr<Scalar> ssm_loss(Tape<Scalar>& tape, const SSMOutput<Scalar>& output,
                           const std::vector<int>& labels, Scheme scheme) {
  if (scheme == Scheme::kJoint) return cross_entropy(tape, output.combined, labels);
  TensorPtr<Scalar> acc;
  for (auto& logits : output.head_logits) {
    auto term = cross_entropy(tape, logits, labels);
    acc = acc ? add(tape, acc, term) : term;
  }
  return scale(tape, acc, Scalar(1) / Scalar(output.head_logits.size()));
}

}  // namespace ssm
