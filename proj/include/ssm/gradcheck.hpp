#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ssm/tensor.hpp"

namespace ssm {

// Compares analytic gradients against central finite differences.
//
// `make_loss` builds a fresh forward pass on the given tape and returns the
// scalar loss; it is called once for the analytic pass and twice per
// parameter element for the numeric pass. Returns the max relative error
// over all elements of all listed parameters. Meaningful in 64-bit only.
//
// `atol` skips elements where both gradients are below it: a parameter the
// loss is exactly invariant to (a conv bias feeding BatchNorm) has analytic
// gradient 0.0 while finite differences see only roundoff noise.
template <typename Scalar, typename MakeLoss>
Scalar grad_check(MakeLoss&& make_loss, const std::vector<TensorPtr<Scalar>>& params,
                  Scalar h = Scalar(1e-5), Scalar atol = Scalar(0)) {
  for (auto& p : params) p->zero_grad();
  std::vector<Vec<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    auto loss = make_loss(tape);
    tape.backward(loss);
    for (auto& p : params) {
      p->ensure_grad();
      analytic.push_back(p->grad);
      p->zero_grad();
    }
  }

  auto eval_loss = [&] {
    Tape<Scalar> tape;
    Scalar v = make_loss(tape)->data[0];
    for (auto& p : params) p->zero_grad();
    return v;
  };

  Scalar worst = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (Index i = 0; i < p->numel(); ++i) {
      Scalar saved = p->data[i];
      p->data[i] = saved + h;
      Scalar up = eval_loss();
      p->data[i] = saved - h;
      Scalar down = eval_loss();
      p->data[i] = saved;
      Scalar numeric = (up - down) / (2 * h);
      Scalar a = analytic[pi][i];
      if (std::abs(a) < atol && std::abs(numeric) < atol) continue;
      Scalar denom = std::max({std::abs(a), std::abs(numeric), Scalar(1e-12)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ssm
