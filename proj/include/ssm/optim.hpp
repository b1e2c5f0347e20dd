#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ssm/ssm_head.hpp"
#include "ssm/tensor.hpp"

namespace ssm {

struct TrainConfig {
  double base_lr = 0.05;
  Index batch_size = 128;
  int epochs = 15;
  std::vector<int> milestones = {8, 12};
  double lr_decay = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  Scheme scheme = Scheme::kJoint;
  std::uint64_t seed = 0;

  void validate() const {
    if (base_lr <= 0) throw ConfigError("train: base_lr must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (i > 0 && milestones[i] <= milestones[i - 1])
        throw ConfigError("train: milestones must be strictly increasing");
      if (milestones[i] >= epochs)
        throw ConfigError("train: milestone " + std::to_string(milestones[i]) +
                          " must be < epochs (" + std::to_string(epochs) + ")");
    }
  }
};

// Step schedule: base_lr * lr_decay^(milestones passed).
inline double lr_at(int epoch, const TrainConfig& config) {
  double lr = config.base_lr;
  for (int m : config.milestones)
    if (m <= epoch) lr *= config.lr_decay;
  return lr;
}

// Per-parameter momentum buffers, keyed by tensor identity; lazily created
// as zeros.
template <typename Scalar>
struct SGDState {
  std::map<const Tensor<Scalar>*, Vec<Scalar>> velocity;

  Vec<Scalar>& velocity_for(const TensorPtr<Scalar>& p) {
    auto it = velocity.find(p.get());
    if (it == velocity.end())
      it = velocity.emplace(p.get(), Vec<Scalar>::Zero(p->numel())).first;
    return it->second;
  }
};

// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
// Only the listed parameters are touched; BN running statistics and other
// buffers are never part of the list. Gradients are cleared after the step.
template <typename Scalar>
void sgd_step(const std::vector<TensorPtr<Scalar>>& params, SGDState<Scalar>& state, Scalar lr,
              Scalar momentum, Scalar weight_decay) {
  for (auto& p : params) {
    if (!p->has_grad())
      throw ContractError("sgd_step: parameter has no gradient (missing backward?)");
    auto& v = state.velocity_for(p);
    v = momentum * v + p->grad + weight_decay * p->data;
    p->data -= lr * v;
    p->zero_grad();
  }
}

}  // namespace ssm
