#pragma once

#include <cstdint>
#include <vector>

#include "ssm/layers.hpp"
#include "ssm/tensor.hpp"

namespace ssm {

// Which outputs receive the classification loss.
enum class Scheme { kJoint, kIndividual };

struct SSMConfig {
  Index num_channels = 2048;
  Index num_heads = 4;
  Index num_classes = 1000;
  bool bn_relu_on_last = true;
  Scheme scheme = Scheme::kJoint;

  void validate() const {
    if (num_heads < 1) throw ConfigError("ssm: num_heads must be >= 1");
    if (num_channels < 1 || num_classes < 1)
      throw ConfigError("ssm: num_channels and num_classes must be positive");
    if (num_channels % num_heads != 0)
      throw ConfigError("ssm: num_channels (" + std::to_string(num_channels) +
                        ") must be divisible by num_heads (" + std::to_string(num_heads) + ")");
  }

  // Channels per split: n = C / H.
  Index split_width() const { return num_channels / num_heads; }
};

template <typename Scalar>
struct SSMOutput {
  std::vector<TensorPtr<Scalar>> head_logits;  // B x num_classes each
  TensorPtr<Scalar> combined;                  // arithmetic mean over heads
};

// Split-and-share classifier head: head i sees the first i*n feature
// channels, applies BatchNorm + ReLU (optionally skipped for the last,
// full-width head), then its own FC; the module output is the mean of the
// per-head logits.
template <typename Scalar>
struct SSMHead {
  SSMConfig config;
  std::vector<BatchNormLayer<Scalar>> bn;  // one per head that normalizes
  std::vector<LinearLayer<Scalar>> fc;     // head i: i*n -> num_classes

  SSMHead() = default;
  explicit SSMHead(const SSMConfig& cfg) : config(cfg) {
    config.validate();
    const Index n = config.split_width();
    const Index bn_count = config.bn_relu_on_last ? config.num_heads : config.num_heads - 1;
    for (Index i = 1; i <= bn_count; ++i) bn.emplace_back(i * n);
    for (Index i = 1; i <= config.num_heads; ++i)
      fc.emplace_back(i * n, config.num_classes);
  }

  void init(SplitMix64& rng) {
    for (auto& layer : fc) layer.init(rng);
  }

  void set_mode(Mode m) {
    for (auto& layer : bn) layer.mode = m;
  }

  std::vector<TensorPtr<Scalar>> params() const {
    std::vector<TensorPtr<Scalar>> out;
    for (auto& layer : bn)
      for (auto& p : layer.params()) out.push_back(p);
    for (auto& layer : fc)
      for (auto& p : layer.params()) out.push_back(p);
    return out;
  }

  bool head_has_bn_relu(Index head) const {
    return head < config.num_heads || config.bn_relu_on_last;
  }
};

template <typename Scalar>
SSMOutput<Scalar> ssm_forward(Tape<Scalar>& tape, SSMHead<Scalar>& head,
                              TensorPtr<Scalar> features, Mode mode) {
  const auto& cfg = head.config;
  if (features->ndim() != 2 || features->shape[1] != cfg.num_channels)
    throw ShapeError("ssm_forward: features " + shape_str(features->shape) + " do not match " +
                     std::to_string(cfg.num_channels) + " channels");
  head.set_mode(mode);
  const Index n = cfg.split_width();

  SSMOutput<Scalar> out;
  for (Index i = 1; i <= cfg.num_heads; ++i) {
    auto split = slice_channels(tape, features, i * n);
    if (head.head_has_bn_relu(i))
      split = relu(tape, batchnorm_forward(tape, head.bn[i - 1], split));
    out.head_logits.push_back(linear_forward(tape, head.fc[i - 1], split));
  }

  // fixed summation order: ascending head index, then one scale
  TensorPtr<Scalar> acc = out.head_logits[0];
  for (Index i = 1; i < cfg.num_heads; ++i) acc = add(tape, acc, out.head_logits[i]);
  out.combined = scale(tape, acc, Scalar(1) / Scalar(cfg.num_heads));
  return out;
}

// Trainable parameter count of the head; running statistics excluded.
inline std::int64_t ssm_param_count(const SSMConfig& config, bool include_bn) {
  config.validate();
  const std::int64_t n = config.split_width();
  const std::int64_t k = config.num_classes;
  std::int64_t total = 0;
  for (std::int64_t i = 1; i <= config.num_heads; ++i) total += i * n * k + k;
  if (include_bn) {
    const std::int64_t bn_count = config.bn_relu_on_last ? config.num_heads : config.num_heads - 1;
    for (std::int64_t i = 1; i <= bn_count; ++i) total += 2 * i * n;
  }
  return total;
}

// The single FC the head degenerates to when every BatchNorm is the identity
// and ReLU is bypassed: column j of the result averages the fc columns of
// every head wide enough to see channel j (heads with i*n > j), and the bias
// is the mean of the head biases.
template <typename Scalar>
LinearLayer<Scalar> collapse_to_linear(const SSMHead<Scalar>& head) {
  const auto& cfg = head.config;
  const Index n = cfg.split_width();
  LinearLayer<Scalar> merged(cfg.num_channels, cfg.num_classes);
  for (Index i = 1; i <= cfg.num_heads; ++i) {
    const auto& w = head.fc[i - 1].weight;
    merged.weight->mat().leftCols(i * n) += w->mat();
    merged.bias->data += head.fc[i - 1].bias->data;
  }
  merged.weight->data /= Scalar(cfg.num_heads);
  merged.bias->data /= Scalar(cfg.num_heads);
  return merged;
}

}  // namespace ssm
