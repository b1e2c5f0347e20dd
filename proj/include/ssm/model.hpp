#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ssm/layers.hpp"
#include "ssm/ssm_head.hpp"

namespace ssm {

enum class BackboneKind { kConvNet, kMlp };
enum class HeadKind { kSSM, kParallelFC };

struct ModelConfig {
  BackboneKind backbone = BackboneKind::kConvNet;
  Index in_channels = 1;
  Index image_h = 8;
  Index image_w = 8;
  Index feature_channels = 256;
  HeadKind head = HeadKind::kSSM;
  SSMConfig ssm;                // used when head == kSSM
  Index num_parallel_fc = 1;    // used when head == kParallelFC
  Index num_classes = 10;

  void validate() const {
    if (in_channels < 1 || image_h < 1 || image_w < 1)
      throw ConfigError("model: image dims must be positive");
    if (feature_channels < 1) throw ConfigError("model: feature_channels must be positive");
    if (backbone == BackboneKind::kConvNet && (image_h < 4 || image_w < 4))
      throw ConfigError("model: conv backbone needs images of at least 4x4");
    if (head == HeadKind::kSSM) {
      if (ssm.num_channels != feature_channels)
        throw ConfigError("model: ssm.num_channels must equal feature_channels");
      if (ssm.num_classes != num_classes)
        throw ConfigError("model: ssm.num_classes must equal num_classes");
      ssm.validate();
    } else if (num_parallel_fc < 1) {
      throw ConfigError("model: num_parallel_fc must be >= 1");
    }
  }
};

// Reference conv backbone:
//   conv(in->32, 3x3, pad 1)  BN ReLU pool2
//   conv(32->64, 3x3, pad 1)  BN ReLU pool2
//   conv(64->F, 3x3, pad 1)   BN ReLU
//   global_avg_pool -> F-channel feature
template <typename Scalar>
struct ConvBackbone {
  Conv2dLayer<Scalar> conv1, conv2, conv3;
  BatchNormLayer<Scalar> bn1, bn2, bn3;

  ConvBackbone() = default;
  ConvBackbone(Index in_channels, Index feature_channels)
      : conv1(in_channels, 32, 3, 1, 1),
        conv2(32, 64, 3, 1, 1),
        conv3(64, feature_channels, 3, 1, 1),
        bn1(32),
        bn2(64),
        bn3(feature_channels) {}

  void init(SplitMix64& rng) {
    conv1.init(rng);
    conv2.init(rng);
    conv3.init(rng);
  }
  void set_mode(Mode m) { bn1.mode = bn2.mode = bn3.mode = m; }
};

// Flatten -> linear -> BN -> ReLU feature extractor for fast experiments.
template <typename Scalar>
struct MlpBackbone {
  LinearLayer<Scalar> fc;
  BatchNormLayer<Scalar> bn;

  MlpBackbone() = default;
  MlpBackbone(Index in_features, Index feature_channels)
      : fc(in_features, feature_channels), bn(feature_channels) {}

  void init(SplitMix64& rng) { fc.init(rng); }
  void set_mode(Mode m) { bn.mode = m; }
};

// N full-width FC classifiers evaluated in parallel, outputs averaged; the
// parameter-matched 1FC/2FC/3FC baselines.
template <typename Scalar>
struct ParallelFCHead {
  std::vector<LinearLayer<Scalar>> fc;

  ParallelFCHead() = default;
  ParallelFCHead(Index members, Index in_features, Index num_classes) {
    for (Index i = 0; i < members; ++i) fc.emplace_back(in_features, num_classes);
  }

  void init(SplitMix64& rng) {
    for (auto& layer : fc) layer.init(rng);
  }
};

template <typename Scalar>
SSMOutput<Scalar> parallel_fc_forward(Tape<Scalar>& tape, ParallelFCHead<Scalar>& head,
                                      TensorPtr<Scalar> features) {
  SSMOutput<Scalar> out;
  for (auto& layer : head.fc) out.head_logits.push_back(linear_forward(tape, layer, features));
  TensorPtr<Scalar> acc = out.head_logits[0];
  for (std::size_t i = 1; i < out.head_logits.size(); ++i)
    acc = add(tape, acc, out.head_logits[i]);
  out.combined = scale(tape, acc, Scalar(1) / Scalar(out.head_logits.size()));
  return out;
}

template <typename Scalar>
struct ModelOutput {
  TensorPtr<Scalar> conv_maps;  // last conv activations (post BN+ReLU); null for MLP backbone
  TensorPtr<Scalar> features;   // B x F
  SSMOutput<Scalar> out;
};

template <typename Scalar>
struct Model {
  ModelConfig config;
  ConvBackbone<Scalar> conv_backbone;
  MlpBackbone<Scalar> mlp_backbone;
  SSMHead<Scalar> ssm;
  ParallelFCHead<Scalar> pfc;

  Model() = default;
  explicit Model(const ModelConfig& cfg) : config(cfg) {
    config.validate();
    if (config.backbone == BackboneKind::kConvNet)
      conv_backbone = ConvBackbone<Scalar>(config.in_channels, config.feature_channels);
    else
      mlp_backbone = MlpBackbone<Scalar>(config.in_channels * config.image_h * config.image_w,
                                         config.feature_channels);
    if (config.head == HeadKind::kSSM)
      ssm = SSMHead<Scalar>(config.ssm);
    else
      pfc = ParallelFCHead<Scalar>(config.num_parallel_fc, config.feature_channels,
                                   config.num_classes);
  }

  void init(SplitMix64& rng) {
    if (config.backbone == BackboneKind::kConvNet)
      conv_backbone.init(rng);
    else
      mlp_backbone.init(rng);
    if (config.head == HeadKind::kSSM)
      ssm.init(rng);
    else
      pfc.init(rng);
  }

  void set_mode(Mode m) {
    if (config.backbone == BackboneKind::kConvNet)
      conv_backbone.set_mode(m);
    else
      mlp_backbone.set_mode(m);
    if (config.head == HeadKind::kSSM) ssm.set_mode(m);
  }

  Index num_heads() const {
    return config.head == HeadKind::kSSM ? config.ssm.num_heads : config.num_parallel_fc;
  }

  ModelOutput<Scalar> forward(Tape<Scalar>& tape, TensorPtr<Scalar> images, Mode mode) {
    set_mode(mode);
    ModelOutput<Scalar> result;
    if (config.backbone == BackboneKind::kConvNet) {
      auto& b = conv_backbone;
      auto h1 = max_pool2(tape, relu(tape, batchnorm2d_forward(tape, b.bn1, conv2d_forward(tape, b.conv1, images))));
      auto h2 = max_pool2(tape, relu(tape, batchnorm2d_forward(tape, b.bn2, conv2d_forward(tape, b.conv2, h1))));
      result.conv_maps = relu(tape, batchnorm2d_forward(tape, b.bn3, conv2d_forward(tape, b.conv3, h2)));
      result.features = global_avg_pool(tape, result.conv_maps);
    } else {
      const Index B = images->shape[0];
      auto flat = make_tensor<Scalar>({B, images->numel() / B}, images->requires_grad);
      flat->data = images->data;
      tape.record(flat, [images, flat] {
        if (!images->requires_grad) return;
        images->ensure_grad();
        images->grad += flat->grad;
      });
      result.features =
          relu(tape, batchnorm_forward(tape, mlp_backbone.bn, linear_forward(tape, mlp_backbone.fc, flat)));
    }
    if (config.head == HeadKind::kSSM)
      result.out = ssm_forward(tape, ssm, result.features, mode);
    else
      result.out = parallel_fc_forward(tape, pfc, result.features);
    return result;
  }

  // Stable layer paths for checkpointing and diagnostics.
  std::vector<std::pair<std::string, TensorPtr<Scalar>>> named_params() const {
    std::vector<std::pair<std::string, TensorPtr<Scalar>>> out;
    auto add_linear = [&](const std::string& path, const LinearLayer<Scalar>& l) {
      out.emplace_back(path + ".weight", l.weight);
      out.emplace_back(path + ".bias", l.bias);
    };
    auto add_bn = [&](const std::string& path, const BatchNormLayer<Scalar>& l) {
      out.emplace_back(path + ".gamma", l.gamma);
      out.emplace_back(path + ".beta", l.beta);
    };
    if (config.backbone == BackboneKind::kConvNet) {
      out.emplace_back("backbone.conv1.weight", conv_backbone.conv1.weight);
      out.emplace_back("backbone.conv1.bias", conv_backbone.conv1.bias);
      out.emplace_back("backbone.conv2.weight", conv_backbone.conv2.weight);
      out.emplace_back("backbone.conv2.bias", conv_backbone.conv2.bias);
      out.emplace_back("backbone.conv3.weight", conv_backbone.conv3.weight);
      out.emplace_back("backbone.conv3.bias", conv_backbone.conv3.bias);
      add_bn("backbone.bn1", conv_backbone.bn1);
      add_bn("backbone.bn2", conv_backbone.bn2);
      add_bn("backbone.bn3", conv_backbone.bn3);
    } else {
      add_linear("backbone.fc", mlp_backbone.fc);
      add_bn("backbone.bn", mlp_backbone.bn);
    }
    if (config.head == HeadKind::kSSM) {
      for (std::size_t i = 0; i < ssm.bn.size(); ++i)
        add_bn("ssm.bn" + std::to_string(i + 1), ssm.bn[i]);
      for (std::size_t i = 0; i < ssm.fc.size(); ++i)
        add_linear("ssm.fc" + std::to_string(i + 1), ssm.fc[i]);
    } else {
      for (std::size_t i = 0; i < pfc.fc.size(); ++i)
        add_linear("head.fc" + std::to_string(i + 1), pfc.fc[i]);
    }
    return out;
  }

  // Non-trainable buffers (BN running statistics).
  std::vector<std::pair<std::string, TensorPtr<Scalar>>> named_buffers() const {
    std::vector<std::pair<std::string, TensorPtr<Scalar>>> out;
    auto add_bn = [&](const std::string& path, const BatchNormLayer<Scalar>& l) {
      out.emplace_back(path + ".running_mean", l.running_mean);
      out.emplace_back(path + ".running_var", l.running_var);
    };
    if (config.backbone == BackboneKind::kConvNet) {
      add_bn("backbone.bn1", conv_backbone.bn1);
      add_bn("backbone.bn2", conv_backbone.bn2);
      add_bn("backbone.bn3", conv_backbone.bn3);
    } else {
      add_bn("backbone.bn", mlp_backbone.bn);
    }
    if (config.head == HeadKind::kSSM)
      for (std::size_t i = 0; i < ssm.bn.size(); ++i)
        add_bn("ssm.bn" + std::to_string(i + 1), ssm.bn[i]);
    return out;
  }

  std::vector<TensorPtr<Scalar>> trainable_params() const {
    std::vector<TensorPtr<Scalar>> out;
    for (auto& [name, p] : named_params()) out.push_back(p);
    return out;
  }
};

}  // namespace ssm
