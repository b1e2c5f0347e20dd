#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "ssm/model.hpp"
#include "ssm/train.hpp"

namespace ssm {

template <typename Scalar>
struct GradCamMap {
  MatRM<Scalar> values;  // upsampled, in [0, 1]
  Index source_h = 0, source_w = 0;
  Index head_index = 0;      // 1-based
  Index channel_lo = 0, channel_hi = 0;  // [lo, hi): the head's own split
};

// Bilinear upsampling with corner alignment; a constant map stays constant.
template <typename Scalar>
MatRM<Scalar> bilinear_upsample(const MatRM<Scalar>& src, Index dst_h, Index dst_w) {
  MatRM<Scalar> dst(dst_h, dst_w);
  const Index src_h = src.rows(), src_w = src.cols();
  for (Index y = 0; y < dst_h; ++y) {
    Scalar fy = src_h > 1 && dst_h > 1
                    ? Scalar(y) * Scalar(src_h - 1) / Scalar(dst_h - 1)
                    : Scalar(0);
    Index y0 = static_cast<Index>(fy);
    Index y1 = std::min(y0 + 1, src_h - 1);
    Scalar wy = fy - Scalar(y0);
    for (Index x = 0; x < dst_w; ++x) {
      Scalar fx = src_w > 1 && dst_w > 1
                      ? Scalar(x) * Scalar(src_w - 1) / Scalar(dst_w - 1)
                      : Scalar(0);
      Index x0 = static_cast<Index>(fx);
      Index x1 = std::min(x0 + 1, src_w - 1);
      Scalar wx = fx - Scalar(x0);
      dst(y, x) = (1 - wy) * ((1 - wx) * src(y0, x0) + wx * src(y0, x1)) +
                  wy * ((1 - wx) * src(y1, x0) + wx * src(y1, x1));
    }
  }
  return dst;
}

// Split-wise Grad-CAM: gradient of head `head_index`'s logit for
// `target_class` w.r.t. the last conv activations, restricted to the head's
// OWN quarter of channels [(i-1)*n, i*n) rather than its full prefix.
// Per-channel weight = spatial mean of the gradient; the map is
// ReLU(sum_k w_k * activation_k), max-normalized (an all-zero map stays
// zero), bilinearly upsampled to the input size.
//
// `perturb_conv` (optional) mutates the conv activations before they feed the
// pooled feature; used to probe which channels the map depends on.
template <typename Scalar>
GradCamMap<Scalar> grad_cam_split(Model<Scalar>& model, TensorPtr<Scalar> image,
                                  Index target_class, Index head_index,
                                  const std::type_identity_t<std::function<void(Tensor<Scalar>&)>>& perturb_conv = {}) {
  if (model.config.backbone != BackboneKind::kConvNet || model.config.head != HeadKind::kSSM)
    throw ContractError("grad_cam_split: requires the conv backbone with an SSM head");
  if (head_index < 1 || head_index > model.config.ssm.num_heads)
    throw ShapeError("grad_cam_split: head_index " + std::to_string(head_index) + " outside [1, " +
                     std::to_string(model.config.ssm.num_heads) + "]");
  if (target_class < 0 || target_class >= model.config.num_classes)
    throw ShapeError("grad_cam_split: class " + std::to_string(target_class) + " outside [0, " +
                     std::to_string(model.config.num_classes) + ")");
  if (image->ndim() != 4 || image->shape[0] != 1)
    throw ShapeError("grad_cam_split: need a single 1 x C x H x W image");

  model.set_mode(Mode::kEval);
  auto& b = model.conv_backbone;
  Tape<Scalar> tape;
  auto h1 = max_pool2(tape, relu(tape, batchnorm2d_forward(tape, b.bn1, conv2d_forward(tape, b.conv1, image))));
  auto h2 = max_pool2(tape, relu(tape, batchnorm2d_forward(tape, b.bn2, conv2d_forward(tape, b.conv2, h1))));
  auto conv_maps = relu(tape, batchnorm2d_forward(tape, b.bn3, conv2d_forward(tape, b.conv3, h2)));
  if (perturb_conv) perturb_conv(*conv_maps);
  auto features = global_avg_pool(tape, conv_maps);
  auto out = ssm_forward(tape, model.ssm, features, Mode::kEval);
  tape.backward(pick(tape, out.head_logits[head_index - 1], 0, target_class));

  const Index C = conv_maps->shape[1], mh = conv_maps->shape[2], mw = conv_maps->shape[3];
  const Index hw = mh * mw;
  const Index n = model.config.ssm.split_width();
  const Index lo = (head_index - 1) * n, hi = head_index * n;

  conv_maps->ensure_grad();
  MatRM<Scalar> raw = MatRM<Scalar>::Zero(mh, mw);
  for (Index c = lo; c < hi; ++c) {
    Scalar weight = conv_maps->grad.segment(c * hw, hw).sum() / Scalar(hw);
    Eigen::Map<const MatRM<Scalar>> act(conv_maps->data.data() + c * hw, mh, mw);
    raw += weight * act;
  }
  raw = raw.cwiseMax(Scalar(0));
  Scalar peak = raw.maxCoeff();
  if (peak > Scalar(0)) raw /= peak;

  GradCamMap<Scalar> map;
  map.source_h = mh;
  map.source_w = mw;
  map.head_index = head_index;
  map.channel_lo = lo;
  map.channel_hi = hi;
  map.values = bilinear_upsample(raw, image->shape[2], image->shape[3]);
  (void)C;
  return map;
}

// Fraction of samples where any candidate (each head or the combined output)
// predicts the true label; an upper bound on every candidate's accuracy.
template <typename Scalar>
double oracle_accuracy(Model<Scalar>& model, const Dataset<Scalar>& ds) {
  return evaluate(model, ds).oracle_acc;
}

enum class EnsembleRule { kMeanSoftmax, kMeanLogits };

// Averages the combined outputs of independently trained models; reports
// ensemble top-1 accuracy plus each member's solo accuracy (in head_acc).
template <typename Scalar>
MetricsReport ensemble_eval(std::vector<Model<Scalar>*> members, EnsembleRule rule,
                            const Dataset<Scalar>& ds, Index batch_size = 256) {
  if (members.size() < 2) throw ContractError("ensemble_eval: need at least 2 members");
  if (ds.size() == 0) throw ContractError("ensemble_eval: empty dataset");
  const Index K = members[0]->config.num_classes;
  for (auto* m : members)
    if (m->config.num_classes != K)
      throw ConfigError("ensemble_eval: member class counts differ (" + std::to_string(K) +
                        " vs " + std::to_string(m->config.num_classes) + ")");

  MetricsReport report;
  report.head_acc.assign(members.size(), 0.0);
  std::vector<Index> solo_correct(members.size(), 0);
  Index ensemble_correct = 0;

  SplitMix64 rng(0);
  for (auto& idx : batch_indices(ds.size(), batch_size, false, rng)) {
    auto batch = gather(ds, idx);
    const Index B = batch.images->shape[0];
    MatRM<Scalar> combined = MatRM<Scalar>::Zero(B, K);
    for (std::size_t m = 0; m < members.size(); ++m) {
      Tape<Scalar> tape;
      auto out = members[m]->forward(tape, batch.images, Mode::kEval);
      auto logits = out.out.combined->mat();
      for (Index b = 0; b < B; ++b) {
        if (argmax_row(logits.row(b)) == batch.labels[std::size_t(b)]) ++solo_correct[m];
        if (rule == EnsembleRule::kMeanSoftmax) {
          Eigen::Array<Scalar, 1, Eigen::Dynamic> p =
              (logits.row(b).array() - logits.row(b).maxCoeff()).exp();
          combined.row(b) += (p / p.sum()).matrix();
        } else {
          combined.row(b) += logits.row(b);
        }
      }
    }
    for (Index b = 0; b < B; ++b)
      if (argmax_row(combined.row(b)) == batch.labels[std::size_t(b)]) ++ensemble_correct;
  }

  report.count = ds.size();
  report.combined_acc = double(ensemble_correct) / double(ds.size());
  for (std::size_t m = 0; m < members.size(); ++m)
    report.head_acc[m] = double(solo_correct[m]) / double(ds.size());
  return report;
}

// For each head, backward from that head's loss alone and report the L2 norm
// of the pooled-feature gradient per channel block of width n. Blocks at or
// past the head's prefix must come out exactly zero.
template <typename Scalar>
std::vector<std::vector<double>> gradient_mask_report(Model<Scalar>& model,
                                                      const Batch<Scalar>& batch) {
  if (model.config.head != HeadKind::kSSM)
    throw ContractError("gradient_mask_report: requires an SSM head");
  const Index H = model.config.ssm.num_heads;
  const Index n = model.config.ssm.split_width();
  std::vector<std::vector<double>> report;
  for (Index head = 1; head <= H; ++head) {
    Tape<Scalar> tape;
    auto out = model.forward(tape, batch.images, Mode::kTrain);
    auto loss = cross_entropy(tape, out.out.head_logits[head - 1], batch.labels);
    tape.backward(loss);
    out.features->ensure_grad();
    std::vector<double> blocks;
    for (Index k = 0; k < H; ++k) {
      double sq = 0;
      const Index B = out.features->shape[0], C = out.features->shape[1];
      for (Index b = 0; b < B; ++b)
        sq += out.features->grad.segment(b * C + k * n, n).squaredNorm();
      blocks.push_back(std::sqrt(sq));
    }
    report.push_back(std::move(blocks));
  }
  return report;
}

// 8-bit binary PGM (P5), values scaled from [0, 1] to 0-255.
template <typename Scalar>
void write_pgm(const std::string& path, const MatRM<Scalar>& values) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("pgm: cannot write " + path);
  out << "P5\n" << values.cols() << " " << values.rows() << "\n255\n";
  for (Index y = 0; y < values.rows(); ++y)
    for (Index x = 0; x < values.cols(); ++x) {
      Scalar v = std::min(Scalar(1), std::max(Scalar(0), values(y, x)));
      unsigned char b = static_cast<unsigned char>(std::lround(double(v) * 255.0));
      out.write(reinterpret_cast<char*>(&b), 1);
    }
}

}  // namespace ssm
