#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ssm/rng.hpp"
#include "ssm/tensor.hpp"

namespace ssm {

enum class Mode { kTrain, kEval };

// He-normal initialization: zero-mean normal with std sqrt(2 / fan_in).
template <typename Scalar>
TensorPtr<Scalar> he_init(Shape shape, Index fan_in, SplitMix64& rng) {
  if (fan_in <= 0) throw ConfigError("he_init: fan_in must be positive");
  auto t = make_tensor<Scalar>(std::move(shape), true);
  Scalar std_dev = std::sqrt(Scalar(2) / Scalar(fan_in));
  for (Index i = 0; i < t->numel(); ++i) t->data[i] = Scalar(rng.normal()) * std_dev;
  return t;
}

// ---- linear ----------------------------------------------------------------

template <typename Scalar>
struct LinearLayer {
  TensorPtr<Scalar> weight;  // out x in
  TensorPtr<Scalar> bias;    // out

  LinearLayer() = default;
  LinearLayer(Index in, Index out)
      : weight(make_tensor<Scalar>({out, in}, true)), bias(make_tensor<Scalar>({out}, true)) {}

  Index in_features() const { return weight->shape[1]; }
  Index out_features() const { return weight->shape[0]; }

  void init(SplitMix64& rng) { weight = he_init<Scalar>({out_features(), in_features()}, in_features(), rng); }
  std::vector<TensorPtr<Scalar>> params() const { return {weight, bias}; }
};

// y = x W^T + b
template <typename Scalar>
TensorPtr<Scalar> linear_forward(Tape<Scalar>& tape, const LinearLayer<Scalar>& layer,
                                 TensorPtr<Scalar> x) {
  if (x->ndim() != 2 || x->shape[1] != layer.in_features())
    throw ShapeError("linear: input " + shape_str(x->shape) + " does not match weight " +
                     shape_str(layer.weight->shape));
  auto w = layer.weight;
  auto b = layer.bias;
  auto out = make_tensor<Scalar>({x->shape[0], layer.out_features()},
                                 x->requires_grad || w->requires_grad || b->requires_grad);
  out->mat().noalias() = x->mat() * w->mat().transpose();
  out->mat().rowwise() += b->data.transpose();
  tape.record(out, [x, w, b, out] {
    if (x->requires_grad) {
      x->ensure_grad();
      x->grad_mat().noalias() += out->grad_mat() * w->mat();
    }
    if (w->requires_grad) {
      w->ensure_grad();
      w->grad_mat().noalias() += out->grad_mat().transpose() * x->mat();
    }
    if (b->requires_grad) {
      b->ensure_grad();
      b->grad += out->grad_mat().colwise().sum().transpose();
    }
  });
  return out;
}

// ---- batch normalization ---------------------------------------------------

template <typename Scalar>
struct BatchNormLayer {
  TensorPtr<Scalar> gamma;
  TensorPtr<Scalar> beta;
  TensorPtr<Scalar> running_mean;  // buffers, not trainable
  TensorPtr<Scalar> running_var;
  Scalar eps = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);
  Mode mode = Mode::kTrain;

  BatchNormLayer() = default;
  explicit BatchNormLayer(Index channels)
      : gamma(make_tensor<Scalar>({channels}, true)),
        beta(make_tensor<Scalar>({channels}, true)),
        running_mean(make_tensor<Scalar>({channels})),
        running_var(make_tensor<Scalar>({channels})) {
    gamma->data.setOnes();
    running_var->data.setOnes();
  }

  Index channels() const { return gamma->numel(); }
  std::vector<TensorPtr<Scalar>> params() const { return {gamma, beta}; }
};

namespace detail {

// Per-channel normalization over `groups` contiguous runs of `run` elements
// per channel; covers both B x C (run = 1, per-column) and B x C x H x W
// (run = H*W) layouts. In train mode uses batch statistics (biased variance)
// and updates the running stats (unbiased variance); in eval mode applies
// the running-stat affine map.
template <typename Scalar>
TensorPtr<Scalar> batchnorm_impl(Tape<Scalar>& tape, BatchNormLayer<Scalar>& layer,
                                 TensorPtr<Scalar> x, Index batch, Index channels, Index run) {
  if (channels != layer.channels())
    throw ShapeError("batchnorm: " + std::to_string(channels) + " channels vs layer " +
                     std::to_string(layer.channels()));
  const Index m = batch * run;  // samples per channel
  auto gamma = layer.gamma;
  auto beta = layer.beta;
  auto out = make_tensor<Scalar>(x->shape, x->requires_grad || gamma->requires_grad ||
                                               beta->requires_grad);

  auto channel_seg = [run, channels](Vec<Scalar>& v, Index b, Index c) {
    return v.segment(b * channels * run + c * run, run);
  };

  if (layer.mode == Mode::kTrain) {
    if (batch < 2) throw ShapeError("batchnorm: train mode needs batch size >= 2, got " +
                                    std::to_string(batch));
    Vec<Scalar> mean = Vec<Scalar>::Zero(channels);
    Vec<Scalar> var = Vec<Scalar>::Zero(channels);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c) mean[c] += channel_seg(x->data, b, c).sum();
    mean /= Scalar(m);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c)
        var[c] += (channel_seg(x->data, b, c).array() - mean[c]).square().sum();
    Vec<Scalar> var_biased = var / Scalar(m);
    Vec<Scalar> inv_std = (var_biased.array() + layer.eps).rsqrt();

    auto xhat = std::make_shared<Vec<Scalar>>(x->numel());
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c) {
        channel_seg(*xhat, b, c) = (channel_seg(x->data, b, c).array() - mean[c]) * inv_std[c];
        channel_seg(out->data, b, c) =
            channel_seg(*xhat, b, c) * gamma->data[c] + Vec<Scalar>::Constant(run, beta->data[c]);
      }

    // running <- (1 - momentum) * running + momentum * batch, unbiased var
    Vec<Scalar> var_unbiased = var / Scalar(m - 1);
    layer.running_mean->data =
        (Scalar(1) - layer.momentum) * layer.running_mean->data + layer.momentum * mean;
    layer.running_var->data =
        (Scalar(1) - layer.momentum) * layer.running_var->data + layer.momentum * var_unbiased;

    auto inv_std_saved = std::make_shared<Vec<Scalar>>(std::move(inv_std));
    tape.record(out, [x, gamma, beta, out, xhat, inv_std_saved, batch, channels, run, m,
                      channel_seg] {
      // per-channel sums of dy and dy*xhat
      Vec<Scalar> sum_dy = Vec<Scalar>::Zero(channels);
      Vec<Scalar> sum_dy_xhat = Vec<Scalar>::Zero(channels);
      for (Index b = 0; b < batch; ++b)
        for (Index c = 0; c < channels; ++c) {
          sum_dy[c] += channel_seg(out->grad, b, c).sum();
          sum_dy_xhat[c] +=
              channel_seg(out->grad, b, c).cwiseProduct(channel_seg(*xhat, b, c)).sum();
        }
      if (gamma->requires_grad) {
        gamma->ensure_grad();
        gamma->grad += sum_dy_xhat;
      }
      if (beta->requires_grad) {
        beta->ensure_grad();
        beta->grad += sum_dy;
      }
      if (x->requires_grad) {
        x->ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < channels; ++c) {
            auto dy = channel_seg(out->grad, b, c);
            channel_seg(x->grad, b, c) +=
                (gamma->data[c] * (*inv_std_saved)[c] / Scalar(m)) *
                (Scalar(m) * dy.array() - sum_dy[c] -
                 channel_seg(*xhat, b, c).array() * sum_dy_xhat[c])
                    .matrix();
          }
      }
    });
  } else {
    // eval: deterministic per-channel affine map from running stats
    Vec<Scalar> inv_std = (layer.running_var->data.array() + layer.eps).rsqrt();
    Vec<Scalar> scale_c = gamma->data.cwiseProduct(inv_std);
    Vec<Scalar> shift_c = beta->data - layer.running_mean->data.cwiseProduct(scale_c);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c)
        channel_seg(out->data, b, c) =
            channel_seg(x->data, b, c) * scale_c[c] + Vec<Scalar>::Constant(run, shift_c[c]);

    auto scale_saved = std::make_shared<Vec<Scalar>>(std::move(scale_c));
    auto inv_std_saved = std::make_shared<Vec<Scalar>>(std::move(inv_std));
    auto rm = layer.running_mean;
    tape.record(out, [x, gamma, beta, out, scale_saved, inv_std_saved, rm, batch, channels, run,
                      channel_seg] {
      if (x->requires_grad) {
        x->ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < channels; ++c)
            channel_seg(x->grad, b, c) += channel_seg(out->grad, b, c) * (*scale_saved)[c];
      }
      if (gamma->requires_grad) {
        gamma->ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < channels; ++c)
            gamma->grad[c] += (channel_seg(out->grad, b, c).array() *
                               (channel_seg(x->data, b, c).array() - rm->data[c]) *
                               (*inv_std_saved)[c])
                                  .sum();
      }
      if (beta->requires_grad) {
        beta->ensure_grad();
        for (Index b = 0; b < batch; ++b)
          for (Index c = 0; c < channels; ++c) beta->grad[c] += channel_seg(out->grad, b, c).sum();
      }
    });
  }
  return out;
}

}  // namespace detail

// B x C features.
template <typename Scalar>
TensorPtr<Scalar> batchnorm_forward(Tape<Scalar>& tape, BatchNormLayer<Scalar>& layer,
                                    TensorPtr<Scalar> x) {
  if (x->ndim() != 2) throw ShapeError("batchnorm: need B x C input, got " + shape_str(x->shape));
  return detail::batchnorm_impl(tape, layer, x, x->shape[0], x->shape[1], 1);
}

// B x C x H x W feature maps, normalized per channel over batch and space.
template <typename Scalar>
TensorPtr<Scalar> batchnorm2d_forward(Tape<Scalar>& tape, BatchNormLayer<Scalar>& layer,
                                      TensorPtr<Scalar> x) {
  if (x->ndim() != 4)
    throw ShapeError("batchnorm2d: need B x C x H x W input, got " + shape_str(x->shape));
  return detail::batchnorm_impl(tape, layer, x, x->shape[0], x->shape[1],
                                x->shape[2] * x->shape[3]);
}

// ---- convolution -----------------------------------------------------------

template <typename Scalar>
struct Conv2dLayer {
  TensorPtr<Scalar> weight;  // outC x inC x kH x kW
  TensorPtr<Scalar> bias;    // outC
  Index stride = 1;
  Index padding = 0;

  Conv2dLayer() = default;
  Conv2dLayer(Index in_c, Index out_c, Index k, Index stride_ = 1, Index padding_ = 0)
      : weight(make_tensor<Scalar>({out_c, in_c, k, k}, true)),
        bias(make_tensor<Scalar>({out_c}, true)),
        stride(stride_),
        padding(padding_) {}

  Index out_channels() const { return weight->shape[0]; }
  Index in_channels() const { return weight->shape[1]; }
  Index kernel_h() const { return weight->shape[2]; }
  Index kernel_w() const { return weight->shape[3]; }

  void init(SplitMix64& rng) {
    Index fan_in = in_channels() * kernel_h() * kernel_w();
    weight = he_init<Scalar>({out_channels(), in_channels(), kernel_h(), kernel_w()}, fan_in, rng);
  }
  std::vector<TensorPtr<Scalar>> params() const { return {weight, bias}; }
};

namespace detail {

// im2col for one image: (C*kH*kW) x (outH*outW), column-major over output
// positions.
template <typename Scalar>
void im2col(const Scalar* img, Index C, Index H, Index W, Index kH, Index kW, Index stride,
            Index pad, Index out_h, Index out_w, MatRM<Scalar>& col) {
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < kH; ++ky)
      for (Index kx = 0; kx < kW; ++kx) {
        Index row = (c * kH + ky) * kW + kx;
        for (Index oy = 0; oy < out_h; ++oy) {
          Index iy = oy * stride + ky - pad;
          for (Index ox = 0; ox < out_w; ++ox) {
            Index ix = ox * stride + kx - pad;
            col(row, oy * out_w + ox) =
                (iy >= 0 && iy < H && ix >= 0 && ix < W) ? img[(c * H + iy) * W + ix] : Scalar(0);
          }
        }
      }
}

template <typename Scalar>
void col2im_add(const MatRM<Scalar>& col, Index C, Index H, Index W, Index kH, Index kW,
                Index stride, Index pad, Index out_h, Index out_w, Scalar* img_grad) {
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < kH; ++ky)
      for (Index kx = 0; kx < kW; ++kx) {
        Index row = (c * kH + ky) * kW + kx;
        for (Index oy = 0; oy < out_h; ++oy) {
          Index iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= H) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            Index ix = ox * stride + kx - pad;
            if (ix < 0 || ix >= W) continue;
            img_grad[(c * H + iy) * W + ix] += col(row, oy * out_w + ox);
          }
        }
      }
}

}  // namespace detail

// Cross-correlation with stride and zero padding, im2col + GEMM.
template <typename Scalar>
TensorPtr<Scalar> conv2d_forward(Tape<Scalar>& tape, const Conv2dLayer<Scalar>& layer,
                                 TensorPtr<Scalar> x) {
  if (x->ndim() != 4) throw ShapeError("conv2d: need B x C x H x W input, got " + shape_str(x->shape));
  const Index B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (C != layer.in_channels())
    throw ShapeError("conv2d: input channels " + std::to_string(C) + " vs weight " +
                     std::to_string(layer.in_channels()));
  const Index kH = layer.kernel_h(), kW = layer.kernel_w();
  const Index out_h = (H + 2 * layer.padding - kH) / layer.stride + 1;
  const Index out_w = (W + 2 * layer.padding - kW) / layer.stride + 1;
  if (out_h < 1 || out_w < 1)
    throw ShapeError("conv2d: non-positive output size for input " + shape_str(x->shape));

  auto w = layer.weight;
  auto b = layer.bias;
  const Index out_c = layer.out_channels();
  auto out = make_tensor<Scalar>({B, out_c, out_h, out_w},
                                 x->requires_grad || w->requires_grad || b->requires_grad);

  Eigen::Map<const MatRM<Scalar>> w_mat(w->data.data(), out_c, C * kH * kW);
  MatRM<Scalar> col(C * kH * kW, out_h * out_w);
  for (Index bi = 0; bi < B; ++bi) {
    detail::im2col(x->data.data() + bi * C * H * W, C, H, W, kH, kW, layer.stride, layer.padding,
                   out_h, out_w, col);
    Eigen::Map<MatRM<Scalar>> out_mat(out->data.data() + bi * out_c * out_h * out_w, out_c,
                                      out_h * out_w);
    out_mat.noalias() = w_mat * col;
    out_mat.colwise() += b->data;
  }

  Index stride = layer.stride, pad = layer.padding;
  tape.record(out, [x, w, b, out, B, C, H, W, kH, kW, stride, pad, out_h, out_w, out_c] {
    MatRM<Scalar> col(C * kH * kW, out_h * out_w);
    Eigen::Map<const MatRM<Scalar>> w_mat(w->data.data(), out_c, C * kH * kW);
    if (x->requires_grad) x->ensure_grad();
    if (w->requires_grad) w->ensure_grad();
    if (b->requires_grad) b->ensure_grad();
    Eigen::Map<MatRM<Scalar>> w_grad(w->grad.size() ? w->grad.data() : nullptr, out_c, C * kH * kW);
    for (Index bi = 0; bi < B; ++bi) {
      Eigen::Map<const MatRM<Scalar>> dy(out->grad.data() + bi * out_c * out_h * out_w, out_c,
                                         out_h * out_w);
      if (w->requires_grad || b->requires_grad)
        detail::im2col(x->data.data() + bi * C * H * W, C, H, W, kH, kW, stride, pad, out_h, out_w,
                       col);
      if (w->requires_grad) w_grad.noalias() += dy * col.transpose();
      if (b->requires_grad) b->grad += dy.rowwise().sum();
      if (x->requires_grad) {
        MatRM<Scalar> dcol = w_mat.transpose() * dy;
        detail::col2im_add(dcol, C, H, W, kH, kW, stride, pad, out_h, out_w,
                           x->grad.data() + bi * C * H * W);
      }
    }
  });
  return out;
}

// ---- pooling ---------------------------------------------------------------

// 2x2 max pooling, stride 2; ties break toward the first element scanned
// (row-major), keeping backward deterministic.
template <typename Scalar>
TensorPtr<Scalar> max_pool2(Tape<Scalar>& tape, TensorPtr<Scalar> x) {
  if (x->ndim() != 4) throw ShapeError("max_pool2: need B x C x H x W input, got " + shape_str(x->shape));
  const Index B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (H < 2 || W < 2) throw ShapeError("max_pool2: spatial dims must be >= 2");
  const Index out_h = H / 2, out_w = W / 2;
  auto out = make_tensor<Scalar>({B, C, out_h, out_w}, x->requires_grad);
  auto argmax = std::make_shared<std::vector<Index>>(out->numel());

  Index o = 0;
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      const Scalar* plane = x->data.data() + (b * C + c) * H * W;
      for (Index oy = 0; oy < out_h; ++oy)
        for (Index ox = 0; ox < out_w; ++ox, ++o) {
          Index base = (b * C + c) * H * W;
          Index best = (2 * oy) * W + 2 * ox;
          Scalar best_v = plane[best];
          for (Index dy = 0; dy < 2; ++dy)
            for (Index dx = 0; dx < 2; ++dx) {
              Index idx = (2 * oy + dy) * W + (2 * ox + dx);
              if (plane[idx] > best_v) {
                best_v = plane[idx];
                best = idx;
              }
            }
          out->data[o] = best_v;
          (*argmax)[o] = base + best;
        }
    }

  tape.record(out, [x, out, argmax] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (Index i = 0; i < out->numel(); ++i) x->grad[(*argmax)[i]] += out->grad[i];
  });
  return out;
}

// Per-channel spatial mean: B x C x H x W -> B x C. Channel identity is
// preserved, so pooled channel c traces back to conv channel c.
template <typename Scalar>
TensorPtr<Scalar> global_avg_pool(Tape<Scalar>& tape, TensorPtr<Scalar> x) {
  if (x->ndim() != 4) throw ShapeError("global_avg_pool: need B x C x H x W input, got " + shape_str(x->shape));
  const Index B = x->shape[0], C = x->shape[1], HW = x->shape[2] * x->shape[3];
  auto out = make_tensor<Scalar>({B, C}, x->requires_grad);
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      out->data[b * C + c] = x->data.segment((b * C + c) * HW, HW).sum() / Scalar(HW);
  tape.record(out, [x, out, B, C, HW] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < C; ++c)
        x->grad.segment((b * C + c) * HW, HW).array() += out->grad[b * C + c] / Scalar(HW);
  });
  return out;
}

}  // namespace ssm
