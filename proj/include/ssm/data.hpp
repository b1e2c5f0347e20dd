#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "ssm/rng.hpp"
#include "ssm/tensor.hpp"

namespace ssm {

enum class Split { kTrain, kTest };

template <typename Scalar>
struct Dataset {
  TensorPtr<Scalar> images;  // N x C x H x W
  std::vector<int> labels;
  Index num_classes = 0;
  Split split = Split::kTrain;
  // per-channel normalization stats (size 0 until normalize)
  Vec<Scalar> norm_mean;
  Vec<Scalar> norm_std;

  Index size() const { return images ? images->shape[0] : 0; }
  Index channels() const { return images->shape[1]; }
  Index height() const { return images->shape[2]; }
  Index width() const { return images->shape[3]; }
};

template <typename Scalar>
struct Batch {
  TensorPtr<Scalar> images;  // B x C x H x W
  std::vector<int> labels;
};

// ---- IDX format ------------------------------------------------------------
// Big-endian magic + dims, then raw bytes: 0x00000803 for images (N, H, W),
// 0x00000801 for labels (N).

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw IoError("idx: truncated file " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

inline void write_be32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

// Loads an IDX image/label pair; pixels are scaled to [0, 1].
template <typename Scalar>
Dataset<Scalar> load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot open " + images_path);
  std::uint32_t magic = detail::read_be32(img, images_path);
  if (magic != 0x00000803u)
    throw IoError("idx: bad image magic in " + images_path + " (got " + std::to_string(magic) + ")");
  std::uint32_t n = detail::read_be32(img, images_path);
  std::uint32_t h = detail::read_be32(img, images_path);
  std::uint32_t w = detail::read_be32(img, images_path);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("idx: cannot open " + labels_path);
  std::uint32_t lmagic = detail::read_be32(lab, labels_path);
  if (lmagic != 0x00000801u)
    throw IoError("idx: bad label magic in " + labels_path + " (got " + std::to_string(lmagic) + ")");
  std::uint32_t ln = detail::read_be32(lab, labels_path);
  if (ln != n)
    throw IoError("idx: image count " + std::to_string(n) + " != label count " +
                  std::to_string(ln));

  Dataset<Scalar> ds;
  ds.images = make_tensor<Scalar>({Index(n), 1, Index(h), Index(w)});
  std::vector<unsigned char> buf(std::size_t(n) * h * w);
  if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw IoError("idx: truncated pixel data in " + images_path);
  for (std::size_t i = 0; i < buf.size(); ++i)
    ds.images->data[static_cast<Index>(i)] = Scalar(buf[i]) / Scalar(255);

  std::vector<unsigned char> lbuf(n);
  if (!lab.read(reinterpret_cast<char*>(lbuf.data()), static_cast<std::streamsize>(lbuf.size())))
    throw IoError("idx: truncated label data in " + labels_path);
  ds.labels.assign(lbuf.begin(), lbuf.end());
  int max_label = 0;
  for (int l : ds.labels) max_label = std::max(max_label, l);
  ds.num_classes = max_label + 1;
  return ds;
}

// Writes pixels (expected in [0, 1]) and labels back to the IDX pair.
template <typename Scalar>
void write_idx(const Dataset<Scalar>& ds, const std::string& images_path,
               const std::string& labels_path) {
  if (ds.channels() != 1) throw IoError("idx: only single-channel datasets can be written");
  std::ofstream img(images_path, std::ios::binary);
  if (!img) throw IoError("idx: cannot write " + images_path);
  detail::write_be32(img, 0x00000803u);
  detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.height()));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.width()));
  for (Index i = 0; i < ds.images->numel(); ++i) {
    Scalar v = std::min(Scalar(1), std::max(Scalar(0), ds.images->data[i]));
    unsigned char b = static_cast<unsigned char>(std::lround(double(v) * 255.0));
    img.write(reinterpret_cast<char*>(&b), 1);
  }
  std::ofstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("idx: cannot write " + labels_path);
  detail::write_be32(lab, 0x00000801u);
  detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) {
    unsigned char b = static_cast<unsigned char>(l);
    lab.write(reinterpret_cast<char*>(&b), 1);
  }
}

// ---- synthetic data --------------------------------------------------------

// Each class is a Gaussian intensity blob at a class-specific location with a
// class-specific peak; linearly separable after pooling.
template <typename Scalar>
Dataset<Scalar> synthetic_gaussians(Index num_classes, Index samples_per_class, Index image_size,
                                    std::uint64_t seed) {
  if (num_classes < 1 || samples_per_class < 1 || image_size < 2)
    throw ConfigError("synthetic_gaussians: sizes must be positive");
  SplitMix64 rng(seed);
  const Index n = num_classes * samples_per_class;
  Dataset<Scalar> ds;
  ds.images = make_tensor<Scalar>({n, 1, image_size, image_size});
  ds.labels.resize(n);
  ds.num_classes = num_classes;
  const Scalar sigma = Scalar(image_size) / Scalar(6);
  Index idx = 0;
  for (Index c = 0; c < num_classes; ++c) {
    // class centers spread around a circle
    double angle = 2.0 * 3.14159265358979323846 * double(c) / double(num_classes);
    double cy = image_size / 2.0 + 0.25 * image_size * std::sin(angle);
    double cx = image_size / 2.0 + 0.25 * image_size * std::cos(angle);
    Scalar peak = Scalar(0.5) + Scalar(0.5) * Scalar(c + 1) / Scalar(num_classes);
    for (Index s = 0; s < samples_per_class; ++s, ++idx) {
      ds.labels[idx] = static_cast<int>(c);
      double jy = cy + rng.normal() * 0.5;
      double jx = cx + rng.normal() * 0.5;
      Scalar* img = ds.images->data.data() + idx * image_size * image_size;
      for (Index y = 0; y < image_size; ++y)
        for (Index x = 0; x < image_size; ++x) {
          double d2 = (y - jy) * (y - jy) + (x - jx) * (x - jx);
          double v = double(peak) * std::exp(-d2 / (2.0 * double(sigma) * double(sigma)));
          v += rng.normal() * 0.02;
          img[y * image_size + x] = Scalar(std::min(1.0, std::max(0.0, v)));
        }
    }
  }
  return ds;
}

// ---- augmentation ----------------------------------------------------------

// Pad-then-random-crop back to the original size plus optional horizontal
// flip; per-image independent decisions drawn from `rng`.
template <typename Scalar>
Batch<Scalar> augment(const Batch<Scalar>& batch, Index pad, double flip_prob, SplitMix64& rng) {
  if (pad < 0) throw ConfigError("augment: pad must be >= 0");
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("augment: flip_prob must be in [0, 1]");
  const Index B = batch.images->shape[0], C = batch.images->shape[1];
  const Index H = batch.images->shape[2], W = batch.images->shape[3];
  Batch<Scalar> out;
  out.labels = batch.labels;
  out.images = make_tensor<Scalar>(batch.images->shape);
  for (Index b = 0; b < B; ++b) {
    Index oy = pad > 0 ? static_cast<Index>(rng.uniform_below(2 * pad + 1)) : 0;
    Index ox = pad > 0 ? static_cast<Index>(rng.uniform_below(2 * pad + 1)) : 0;
    bool flip = flip_prob > 0 && rng.uniform() < flip_prob;
    for (Index c = 0; c < C; ++c) {
      const Scalar* src = batch.images->data.data() + (b * C + c) * H * W;
      Scalar* dst = out.images->data.data() + (b * C + c) * H * W;
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          // position in the padded image, mapped back to source coordinates
          Index sy = y + oy - pad;
          Index sx = x + ox - pad;
          Scalar v = (sy >= 0 && sy < H && sx >= 0 && sx < W) ? src[sy * W + sx] : Scalar(0);
          dst[y * W + (flip ? W - 1 - x : x)] = v;
        }
    }
  }
  return out;
}

// ---- normalization ---------------------------------------------------------

template <typename Scalar>
struct NormStats {
  Vec<Scalar> mean;  // per channel
  Vec<Scalar> std_dev;
};

// Stats over all pixels of the (train) dataset, per channel.
template <typename Scalar>
NormStats<Scalar> compute_norm_stats(const Dataset<Scalar>& ds) {
  const Index C = ds.channels(), N = ds.size(), HW = ds.height() * ds.width();
  NormStats<Scalar> stats;
  stats.mean = Vec<Scalar>::Zero(C);
  stats.std_dev = Vec<Scalar>::Zero(C);
  for (Index i = 0; i < N; ++i)
    for (Index c = 0; c < C; ++c)
      stats.mean[c] += ds.images->data.segment((i * C + c) * HW, HW).sum();
  stats.mean /= Scalar(N * HW);
  for (Index i = 0; i < N; ++i)
    for (Index c = 0; c < C; ++c)
      stats.std_dev[c] +=
          (ds.images->data.segment((i * C + c) * HW, HW).array() - stats.mean[c]).square().sum();
  stats.std_dev = (stats.std_dev / Scalar(N * HW)).cwiseSqrt();
  for (Index c = 0; c < C; ++c)
    if (stats.std_dev[c] <= Scalar(0))
      throw DomainError("normalize: channel " + std::to_string(c) + " has zero variance");
  return stats;
}

// Applies previously computed stats in place (used verbatim for the test
// split; never recomputed there).
template <typename Scalar>
void apply_norm_stats(Dataset<Scalar>& ds, const NormStats<Scalar>& stats) {
  const Index C = ds.channels(), N = ds.size(), HW = ds.height() * ds.width();
  for (Index i = 0; i < N; ++i)
    for (Index c = 0; c < C; ++c) {
      auto seg = ds.images->data.segment((i * C + c) * HW, HW);
      seg = (seg.array() - stats.mean[c]) / stats.std_dev[c];
    }
  ds.norm_mean = stats.mean;
  ds.norm_std = stats.std_dev;
}

template <typename Scalar>
NormStats<Scalar> normalize(Dataset<Scalar>& ds) {
  auto stats = compute_norm_stats(ds);
  apply_norm_stats(ds, stats);
  return stats;
}

// ---- batching --------------------------------------------------------------

inline std::vector<std::vector<Index>> batch_indices(Index n, Index batch_size, bool shuffle,
                                                     SplitMix64& rng) {
  if (batch_size < 1) throw ConfigError("batches: batch_size must be >= 1");
  std::vector<Index> order(n);
  for (Index i = 0; i < n; ++i) order[i] = i;
  if (shuffle) ssm::shuffle(order, rng);
  std::vector<std::vector<Index>> out;
  for (Index start = 0; start < n; start += batch_size) {
    Index end = std::min(n, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

template <typename Scalar>
Batch<Scalar> gather(const Dataset<Scalar>& ds, const std::vector<Index>& indices) {
  const Index C = ds.channels(), HW = ds.height() * ds.width();
  Batch<Scalar> batch;
  batch.images = make_tensor<Scalar>({Index(indices.size()), C, ds.height(), ds.width()});
  batch.labels.reserve(indices.size());
  Index row = 0;
  for (Index idx : indices) {
    batch.images->data.segment(row * C * HW, C * HW) = ds.images->data.segment(idx * C * HW, C * HW);
    batch.labels.push_back(ds.labels[static_cast<std::size_t>(idx)]);
    ++row;
  }
  return batch;
}

// Seeded epoch partition: every sample exactly once, deterministic order.
template <typename Scalar>
std::vector<Batch<Scalar>> batches(const Dataset<Scalar>& ds, Index batch_size, bool shuffle,
                                   std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<Batch<Scalar>> out;
  for (auto& idx : batch_indices(ds.size(), batch_size, shuffle, rng))
    out.push_back(gather(ds, idx));
  return out;
}

}  // namespace ssm
