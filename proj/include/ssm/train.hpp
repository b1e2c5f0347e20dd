#pragma once

#include <functional>
#include <vector>

#include "ssm/data.hpp"
#include "ssm/loss.hpp"
#include "ssm/model.hpp"
#include "ssm/optim.hpp"

namespace ssm {

struct MetricsReport {
  double combined_acc = 0;
  std::vector<double> head_acc;
  double oracle_acc = 0;
  double loss = 0;
  Index count = 0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  MetricsReport eval;
};

// Argmax with ties broken toward the lowest class index.
template <typename Derived>
Index argmax_row(const Eigen::MatrixBase<Derived>& row) {
  Index best = 0;
  for (Index k = 1; k < row.size(); ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

// Single eval-mode pass: top-1 accuracy of the combined output and of each
// head, plus the per-sample oracle (correct if any head or the combined
// output is correct), and the combined cross-entropy.
template <typename Scalar>
MetricsReport evaluate(Model<Scalar>& model, const Dataset<Scalar>& ds, Index batch_size = 256) {
  if (ds.size() == 0) throw ContractError("evaluate: empty dataset");
  MetricsReport report;
  report.head_acc.assign(static_cast<std::size_t>(model.num_heads()), 0.0);
  Index correct = 0, oracle_correct = 0;
  std::vector<Index> head_correct(static_cast<std::size_t>(model.num_heads()), 0);
  double loss_sum = 0;

  SplitMix64 rng(0);
  for (auto& idx : batch_indices(ds.size(), batch_size, false, rng)) {
    auto batch = gather(ds, idx);
    Tape<Scalar> tape;
    auto out = model.forward(tape, batch.images, Mode::kEval);
    const Index B = batch.images->shape[0];
    loss_sum += double(cross_entropy(tape, out.out.combined, batch.labels)->data[0]) * double(B);
    for (Index b = 0; b < B; ++b) {
      int label = batch.labels[static_cast<std::size_t>(b)];
      bool any = false;
      Index pred = argmax_row(out.out.combined->mat().row(b));
      if (pred == label) {
        ++correct;
        any = true;
      }
      for (std::size_t h = 0; h < out.out.head_logits.size(); ++h) {
        if (argmax_row(out.out.head_logits[h]->mat().row(b)) == label) {
          ++head_correct[h];
          any = true;
        }
      }
      if (any) ++oracle_correct;
    }
  }

  report.count = ds.size();
  report.combined_acc = double(correct) / double(report.count);
  report.oracle_acc = double(oracle_correct) / double(report.count);
  for (std::size_t h = 0; h < head_correct.size(); ++h)
    report.head_acc[h] = double(head_correct[h]) / double(report.count);
  report.loss = loss_sum / double(report.count);
  return report;
}

template <typename Scalar>
struct FitOptions {
  TrainConfig train;
  Index augment_pad = 0;
  double augment_flip_prob = 0.0;
  int start_epoch = 0;  // resume point; epochs [start_epoch, train.epochs) run
  std::function<void(const EpochRecord&)> on_epoch;
};

// Seeded epoch loop. Shuffle and augmentation randomness are derived from
// (seed, epoch) alone, so a resumed run draws exactly the same stream as an
// uninterrupted one. Single-threaded; bitwise deterministic for a fixed
// seed.
template <typename Scalar>
std::vector<EpochRecord> fit(Model<Scalar>& model, const Dataset<Scalar>& train_ds,
                             const Dataset<Scalar>& eval_ds, SGDState<Scalar>& opt_state,
                             const FitOptions<Scalar>& options) {
  const TrainConfig& cfg = options.train;
  cfg.validate();
  if (train_ds.size() == 0) throw ContractError("fit: empty dataset");
  auto params = model.trainable_params();

  std::vector<EpochRecord> log;
  for (int epoch = options.start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    SplitMix64 shuffle_rng(mix_seed(cfg.seed, 2 * std::uint64_t(epoch)));
    SplitMix64 augment_rng(mix_seed(cfg.seed, 2 * std::uint64_t(epoch) + 1));

    double loss_sum = 0;
    Index seen = 0;
    for (auto& idx : batch_indices(train_ds.size(), cfg.batch_size, true, shuffle_rng)) {
      if (static_cast<Index>(idx.size()) < 2) continue;  // BN needs batch >= 2
      auto batch = gather(train_ds, idx);
      if (options.augment_pad > 0 || options.augment_flip_prob > 0)
        batch = augment(batch, options.augment_pad, options.augment_flip_prob, augment_rng);
      Tape<Scalar> tape;
      auto out = model.forward(tape, batch.images, Mode::kTrain);
      auto loss = ssm_loss(tape, out.out, batch.labels, cfg.scheme);
      tape.backward(loss);
      sgd_step(params, opt_state, Scalar(lr), Scalar(cfg.momentum), Scalar(cfg.weight_decay));
      loss_sum += double(loss->data[0]) * double(idx.size());
      seen += static_cast<Index>(idx.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = seen > 0 ? loss_sum / double(seen) : 0.0;
    if (eval_ds.size() > 0) rec.eval = evaluate(model, eval_ds, cfg.batch_size);
    log.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
  }
  return log;
}

}  // namespace ssm
