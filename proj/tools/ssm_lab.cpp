// ssm_lab: train/eval/analyze SSM-headed classifiers from the command line.
//
// Exit codes: 0 success, 1 internal/check failure, 2 configuration error,
// 3 dataset error, 4 IO error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ssm/analysis.hpp"
#include "ssm/checkpoint.hpp"
#include "ssm/config.hpp"
#include "ssm/gradcheck.hpp"
#include "ssm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Args {
  std::string config_path;
  std::vector<std::string> checkpoints;
  std::string out_dir;
  std::optional<std::int64_t> seed;
  std::optional<int> precision;
  std::optional<int> head;
  int image_index = 0;
  std::optional<int> target_class;
  std::string rule = "mean_softmax";
};

// Thrown around dataset construction so main can map it to exit 3.
struct DatasetError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void apply_overrides(ssm::RunConfig& cfg, const Args& args) {
  if (args.seed) cfg.train.seed = static_cast<std::uint64_t>(*args.seed);
  if (args.precision) cfg.precision = *args.precision;
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  cfg.validate();
}

template <typename S>
struct DataBundle {
  ssm::Dataset<S> train, test;
};

// Loads (or synthesizes) both splits and normalizes the test split with the
// train statistics. Any failure here is a dataset error (exit 3).
template <typename S>
DataBundle<S> load_datasets(const ssm::RunConfig& cfg, bool normalized = true) {
  try {
    DataBundle<S> data;
    if (cfg.source == ssm::DataSource::kIdx) {
      data.train = ssm::load_idx<S>(cfg.train_images, cfg.train_labels);
      if (!cfg.test_images.empty())
        data.test = ssm::load_idx<S>(cfg.test_images, cfg.test_labels);
    } else {
      data.train = ssm::synthetic_gaussians<S>(cfg.synthetic_classes, cfg.synthetic_per_class,
                                               cfg.synthetic_image,
                                               ssm::mix_seed(cfg.train.seed, 1000001));
      data.test = ssm::synthetic_gaussians<S>(cfg.synthetic_classes,
                                              std::max<ssm::Index>(cfg.synthetic_per_class / 4, 2),
                                              cfg.synthetic_image,
                                              ssm::mix_seed(cfg.train.seed, 1000002));
    }
    data.train.num_classes = std::max(data.train.num_classes, cfg.model.num_classes);
    data.test.num_classes = data.train.num_classes;
    if (normalized && cfg.normalize_data) {
      auto stats = ssm::normalize(data.train);
      if (data.test.size() > 0) ssm::apply_norm_stats(data.test, stats);
    }
    return data;
  } catch (const ssm::ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw DatasetError(e.what());
  }
}

void write_json_line(std::ofstream& out, const json& record) {
  out << record.dump() << "\n";
  out.flush();
}

json report_to_json(const ssm::MetricsReport& r) {
  json j;
  j["combined_acc"] = r.combined_acc;
  j["head_acc"] = r.head_acc;
  j["oracle_acc"] = r.oracle_acc;
  j["loss"] = r.loss;
  j["count"] = r.count;
  return j;
}

void print_report(const ssm::MetricsReport& r) {
  std::cout << "samples:      " << r.count << "\n";
  std::cout << "combined acc: " << r.combined_acc << "\n";
  for (std::size_t h = 0; h < r.head_acc.size(); ++h)
    std::cout << "head " << (h + 1) << " acc:   " << r.head_acc[h] << "\n";
  std::cout << "oracle acc:   " << r.oracle_acc << "\n";
  std::cout << "loss:         " << r.loss << "\n";
}

// ---- train -----------------------------------------------------------------

template <typename S>
int run_train(const ssm::RunConfig& cfg, const std::string& resume_path) {
  auto data = load_datasets<S>(cfg);

  ssm::Model<S> model(cfg.model);
  ssm::SGDState<S> opt;
  int start_epoch = 0;
  if (!resume_path.empty()) {
    auto ckpt = ssm::load_checkpoint<S>(resume_path);
    model = std::move(ckpt.model);
    opt = std::move(ckpt.opt);
    start_epoch = ckpt.epoch;
  } else {
    ssm::SplitMix64 rng(cfg.train.seed);
    model.init(rng);
  }

  fs::create_directories(cfg.out_dir);
  auto mode = resume_path.empty() ? std::ios::trunc : std::ios::app;
  std::ofstream metrics(fs::path(cfg.out_dir) / "metrics.jsonl", mode);
  if (!metrics) throw ssm::IoError("train: cannot write metrics in " + cfg.out_dir);

  double best_acc = -1.0;
  ssm::FitOptions<S> options;
  options.train = cfg.train;
  options.augment_pad = cfg.augment_pad;
  options.augment_flip_prob = cfg.augment_flip_prob;
  options.start_epoch = start_epoch;
  options.on_epoch = [&](const ssm::EpochRecord& rec) {
    json j;
    j["epoch"] = rec.epoch;
    j["lr"] = rec.lr;
    j["train_loss"] = rec.train_loss;
    if (rec.eval.count > 0) j["eval"] = report_to_json(rec.eval);
    write_json_line(metrics, j);
    std::cout << "epoch " << rec.epoch << "  lr " << rec.lr << "  train_loss " << rec.train_loss;
    if (rec.eval.count > 0) std::cout << "  test_acc " << rec.eval.combined_acc;
    std::cout << "\n";
    double score = rec.eval.count > 0 ? rec.eval.combined_acc : -rec.train_loss;
    if (score > best_acc) {
      best_acc = score;
      ssm::save_checkpoint(std::string(fs::path(cfg.out_dir) / "best.ckpt"), model, opt, cfg,
                           rec.epoch + 1);
    }
  };

  fit(model, data.train, data.test, opt, options);
  ssm::save_checkpoint(std::string(fs::path(cfg.out_dir) / "final.ckpt"), model, opt, cfg,
                       cfg.train.epochs);
  return 0;
}

// ---- eval ------------------------------------------------------------------

template <typename S>
int run_eval(const ssm::RunConfig& cfg, const std::string& ckpt_path) {
  auto ckpt = ssm::load_checkpoint<S>(ckpt_path);
  auto data = load_datasets<S>(cfg);
  auto& ds = data.test.size() > 0 ? data.test : data.train;
  auto report = ssm::evaluate(ckpt.model, ds, cfg.train.batch_size);
  print_report(report);
  fs::create_directories(cfg.out_dir);
  std::ofstream out(fs::path(cfg.out_dir) / "eval.jsonl");
  if (!out) throw ssm::IoError("eval: cannot write report in " + cfg.out_dir);
  write_json_line(out, report_to_json(report));
  return 0;
}

// ---- gradcam ---------------------------------------------------------------

template <typename S>
int run_gradcam(const ssm::RunConfig& cfg, const std::string& ckpt_path, const Args& args) {
  auto ckpt = ssm::load_checkpoint<S>(ckpt_path);
  auto raw = load_datasets<S>(cfg, false);       // unnormalized pixels for input.pgm
  auto data = load_datasets<S>(cfg);
  auto& ds = data.test.size() > 0 ? data.test : data.train;
  auto& raw_ds = raw.test.size() > 0 ? raw.test : raw.train;

  const ssm::Index idx = args.image_index;
  if (idx < 0 || idx >= ds.size())
    throw ssm::ConfigError("--image: index " + std::to_string(idx) + " outside [0, " +
                           std::to_string(ds.size()) + ")");
  auto batch = ssm::gather(ds, {idx});
  int target = args.target_class ? *args.target_class : ds.labels[std::size_t(idx)];
  if (target < 0 || target >= cfg.model.num_classes)
    throw ssm::ConfigError("--class: " + std::to_string(target) + " outside [0, " +
                           std::to_string(cfg.model.num_classes) + ")");

  const ssm::Index H = ckpt.model.config.ssm.num_heads;
  std::vector<ssm::Index> heads;
  if (args.head) {
    if (*args.head < 1 || *args.head > H)
      throw ssm::ConfigError("--head: " + std::to_string(*args.head) + " outside [1, " +
                             std::to_string(H) + "]");
    heads.push_back(*args.head);
  } else {
    for (ssm::Index h = 1; h <= H; ++h) heads.push_back(h);
  }

  fs::create_directories(cfg.out_dir);
  auto raw_image = ssm::gather(raw_ds, {idx});
  ssm::MatRM<S> pixels(ds.height(), ds.width());
  for (ssm::Index y = 0; y < ds.height(); ++y)
    for (ssm::Index x = 0; x < ds.width(); ++x)
      pixels(y, x) = raw_image.images->data[y * ds.width() + x];
  ssm::write_pgm(std::string(fs::path(cfg.out_dir) / "input.pgm"), pixels);

  for (ssm::Index h : heads) {
    auto map = ssm::grad_cam_split(ckpt.model, batch.images, target, h);
    std::string name = "gradcam_head" + std::to_string(h) + ".pgm";
    ssm::write_pgm(std::string(fs::path(cfg.out_dir) / name), map.values);
    std::cout << name << "  channels [" << map.channel_lo << ", " << map.channel_hi << ")\n";
  }
  return 0;
}

// ---- ensemble --------------------------------------------------------------

template <typename S>
int run_ensemble(const ssm::RunConfig& cfg, const Args& args) {
  ssm::EnsembleRule rule;
  if (args.rule == "mean_softmax")
    rule = ssm::EnsembleRule::kMeanSoftmax;
  else if (args.rule == "mean_logits")
    rule = ssm::EnsembleRule::kMeanLogits;
  else
    throw ssm::ConfigError("--rule: expected mean_softmax or mean_logits, got '" + args.rule + "'");

  std::vector<ssm::LoadedCheckpoint<S>> loaded;
  std::vector<ssm::Model<S>*> members;
  for (auto& path : args.checkpoints) loaded.push_back(ssm::load_checkpoint<S>(path));
  for (auto& l : loaded) members.push_back(&l.model);

  auto data = load_datasets<S>(cfg);
  auto& ds = data.test.size() > 0 ? data.test : data.train;
  auto report = ssm::ensemble_eval<S>(members, rule, ds, cfg.train.batch_size);

  std::cout << "samples:      " << report.count << "\n";
  for (std::size_t m = 0; m < members.size(); ++m)
    std::cout << "member " << (m + 1) << " acc: " << report.head_acc[m] << "\n";
  std::cout << "ensemble acc: " << report.combined_acc << "  (" << args.rule << ")\n";

  fs::create_directories(cfg.out_dir);
  std::ofstream out(fs::path(cfg.out_dir) / "ensemble.jsonl");
  if (!out) throw ssm::IoError("ensemble: cannot write report in " + cfg.out_dir);
  json j;
  j["rule"] = args.rule;
  j["member_acc"] = report.head_acc;
  j["ensemble_acc"] = report.combined_acc;
  j["count"] = report.count;
  write_json_line(out, j);
  return 0;
}

// ---- params ----------------------------------------------------------------

long long linear_params(ssm::Index in, ssm::Index out) { return (long long)in * out + out; }

int run_params(const ssm::RunConfig& cfg) {
  ssm::Model<double> model(cfg.model);
  long long backbone = 0;
  for (auto& [name, p] : model.named_params())
    if (name.rfind("backbone.", 0) == 0) backbone += p->numel();

  const ssm::Index C = cfg.model.feature_channels, K = cfg.model.num_classes;
  long long fc1 = linear_params(C, K);
  long long fc2 = 2 * fc1;
  long long fc3 = 3 * fc1;
  long long ssm_count = ssm::ssm_param_count(cfg.model.ssm, true);

  std::cout << "backbone params: " << backbone << "\n";
  std::cout << "classifier params (C=" << C << ", classes=" << K << ", heads="
            << cfg.model.ssm.num_heads << "):\n";
  std::cout << "  1FC " << fc1 << " delta " << 0 << "\n";
  std::cout << "  2FC " << fc2 << " delta " << (fc2 - fc1) << "\n";
  std::cout << "  3FC " << fc3 << " delta " << (fc3 - fc1) << "\n";
  std::cout << "  SSM " << ssm_count << " delta " << (ssm_count - fc1) << "\n";
  return 0;
}

// ---- gradcheck -------------------------------------------------------------

// Always 64-bit; exercises every layer type and the full conv+SSM composite.
int run_gradcheck(const ssm::RunConfig& cfg) {
  using S = double;
  const double kTol = 1e-4;
  ssm::SplitMix64 rng(cfg.train.seed + 1);
  bool ok = true;
  auto record = [&](const std::string& name, double err) {
    std::cout << name << " max rel err " << err << (err < kTol ? "" : "  FAIL") << "\n";
    if (!(err < kTol)) ok = false;
  };

  {
    ssm::LinearLayer<S> layer(4, 3);
    layer.init(rng);
    auto x = ssm::make_tensor<S>({5, 4}, true);
    for (ssm::Index i = 0; i < x->numel(); ++i) x->data[i] = rng.normal();
    auto params = layer.params();
    params.push_back(x);
    record("linear", ssm::grad_check<S>(
                         [&](ssm::Tape<S>& tape) {
                           auto y = ssm::linear_forward(tape, layer, x);
                           return ssm::reduce_all(tape, ssm::Reduce::kSum, ssm::mul(tape, y, y));
                         },
                         params));
  }
  {
    ssm::Conv2dLayer<S> layer(2, 3, 3, 1, 1);
    layer.init(rng);
    auto x = ssm::make_tensor<S>({2, 2, 5, 5}, true);
    for (ssm::Index i = 0; i < x->numel(); ++i) x->data[i] = rng.normal();
    auto params = layer.params();
    params.push_back(x);
    record("conv2d", ssm::grad_check<S>(
                         [&](ssm::Tape<S>& tape) {
                           auto y = ssm::conv2d_forward(tape, layer, x);
                           return ssm::reduce_all(tape, ssm::Reduce::kSum, ssm::mul(tape, y, y));
                         },
                         params));
  }
  {
    ssm::BatchNormLayer<S> layer(3);
    layer.mode = ssm::Mode::kTrain;
    auto x = ssm::make_tensor<S>({6, 3}, true);
    auto c = ssm::make_tensor<S>({6, 3});
    for (ssm::Index i = 0; i < x->numel(); ++i) {
      x->data[i] = rng.normal();
      c->data[i] = rng.normal();  // fixed weighting so the loss sees x
    }
    std::vector<ssm::TensorPtr<S>> params = {layer.gamma, layer.beta, x};
    record("batchnorm", ssm::grad_check<S>(
                            [&](ssm::Tape<S>& tape) {
                              layer.running_mean->data.setZero();
                              layer.running_var->data.setOnes();
                              auto y = ssm::batchnorm_forward(tape, layer, x);
                              return ssm::reduce_all(tape, ssm::Reduce::kSum,
                                                     ssm::mul(tape, ssm::mul(tape, y, y), c));
                            },
                            params));
  }
  {
    auto x = ssm::make_tensor<S>({4, 6}, true);
    for (ssm::Index i = 0; i < x->numel(); ++i) x->data[i] = rng.normal() + S(0.05);
    record("relu", ssm::grad_check<S>(
                       [&](ssm::Tape<S>& tape) {
                         auto y = ssm::relu(tape, x);
                         return ssm::reduce_all(tape, ssm::Reduce::kSum, ssm::mul(tape, y, y));
                       },
                       {x}));
  }
  {
    auto x = ssm::make_tensor<S>({5, 4}, true);
    for (ssm::Index i = 0; i < x->numel(); ++i) x->data[i] = rng.normal();
    std::vector<int> labels = {0, 3, 1, 2, 1};
    record("cross_entropy", ssm::grad_check<S>(
                                [&](ssm::Tape<S>& tape) {
                                  return ssm::cross_entropy(tape, x, labels);
                                },
                                {x}));
  }
  {
    ssm::ModelConfig mc;
    mc.backbone = ssm::BackboneKind::kConvNet;
    mc.image_h = mc.image_w = 4;
    mc.feature_channels = 8;
    mc.num_classes = 3;
    mc.ssm.num_channels = 8;
    mc.ssm.num_heads = 4;
    mc.ssm.num_classes = 3;
    ssm::Model<S> model(mc);
    model.init(rng);
    auto images = ssm::make_tensor<S>({2, 1, 4, 4});
    for (ssm::Index i = 0; i < images->numel(); ++i) images->data[i] = rng.uniform();
    std::vector<int> labels = {0, 2};
    record("conv+ssm composite", ssm::grad_check<S>(
                                     [&](ssm::Tape<S>& tape) {
                                       for (auto& [n, b] : model.named_buffers()) {
                                         // keep eval-independent state fixed across probes
                                         if (n.find("running_mean") != std::string::npos)
                                           b->data.setZero();
                                         else
                                           b->data.setOnes();
                                       }
                                       auto out = model.forward(tape, images, ssm::Mode::kTrain);
                                       return ssm::cross_entropy(tape, out.out.combined, labels);
                                     },
                                     model.trainable_params(), 1e-5, 1e-6));
  }
  std::cout << (ok ? "gradcheck OK" : "gradcheck FAILED") << "\n";
  return ok ? 0 : 1;
}

template <typename Fn32, typename Fn64>
int dispatch_precision(int bits, Fn32&& f32, Fn64&& f64) {
  if (bits == 32) return f32();
  return f64();
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* env = std::getenv("SSM_LAB_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(env)));
  else
    Eigen::setNbThreads(1);

  CLI::App app{"SSM lab: split-and-share classifier training and analysis"};
  app.require_subcommand(1);
  Args args;

  auto add_common = [&](CLI::App* cmd, bool with_config, bool with_ckpt) {
    if (with_config) cmd->add_option("--config", args.config_path, "run configuration file");
    if (with_ckpt) cmd->add_option("--checkpoint", args.checkpoints, "checkpoint file(s)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "override train.seed");
    cmd->add_option("--precision", args.precision, "scalar width")->check(CLI::IsMember({32, 64}));
    return cmd;
  };

  auto* train_cmd = add_common(app.add_subcommand("train", "train a model"), true, true);
  auto* eval_cmd = add_common(app.add_subcommand("eval", "evaluate a checkpoint"), true, true);
  auto* gradcam_cmd = add_common(app.add_subcommand("gradcam", "split-wise Grad-CAM maps"), true, true);
  gradcam_cmd->add_option("--image", args.image_index, "test image index");
  gradcam_cmd->add_option("--class", args.target_class, "target class (default: true label)");
  gradcam_cmd->add_option("--head", args.head, "head index (default: all heads)");
  auto* ensemble_cmd = add_common(app.add_subcommand("ensemble", "ensemble checkpoints"), true, true);
  ensemble_cmd->add_option("--rule", args.rule, "mean_softmax | mean_logits");
  auto* params_cmd = add_common(app.add_subcommand("params", "parameter-count table"), true, false);
  auto* gradcheck_cmd = add_common(app.add_subcommand("gradcheck", "finite-difference audit"), true, false);
  (void)params_cmd;
  (void)gradcheck_cmd;

  CLI11_PARSE(app, argc, argv);

  try {
    // Resolve the run configuration: an explicit file wins; otherwise a
    // checkpoint's embedded config; otherwise defaults.
    ssm::RunConfig cfg;
    if (!args.config_path.empty()) {
      cfg = ssm::load_config(args.config_path);
    } else if (!args.checkpoints.empty()) {
      cfg = ssm::parse_config_text(ssm::read_checkpoint_info(args.checkpoints[0]).config_text);
    }
    apply_overrides(cfg, args);

    if (train_cmd->parsed()) {
      std::string resume = args.checkpoints.empty() ? "" : args.checkpoints[0];
      return dispatch_precision(cfg.precision, [&] { return run_train<float>(cfg, resume); },
                                [&] { return run_train<double>(cfg, resume); });
    }
    if (eval_cmd->parsed()) {
      if (args.checkpoints.empty()) throw ssm::ConfigError("eval: --checkpoint is required");
      int bits = ssm::read_checkpoint_info(args.checkpoints[0]).scalar_bits;
      return dispatch_precision(bits, [&] { return run_eval<float>(cfg, args.checkpoints[0]); },
                                [&] { return run_eval<double>(cfg, args.checkpoints[0]); });
    }
    if (gradcam_cmd->parsed()) {
      if (args.checkpoints.empty()) throw ssm::ConfigError("gradcam: --checkpoint is required");
      int bits = ssm::read_checkpoint_info(args.checkpoints[0]).scalar_bits;
      return dispatch_precision(bits,
                                [&] { return run_gradcam<float>(cfg, args.checkpoints[0], args); },
                                [&] { return run_gradcam<double>(cfg, args.checkpoints[0], args); });
    }
    if (ensemble_cmd->parsed()) {
      if (args.checkpoints.size() < 2)
        throw ssm::ConfigError("ensemble: need at least 2 --checkpoint files");
      int bits = ssm::read_checkpoint_info(args.checkpoints[0]).scalar_bits;
      return dispatch_precision(bits, [&] { return run_ensemble<float>(cfg, args); },
                                [&] { return run_ensemble<double>(cfg, args); });
    }
    if (params_cmd->parsed()) return run_params(cfg);
    if (gradcheck_cmd->parsed()) return run_gradcheck(cfg);
    return 1;
  } catch (const ssm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return 3;
  } catch (const ssm::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
