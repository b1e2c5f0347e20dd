#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "ssm/checkpoint.hpp"
#include "ssm/config.hpp"
#include "ssm/train.hpp"

using namespace ssm;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/ssm_test_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("config defaults match the desk recipe") {
  RunConfig cfg = parse_config_text("");
  CHECK(cfg.train.epochs == 15);
  CHECK(cfg.train.milestones == std::vector<int>{8, 12});
  CHECK(cfg.train.batch_size == 128);
  CHECK(cfg.train.base_lr == 0.05);
  CHECK(cfg.train.momentum == 0.9);
  CHECK(cfg.train.weight_decay == 1e-4);
  CHECK(cfg.model.feature_channels == 256);
  CHECK(cfg.model.ssm.num_heads == 4);
  CHECK(cfg.precision == 64);
}

TEST_CASE("config parsing: comments, overrides, lists") {
  RunConfig cfg = parse_config_text(
      "# a comment\n"
      "train.epochs = 3   # trailing comment\n"
      "train.milestones = \n"
      "train.scheme = individual\n"
      "model.backbone = mlp\n"
      "model.feature_channels = 8\n"
      "model.num_classes = 2\n"
      "ssm.num_heads = 2\n"
      "data.source = synthetic\n"
      "precision = 32\n");
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.milestones.empty());
  CHECK(cfg.train.scheme == Scheme::kIndividual);
  CHECK(cfg.model.backbone == BackboneKind::kMlp);
  CHECK(cfg.model.ssm.num_channels == 8);
  CHECK(cfg.model.ssm.num_classes == 2);
  CHECK(cfg.precision == 32);
}

TEST_CASE("config errors name the offending field") {
  CHECK_THROWS_WITH_AS(parse_config_text("train.epochs = soon\n"),
                       doctest::Contains("train.epochs"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("nosuch.key = 1\n"), doctest::Contains("nosuch.key"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("train.epochs\n"), doctest::Contains("key = value"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(parse_config_text("precision = 48\n"), doctest::Contains("precision"),
                       ConfigError);
  // feature width not divisible by heads is a config error naming the rule
  CHECK_THROWS_WITH_AS(
      parse_config_text("model.feature_channels = 250\nssm.num_heads = 4\n"),
      doctest::Contains("divisible"), ConfigError);
}

TEST_CASE("config text round-trip is exact") {
  RunConfig cfg = parse_config_text(
      "train.epochs = 7\n"
      "train.milestones = 3,5\n"
      "train.base_lr = 0.013\n"
      "train.seed = 42\n"
      "model.backbone = mlp\n"
      "model.feature_channels = 12\n"
      "model.num_classes = 3\n"
      "ssm.num_heads = 3\n"
      "data.source = idx\n"
      "data.train_images = a.idx\n"
      "data.train_labels = b.idx\n"
      "out.dir = /tmp/run\n");
  auto text = to_text(cfg);
  RunConfig back = parse_config_text(text);
  CHECK(to_text(back) == text);
  CHECK(back.train.base_lr == cfg.train.base_lr);
  CHECK(back.train.milestones == cfg.train.milestones);
  CHECK(back.train_images == "a.idx");
  CHECK(back.out_dir == "/tmp/run");
}

TEST_CASE("checkpoint round-trip is bitwise lossless") {
  RunConfig cfg = parse_config_text(
      "model.backbone = mlp\n"
      "model.feature_channels = 8\n"
      "model.num_classes = 2\n"
      "ssm.num_heads = 4\n"
      "train.epochs = 2\n"
      "train.milestones = \n"
      "train.batch_size = 16\n"
      "train.seed = 9\n");
  Model<double> model(cfg.model);
  SplitMix64 rng(9);
  model.init(rng);

  // a little training so running stats and velocities are non-trivial
  auto ds = synthetic_gaussians<double>(2, 20, 8, 5);
  normalize(ds);
  SGDState<double> opt;
  FitOptions<double> fopts;
  fopts.train = cfg.train;
  fit(model, ds, Dataset<double>{}, opt, fopts);

  TempFile ck("roundtrip.ckpt");
  save_checkpoint(ck.path, model, opt, cfg, 2);
  auto loaded = load_checkpoint<double>(ck.path);
  CHECK(loaded.epoch == 2);
  CHECK(to_text(loaded.config) == to_text(cfg));

  auto a = model.named_params();
  auto b = loaded.model.named_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second->data == b[i].second->data);
  }
  auto ab = model.named_buffers();
  auto bb = loaded.model.named_buffers();
  for (std::size_t i = 0; i < ab.size(); ++i) CHECK(ab[i].second->data == bb[i].second->data);

  // momentum buffers restored bitwise against the loaded model's parameters
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto it = opt.velocity.find(a[i].second.get());
    auto jt = loaded.opt.velocity.find(b[i].second.get());
    REQUIRE(it != opt.velocity.end());
    REQUIRE(jt != loaded.opt.velocity.end());
    CHECK(Vec<double>(it->second) == Vec<double>(jt->second));
  }

  // saving the loaded state reproduces the same bytes
  TempFile ck2("roundtrip2.ckpt");
  save_checkpoint(ck2.path, loaded.model, loaded.opt, loaded.config, loaded.epoch);
  std::ifstream f1(ck.path, std::ios::binary), f2(ck2.path, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("checkpoint rejects bad magic, version, and precision") {
  TempFile ck("bad.ckpt");
  {
    std::ofstream out(ck.path, std::ios::binary);
    out << "NOTACKPT" << std::string(32, '\0');
  }
  CHECK_THROWS_WITH_AS(read_checkpoint_info(ck.path), doctest::Contains("magic"), IoError);

  RunConfig cfg = parse_config_text(
      "model.backbone = mlp\nmodel.feature_channels = 8\nmodel.num_classes = 2\n");
  Model<double> model(cfg.model);
  SGDState<double> opt;
  save_checkpoint(ck.path, model, opt, cfg, 0);

  // precision mismatch rejected with both widths named
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(ck.path), doctest::Contains("64"), IoError);

  // corrupt the version field (offset 8)
  {
    std::fstream f(ck.path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(8);
    std::uint32_t v = 99;
    f.write(reinterpret_cast<char*>(&v), 4);
  }
  CHECK_THROWS_WITH_AS(read_checkpoint_info(ck.path), doctest::Contains("version"), IoError);
}

TEST_CASE("resumed training bitwise-equals an uninterrupted run") {
  RunConfig cfg = parse_config_text(
      "model.backbone = mlp\n"
      "model.feature_channels = 8\n"
      "model.num_classes = 3\n"
      "ssm.num_heads = 4\n"
      "train.epochs = 4\n"
      "train.milestones = 2\n"
      "train.batch_size = 8\n"
      "train.seed = 31\n");
  auto ds = synthetic_gaussians<double>(3, 16, 8, 6);
  normalize(ds);

  // uninterrupted: 4 epochs straight
  Model<double> full(cfg.model);
  SplitMix64 r1(cfg.train.seed);
  full.init(r1);
  SGDState<double> opt_full;
  FitOptions<double> fopts;
  fopts.train = cfg.train;
  fit(full, ds, Dataset<double>{}, opt_full, fopts);

  // interrupted: 2 epochs, checkpoint, reload, resume
  Model<double> part(cfg.model);
  SplitMix64 r2(cfg.train.seed);
  part.init(r2);
  SGDState<double> opt_part;
  FitOptions<double> half = fopts;
  half.train.epochs = 2;
  half.train.milestones = {};  // schedule evaluated against the full config below
  fit(part, ds, Dataset<double>{}, opt_part, half);

  TempFile ck("resume.ckpt");
  save_checkpoint(ck.path, part, opt_part, cfg, 2);
  auto loaded = load_checkpoint<double>(ck.path);

  FitOptions<double> rest;
  rest.train = loaded.config.train;
  rest.start_epoch = loaded.epoch;
  fit(loaded.model, ds, Dataset<double>{}, loaded.opt, rest);

  auto a = full.named_params();
  auto b = loaded.model.named_params();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second->data == b[i].second->data);
  auto ab = full.named_buffers();
  auto bb = loaded.model.named_buffers();
  for (std::size_t i = 0; i < ab.size(); ++i) CHECK(ab[i].second->data == bb[i].second->data);
}
