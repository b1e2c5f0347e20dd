#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ssm/model.hpp"
#include "ssm/optim.hpp"

namespace ssm {

enum class DataSource { kIdx, kSynthetic };

// Flat key=value run description with dotted section keys. Defaults are the
// desk-scale recipe; a config file only lists what it overrides.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  RunConfig() {
    model.ssm.num_channels = model.feature_channels;
    model.ssm.num_classes = model.num_classes;
    model.ssm.num_heads = 4;
  }

  DataSource source = DataSource::kSynthetic;
  std::string train_images, train_labels;
  std::string test_images, test_labels;
  Index synthetic_classes = 10;
  Index synthetic_per_class = 64;
  Index synthetic_image = 8;
  bool normalize_data = true;
  Index augment_pad = 0;
  double augment_flip_prob = 0.0;

  std::string out_dir = "out";
  int precision = 64;

  void validate() const {
    if (precision != 32 && precision != 64)
      throw ConfigError("precision: must be 32 or 64, got " + std::to_string(precision));
    if (source == DataSource::kIdx) {
      if (train_images.empty() || train_labels.empty())
        throw ConfigError("data.train_images/data.train_labels: required for data.source=idx");
    } else {
      if (synthetic_classes < 1 || synthetic_per_class < 1 || synthetic_image < 1)
        throw ConfigError("data.synthetic_*: values must be positive");
    }
    if (augment_pad < 0) throw ConfigError("data.augment_pad: must be >= 0");
    if (augment_flip_prob < 0 || augment_flip_prob > 1)
      throw ConfigError("data.augment_flip_prob: must be in [0, 1]");
    model.validate();
    train.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + value + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  if (trim(value).empty()) return out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(static_cast<int>(parse_int(key, trim(item))));
  return out;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_int;
  using detail::parse_int_list;
  using detail::parse_real;

  if (key == "model.backbone") {
    if (value == "conv")
      cfg.model.backbone = BackboneKind::kConvNet;
    else if (value == "mlp")
      cfg.model.backbone = BackboneKind::kMlp;
    else
      throw ConfigError("model.backbone: expected conv or mlp, got '" + value + "'");
  } else if (key == "model.in_channels") {
    cfg.model.in_channels = parse_int(key, value);
  } else if (key == "model.image_h") {
    cfg.model.image_h = parse_int(key, value);
  } else if (key == "model.image_w") {
    cfg.model.image_w = parse_int(key, value);
  } else if (key == "model.feature_channels") {
    cfg.model.feature_channels = parse_int(key, value);
    cfg.model.ssm.num_channels = cfg.model.feature_channels;
  } else if (key == "model.head") {
    if (value == "ssm")
      cfg.model.head = HeadKind::kSSM;
    else if (value == "parallel_fc")
      cfg.model.head = HeadKind::kParallelFC;
    else
      throw ConfigError("model.head: expected ssm or parallel_fc, got '" + value + "'");
  } else if (key == "model.num_parallel_fc") {
    cfg.model.num_parallel_fc = parse_int(key, value);
  } else if (key == "model.num_classes") {
    cfg.model.num_classes = parse_int(key, value);
    cfg.model.ssm.num_classes = cfg.model.num_classes;
  } else if (key == "ssm.num_heads") {
    cfg.model.ssm.num_heads = parse_int(key, value);
  } else if (key == "ssm.bn_relu_on_last") {
    cfg.model.ssm.bn_relu_on_last = parse_bool(key, value);
  } else if (key == "train.base_lr") {
    cfg.train.base_lr = parse_real(key, value);
  } else if (key == "train.batch_size") {
    cfg.train.batch_size = parse_int(key, value);
  } else if (key == "train.epochs") {
    cfg.train.epochs = static_cast<int>(parse_int(key, value));
  } else if (key == "train.milestones") {
    cfg.train.milestones = parse_int_list(key, value);
  } else if (key == "train.lr_decay") {
    cfg.train.lr_decay = parse_real(key, value);
  } else if (key == "train.momentum") {
    cfg.train.momentum = parse_real(key, value);
  } else if (key == "train.weight_decay") {
    cfg.train.weight_decay = parse_real(key, value);
  } else if (key == "train.scheme") {
    if (value == "joint")
      cfg.train.scheme = Scheme::kJoint;
    else if (value == "individual")
      cfg.train.scheme = Scheme::kIndividual;
    else
      throw ConfigError("train.scheme: expected joint or individual, got '" + value + "'");
  } else if (key == "train.seed") {
    cfg.train.seed = static_cast<std::uint64_t>(parse_int(key, value));
  } else if (key == "data.source") {
    if (value == "idx")
      cfg.source = DataSource::kIdx;
    else if (value == "synthetic")
      cfg.source = DataSource::kSynthetic;
    else
      throw ConfigError("data.source: expected idx or synthetic, got '" + value + "'");
  } else if (key == "data.train_images") {
    cfg.train_images = value;
  } else if (key == "data.train_labels") {
    cfg.train_labels = value;
  } else if (key == "data.test_images") {
    cfg.test_images = value;
  } else if (key == "data.test_labels") {
    cfg.test_labels = value;
  } else if (key == "data.synthetic_classes") {
    cfg.synthetic_classes = parse_int(key, value);
  } else if (key == "data.synthetic_per_class") {
    cfg.synthetic_per_class = parse_int(key, value);
  } else if (key == "data.synthetic_image") {
    cfg.synthetic_image = parse_int(key, value);
  } else if (key == "data.normalize") {
    cfg.normalize_data = parse_bool(key, value);
  } else if (key == "data.augment_pad") {
    cfg.augment_pad = parse_int(key, value);
  } else if (key == "data.augment_flip_prob") {
    cfg.augment_flip_prob = parse_real(key, value);
  } else if (key == "out.dir") {
    cfg.out_dir = value;
  } else if (key == "precision") {
    cfg.precision = static_cast<int>(parse_int(key, value));
  } else {
    throw ConfigError(key + ": unknown configuration key");
  }
}

// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::stringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value, got '" + line +
                        "'");
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    apply_config_entry(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// Canonical text form; parse_config_text(to_text(cfg)) reproduces cfg.
inline std::string to_text(const RunConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "model.backbone = " << (cfg.model.backbone == BackboneKind::kConvNet ? "conv" : "mlp")
      << "\n";
  out << "model.in_channels = " << cfg.model.in_channels << "\n";
  out << "model.image_h = " << cfg.model.image_h << "\n";
  out << "model.image_w = " << cfg.model.image_w << "\n";
  out << "model.feature_channels = " << cfg.model.feature_channels << "\n";
  out << "model.head = " << (cfg.model.head == HeadKind::kSSM ? "ssm" : "parallel_fc") << "\n";
  out << "model.num_parallel_fc = " << cfg.model.num_parallel_fc << "\n";
  out << "model.num_classes = " << cfg.model.num_classes << "\n";
  out << "ssm.num_heads = " << cfg.model.ssm.num_heads << "\n";
  out << "ssm.bn_relu_on_last = " << (cfg.model.ssm.bn_relu_on_last ? "true" : "false") << "\n";
  out << "train.base_lr = " << cfg.train.base_lr << "\n";
  out << "train.batch_size = " << cfg.train.batch_size << "\n";
  out << "train.epochs = " << cfg.train.epochs << "\n";
  out << "train.milestones = ";
  for (std::size_t i = 0; i < cfg.train.milestones.size(); ++i)
    out << (i ? "," : "") << cfg.train.milestones[i];
  out << "\n";
  out << "train.lr_decay = " << cfg.train.lr_decay << "\n";
  out << "train.momentum = " << cfg.train.momentum << "\n";
  out << "train.weight_decay = " << cfg.train.weight_decay << "\n";
  out << "train.scheme = " << (cfg.train.scheme == Scheme::kJoint ? "joint" : "individual") << "\n";
  out << "train.seed = " << cfg.train.seed << "\n";
  out << "data.source = " << (cfg.source == DataSource::kIdx ? "idx" : "synthetic") << "\n";
  if (!cfg.train_images.empty()) out << "data.train_images = " << cfg.train_images << "\n";
  if (!cfg.train_labels.empty()) out << "data.train_labels = " << cfg.train_labels << "\n";
  if (!cfg.test_images.empty()) out << "data.test_images = " << cfg.test_images << "\n";
  if (!cfg.test_labels.empty()) out << "data.test_labels = " << cfg.test_labels << "\n";
  out << "data.synthetic_classes = " << cfg.synthetic_classes << "\n";
  out << "data.synthetic_per_class = " << cfg.synthetic_per_class << "\n";
  out << "data.synthetic_image = " << cfg.synthetic_image << "\n";
  out << "data.normalize = " << (cfg.normalize_data ? "true" : "false") << "\n";
  out << "data.augment_pad = " << cfg.augment_pad << "\n";
  out << "data.augment_flip_prob = " << cfg.augment_flip_prob << "\n";
  out << "out.dir = " << cfg.out_dir << "\n";
  out << "precision = " << cfg.precision << "\n";
  return out.str();
}

}  // namespace ssm
