#pragma once

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spot/dataset.hpp"
#include "spot/engine.hpp"
#include "spot/predictor.hpp"
#include "spot/trainer.hpp"
#include "spot/vit.hpp"

// Plain-text configuration: one key=value per line, '#' starts a comment.
// Resolution order is defaults, then the file, then command-line overrides.

namespace spot {

struct ConfigKey {
  const char* name;
  const char* fallback;
  const char* help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"model", "desk", "architecture preset: desk, deit_small, deit_tiny"},
      {"depth", "", "transformer layers (empty: preset)"},
      {"embed_dim", "", "token width (empty: preset)"},
      {"heads", "", "attention heads (empty: preset)"},
      {"patch_size", "", "patch side in pixels (empty: preset)"},
      {"image_size", "", "image side in pixels (empty: preset)"},
      {"channels", "", "image channels (empty: preset)"},
      {"mlp_ratio", "", "MLP hidden width / embed_dim (empty: preset)"},
      {"num_classes", "", "classifier outputs (empty: preset)"},
      {"rho", "0.7", "per-stage retention rate"},
      {"stages", "auto", "comma-separated stage layers, or auto (quarter marks)"},
      {"num_stages", "3", "stage count used by stages=auto"},
      {"mode", "inference", "engine mode for eval: inference or training"},
      {"scorer", "spot", "eval scorer: spot, heuristic or dense"},
      {"d_remap", "64", "remapped token width (0 disables token features)"},
      {"per_head", "true", "per-head descriptors (false: head-averaged)"},
      {"include_A", "true", "current-map descriptor"},
      {"include_M", "true", "cross-layer mean descriptor"},
      {"include_Sigma", "true", "cross-layer variance descriptor"},
      {"include_mu", "true", "row/column means in descriptors"},
      {"include_sigma", "true", "row/column spreads in descriptors"},
      {"shared_across_stages", "false", "one predictor for all stages"},
      {"use_std", "false", "spread columns hold standard deviations"},
      {"backbone_lr", "0.001", "fine-tuning learning rate of the backbone"},
      {"predictor_lr", "0.01", "learning rate of the predictors"},
      {"pretrain_lr", "0.001", "dense pretraining learning rate"},
      {"epochs", "6", "fine-tuning epochs"},
      {"pretrain_epochs", "10", "dense pretraining epochs"},
      {"batch_size", "16", "samples per optimizer step"},
      {"weight_decay", "0.05", "decoupled weight decay"},
      {"lambda1", "2", "rate loss weight"},
      {"lambda2", "0.5", "distillation loss weight"},
      {"lambda3", "0", "token similarity loss weight"},
      {"tau_initial", "5", "Gumbel temperature at the first epoch"},
      {"tau_final", "0.1", "Gumbel temperature at the last epoch"},
      {"hard", "true", "straight-through hard Gumbel samples"},
      {"seed", "0", "seed for initialisation, shuffling and noise"},
      {"train_samples", "512", "synthetic training images"},
      {"test_samples", "256", "synthetic evaluation images"},
      {"data_seed", "11", "synthetic data seed (test set uses data_seed+1)"},
      {"data_noise", "0.05", "pixel noise level"},
      {"background", "low_noise", "low_noise or uniform_noise"},
      {"object_size", "16", "object side in pixels"},
      {"train_data", "", "SPOTDS1 training file (empty: synthesize)"},
      {"test_data", "", "SPOTDS1 evaluation file (empty: synthesize)"},
      {"checkpoint", "", "model checkpoint (empty: <out>/model.ckpt)"},
      {"teacher_checkpoint", "", "pretrained dense checkpoint (empty: pretrain)"},
      {"shades", "0.25,0.5,0.75", "overlay shade per stage"},
      {"visualize_samples", "4", "images rendered by visualize"},
      {"stats_sample", "0", "evaluation image used by stats-dump"},
      {"flops_csv", "true", "flops also writes flops.csv"},
      {"ablate_variants", "full,no_mu,no_sigma,no_M_Sigma,d_remap_0,head_avg,shared", "ablation variants"},
      {"ablate_epochs", "", "fine-tuning epochs per ablation variant (empty: epochs)"},
  };
  return keys;
}

/// Raw resolved key/value table with the origin of every entry.
class ConfigTable {
 public:
  ConfigTable() {
    for (const auto& k : config_keys()) {
      values_[k.name] = k.fallback;
      origin_[k.name] = "default";
    }
  }

  static bool known(const std::string& key) {
    const auto& keys = config_keys();
    return std::any_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return key == k.name; });
  }

  /// Reads key=value lines; `source` names the text in messages.
  void merge_text(const std::string& text, const std::string& source = "config") {
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ParseError(number, source + ": expected key=value, got '" + line + "'");
      const std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw ParseError(number, source + ": missing key");
      if (!known(key)) throw ParseError(number, source + ": unknown key '" + key + "'");
      values_[key] = trim(line.substr(eq + 1));
      origin_[key] = source + " line " + std::to_string(number);
    }
  }

  void merge_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    merge_text(ss.str(), path);
  }

  void set(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not KEY=VALUE");
    const std::string key = trim(assignment.substr(0, eq));
    if (!known(key)) throw ConfigError("unknown key '" + key + "' in override");
    values_[key] = trim(assignment.substr(eq + 1));
    origin_[key] = "override";
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  const std::string& origin(const std::string& key) const { return origin_.at(key); }

  /// Resolved configuration, one key per line in registry order.
  std::string echo() const {
    std::string out;
    for (const auto& k : config_keys()) out += std::string(k.name) + "=" + values_.at(k.name) + "\n";
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> origin_;
};

/// Typed view of a resolved table.
struct RunConfig {
  ViTConfig vit;
  SparsifyConfig sparsify;
  PredictorConfig predictor;
  TrainConfig train;
  SyntheticDatasetSpec train_data;
  SyntheticDatasetSpec test_data;
  EvalMode scorer = EvalMode::spot;
  std::string train_data_path, test_data_path, checkpoint, teacher_checkpoint;
  std::vector<double> shades;
  std::size_t visualize_samples = 4;
  std::size_t stats_sample = 0;
  bool flops_csv = true;
  std::vector<std::string> ablate_variants;
  std::size_t ablate_epochs = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string where(const ConfigTable& t, const std::string& key) {
  return key + " (" + t.origin(key) + ")";
}

inline double to_double(const ConfigTable& t, const std::string& key) {
  const std::string& s = t.get(key);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(where(t, key) + ": '" + s + "' is not a number");
  return v;
}

inline std::uint64_t parse_uint(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ConfigError(what + ": '" + s + "' is not a nonnegative integer");
  }
  return v;
}

inline std::size_t to_size(const ConfigTable& t, const std::string& key) {
  return static_cast<std::size_t>(parse_uint(t.get(key), where(t, key)));
}

inline bool to_bool(const ConfigTable& t, const std::string& key) {
  const std::string& s = t.get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(where(t, key) + ": '" + s + "' is not a boolean");
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = ConfigTable::trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

inline std::vector<std::size_t> parse_stage_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : detail::split(s, ',')) out.push_back(detail::parse_uint(item, "stages"));
  return out;
}

inline ViTConfig preset(const std::string& name) {
  if (name == "desk") return ViTConfig::desk();
  if (name == "deit_small") return ViTConfig::deit_small();
  if (name == "deit_tiny") return ViTConfig::deit_tiny();
  throw ConfigError("unknown model preset '" + name + "'");
}

inline RunConfig resolve(const ConfigTable& t) {
  using namespace detail;
  RunConfig rc;
  rc.vit = preset(t.get("model"));
  auto opt_size = [&](const char* key, std::size_t& field) {
    if (!t.get(key).empty()) field = to_size(t, key);
  };
  opt_size("depth", rc.vit.depth);
  opt_size("embed_dim", rc.vit.embed_dim);
  opt_size("heads", rc.vit.heads);
  opt_size("patch_size", rc.vit.patch_size);
  opt_size("image_size", rc.vit.image_size);
  opt_size("channels", rc.vit.channels);
  opt_size("num_classes", rc.vit.num_classes);
  if (!t.get("mlp_ratio").empty()) rc.vit.mlp_ratio = to_double(t, "mlp_ratio");
  rc.vit.validate();

  rc.sparsify.rho = to_double(t, "rho");
  rc.sparsify.stage_layers = t.get("stages") == "auto" ? quarter_mark_stages(rc.vit.depth, to_size(t, "num_stages"))
                                                       : parse_stage_list(t.get("stages"));
  const std::string& mode = t.get("mode");
  if (mode == "inference") rc.sparsify.mode = EngineMode::inference;
  else if (mode == "training") rc.sparsify.mode = EngineMode::training;
  else throw ConfigError(where(t, "mode") + ": expected inference or training");
  rc.sparsify.validate(rc.vit.depth);

  const std::string& scorer = t.get("scorer");
  if (scorer == "spot") rc.scorer = EvalMode::spot;
  else if (scorer == "heuristic") rc.scorer = EvalMode::heuristic;
  else if (scorer == "dense") rc.scorer = EvalMode::dense;
  else throw ConfigError(where(t, "scorer") + ": expected spot, heuristic or dense");

  rc.predictor.d_remap = to_size(t, "d_remap");
  rc.predictor.per_head = to_bool(t, "per_head");
  rc.predictor.include_A = to_bool(t, "include_A");
  rc.predictor.include_M = to_bool(t, "include_M");
  rc.predictor.include_Sigma = to_bool(t, "include_Sigma");
  rc.predictor.include_mu = to_bool(t, "include_mu");
  rc.predictor.include_sigma = to_bool(t, "include_sigma");
  rc.predictor.shared_across_stages = to_bool(t, "shared_across_stages");
  rc.predictor.spread = to_bool(t, "use_std") ? Spread::stddev : Spread::variance;
  rc.predictor.keep_prior = rc.sparsify.rho < 1.0 ? rc.sparsify.rho : 0.5;
  rc.predictor.validate();

  rc.seed = parse_uint(t.get("seed"), where(t, "seed"));
  TrainConfig& tc = rc.train;
  tc.backbone_lr = to_double(t, "backbone_lr");
  tc.predictor_lr = to_double(t, "predictor_lr");
  tc.pretrain_lr = to_double(t, "pretrain_lr");
  tc.epochs = to_size(t, "epochs");
  tc.pretrain_epochs = to_size(t, "pretrain_epochs");
  tc.batch_size = to_size(t, "batch_size");
  tc.weight_decay = to_double(t, "weight_decay");
  tc.weights = {to_double(t, "lambda1"), to_double(t, "lambda2"), to_double(t, "lambda3")};
  tc.gumbel.tau_initial = to_double(t, "tau_initial");
  tc.gumbel.tau_final = to_double(t, "tau_final");
  tc.gumbel.hard = to_bool(t, "hard");
  tc.seed = rc.seed;
  tc.validate();

  SyntheticDatasetSpec ds;
  ds.image_size = rc.vit.image_size;
  ds.channels = rc.vit.channels;
  ds.classes = rc.vit.num_classes;
  ds.grid_align = rc.vit.patch_size;
  ds.noise = to_double(t, "data_noise");
  ds.object_size = to_size(t, "object_size");
  const std::string& bg = t.get("background");
  if (bg == "low_noise") ds.background = Background::low_noise;
  else if (bg == "uniform_noise") ds.background = Background::uniform_noise;
  else throw ConfigError(where(t, "background") + ": expected low_noise or uniform_noise");
  const std::uint64_t data_seed = parse_uint(t.get("data_seed"), where(t, "data_seed"));
  rc.train_data = ds;
  rc.train_data.samples = to_size(t, "train_samples");
  rc.train_data.seed = data_seed;
  rc.test_data = ds;
  rc.test_data.samples = to_size(t, "test_samples");
  rc.test_data.seed = data_seed + 1;

  rc.train_data_path = t.get("train_data");
  rc.test_data_path = t.get("test_data");
  rc.checkpoint = t.get("checkpoint");
  rc.teacher_checkpoint = t.get("teacher_checkpoint");
  for (const auto& s : split(t.get("shades"), ',')) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v < 0.0 || v > 1.0) {
      throw ConfigError(where(t, "shades") + ": '" + s + "' is not a shade in [0, 1]");
    }
    rc.shades.push_back(v);
  }
  rc.visualize_samples = to_size(t, "visualize_samples");
  rc.stats_sample = to_size(t, "stats_sample");
  rc.flops_csv = to_bool(t, "flops_csv");
  rc.ablate_variants = split(t.get("ablate_variants"), ',');
  rc.ablate_epochs = t.get("ablate_epochs").empty() ? tc.epochs : to_size(t, "ablate_epochs");
  return rc;
}

/// Defaults, then `path` (if nonempty), then overrides.
inline ConfigTable parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  ConfigTable t;
  if (!path.empty()) t.merge_file(path);
  for (const auto& o : overrides) t.set(o);
  return t;
}

}  // namespace spot
