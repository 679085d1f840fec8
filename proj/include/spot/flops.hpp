#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "spot/engine.hpp"
#include "spot/predictor.hpp"
#include "spot/vit.hpp"

// Costs count one multiply-accumulate as one unit. Softmax, norms and
// activations are ignored.

namespace spot {

using FlopCount = std::uint64_t;

inline FlopCount attention_cost(std::size_t n, std::size_t d, std::size_t heads) {
  if (heads == 0 || d % heads != 0) throw ConfigError("attention_cost: embed dim must be divisible by heads");
  const FlopCount N = n, D = d;
  return 4 * N * D * D + 2 * N * N * D;
}

inline FlopCount mlp_cost(std::size_t n, std::size_t d, double mlp_ratio) {
  const auto hidden = static_cast<FlopCount>(std::llround(mlp_ratio * static_cast<double>(d)));
  return 2 * static_cast<FlopCount>(n) * d * hidden;
}

/// One stage of the relevance predictor over n patch tokens.
inline FlopCount predictor_cost(std::size_t n, std::size_t e, std::size_t d_remap, std::size_t d) {
  const FlopCount N = n, E = e;
  const FlopCount remap = N * d * d_remap;
  const FlopCount head = N * (E * (E / 2) + (E / 2) * (E / 4) + (E / 4) * 2);
  return remap + head;
}

struct FlopLayer {
  std::size_t layer = 0;
  std::size_t token_count = 0;  // incl. class token
  FlopCount attention = 0;
  FlopCount mlp = 0;
};

struct FlopReport {
  std::vector<FlopLayer> layers;
  FlopCount embed = 0;
  FlopCount head = 0;
  std::vector<FlopCount> predictor;  // per stage
  FlopCount total = 0;

  FlopCount predictor_total() const {
    FlopCount s = 0;
    for (FlopCount p : predictor) s += p;
    return s;
  }

  FlopCount itemized_sum() const {
    FlopCount s = embed + head + predictor_total();
    for (const auto& l : layers) s += l.attention + l.mlp;
    return s;
  }

  double giga() const { return static_cast<double>(total) * 1e-9; }
};

/// Token counts for a costed forward pass.
struct RetentionPlan {
  std::vector<std::size_t> stage_layers;  // first layer on each reduced set
  std::vector<std::size_t> kept_patches;  // patch tokens kept at each stage
  bool with_predictor = true;
  PredictorConfig predictor;

  static RetentionPlan dense() { return RetentionPlan{{}, {}, false, {}}; }

  /// ceil(rho^k N0) at the given stage layers.
  static RetentionPlan sparsified(const ViTConfig& cfg, double rho, std::vector<std::size_t> stages,
                                  PredictorConfig predictor = {}) {
    RetentionPlan p;
    p.kept_patches = target_counts(cfg.num_patches(), rho, stages.size());
    p.stage_layers = std::move(stages);
    p.with_predictor = true;
    p.predictor = predictor;
    return p;
  }
};

inline FlopReport model_cost(const ViTConfig& cfg, const RetentionPlan& plan) {
  cfg.validate();
  if (plan.stage_layers.size() != plan.kept_patches.size()) {
    throw ContractError("model_cost: stage layers and kept counts differ in length");
  }
  const std::size_t n0 = cfg.num_patches();
  FlopReport r;
  r.embed = static_cast<FlopCount>(n0) * cfg.patch_dim() * cfg.embed_dim;
  r.head = static_cast<FlopCount>(cfg.embed_dim) * cfg.num_classes;

  std::size_t patches = n0, stage = 0;
  for (std::size_t l = 1; l <= cfg.depth; ++l) {
    while (stage < plan.stage_layers.size() && plan.stage_layers[stage] <= l) {
      if (plan.with_predictor) {
        const std::size_t e = plan.predictor.feature_width(cfg.heads);
        r.predictor.push_back(predictor_cost(patches, e, plan.predictor.d_remap, cfg.embed_dim));
      }
      if (plan.kept_patches[stage] > patches) throw ContractError("model_cost: retention plan increases token count");
      patches = plan.kept_patches[stage];
      ++stage;
    }
    const std::size_t n = patches + 1;
    r.layers.push_back({l, n, attention_cost(n, cfg.embed_dim, cfg.heads), mlp_cost(n, cfg.embed_dim, cfg.mlp_ratio)});
  }
  if (stage != plan.stage_layers.size()) throw ContractError("model_cost: stage layer beyond model depth");
  r.total = r.itemized_sum();
  return r;
}

/// Cost of a measured forward pass given the tokens entering each layer and
/// the patch tokens each predictor scored.
inline FlopReport measured_cost(const ViTConfig& cfg, const std::vector<std::size_t>& layer_tokens,
                                const std::vector<std::size_t>& stage_tokens, const PredictorConfig* predictor) {
  if (layer_tokens.size() != cfg.depth) throw DimensionError("measured_cost: one token count per layer expected");
  FlopReport r;
  r.embed = static_cast<FlopCount>(cfg.num_patches()) * cfg.patch_dim() * cfg.embed_dim;
  r.head = static_cast<FlopCount>(cfg.embed_dim) * cfg.num_classes;
  for (std::size_t l = 0; l < cfg.depth; ++l) {
    const std::size_t n = layer_tokens[l];
    if (l > 0 && n > layer_tokens[l - 1]) throw ContractError("measured_cost: token count increases across layers");
    r.layers.push_back({l + 1, n, attention_cost(n, cfg.embed_dim, cfg.heads), mlp_cost(n, cfg.embed_dim, cfg.mlp_ratio)});
  }
  if (predictor != nullptr) {
    for (std::size_t n : stage_tokens)
      r.predictor.push_back(predictor_cost(n, predictor->feature_width(cfg.heads), predictor->d_remap, cfg.embed_dim));
  }
  r.total = r.itemized_sum();
  return r;
}

inline std::string format_report(const FlopReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << std::left << std::setw(8) << "layer" << std::right << std::setw(8) << "tokens" << std::setw(16) << "attention"
     << std::setw(16) << "mlp" << '\n';
  for (const auto& l : r.layers) {
    os << std::left << std::setw(8) << l.layer << std::right << std::setw(8) << l.token_count << std::setw(16)
       << l.attention << std::setw(16) << l.mlp << '\n';
  }
  os << "embed      " << r.embed << '\n' << "head       " << r.head << '\n';
  for (std::size_t k = 0; k < r.predictor.size(); ++k) os << "predictor" << k + 1 << " " << r.predictor[k] << '\n';
  os << "total      " << r.total << " (" << r.giga() << " G)\n";
  return os.str();
}

inline std::string report_csv(const FlopReport& r) {
  std::ostringstream os;
  os << "item,layer,tokens,attention,mlp,cost\n";
  for (const auto& l : r.layers)
    os << "layer," << l.layer << ',' << l.token_count << ',' << l.attention << ',' << l.mlp << ','
       << l.attention + l.mlp << '\n';
  os << "embed,,,,," << r.embed << '\n' << "head,,,,," << r.head << '\n';
  for (std::size_t k = 0; k < r.predictor.size(); ++k) os << "predictor," << k + 1 << ",,,," << r.predictor[k] << '\n';
  os << "total,,,,," << r.total << '\n';
  return os.str();
}

}  // namespace spot
