#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spot/nn.hpp"
#include "spot/stats.hpp"

namespace spot {

struct PredictorConfig {
  std::size_t d_remap = 64;
  bool per_head = true;
  bool include_A = true;
  bool include_M = true;
  bool include_Sigma = true;
  bool include_mu = true;
  bool include_sigma = true;
  bool shared_across_stages = false;
  Spread spread = Spread::variance;
  double keep_prior = 0.5;  // keep probability each stage starts from

  FeatureLayout layout() const {
    return FeatureLayout{per_head, include_A, include_M, include_Sigma, include_mu, include_sigma};
  }

  /// Predictor input width E for a model with `heads` attention heads.
  std::size_t feature_width(std::size_t heads) const { return d_remap + layout().stats_width(heads); }

  void validate() const {
    if (!(keep_prior > 0.0 && keep_prior < 1.0)) throw ConfigError("keep_prior must lie in (0, 1)");
    if (d_remap % 2 != 0) throw ConfigError("d_remap must be even, got " + std::to_string(d_remap));
    if (d_remap == 0 && !include_A && !include_M && !include_Sigma) {
      throw ConfigError("predictor has no information source: d_remap is 0 and every attention source is off");
    }
  }
};

/// Token relevance predictor for one sparsification stage.
///
/// Tokens: LayerNorm -> Linear(d, d_remap) -> GELU, split into a per-token
/// local half and a global half pooled over the retained tokens. Scoring:
/// Linear(E, E/2) -> GELU -> Linear(E/2, E/4) -> GELU -> Linear(E/4, 2).
/// Column 0 of the softmax is the keep probability; the last bias starts it
/// near keep_prior so the retention schedule holds from the first step.
class RelevancePredictor {
 public:
  RelevancePredictor() = default;

  RelevancePredictor(const PredictorConfig& cfg, std::size_t embed_dim, std::size_t heads, Rng& rng)
      : cfg_(cfg), heads_(heads) {
    cfg_.validate();
    if (cfg_.d_remap > 0) {
      norm_ = LayerNorm::init(embed_dim);
      remap_ = Linear::init_fan_in(embed_dim, cfg_.d_remap, rng);
    }
    const std::size_t e = cfg_.feature_width(heads);
    if (e < 4) throw ConfigError("predictor input width " + std::to_string(e) + " is too small");
    fc1_ = Linear::init_fan_in(e, e / 2, rng);
    fc2_ = Linear::init_fan_in(e / 2, e / 4, rng);
    fc3_ = Linear::init_fan_in(e / 4, 2, rng);
    fc3_.bias.mutable_data()[0] = std::log(cfg_.keep_prior);
    fc3_.bias.mutable_data()[1] = std::log1p(-cfg_.keep_prior);
  }

  const PredictorConfig& config() const { return cfg_; }
  std::size_t input_width() const { return fc1_.in_features(); }

  struct Remapped {
    Tensor z_local;   // [n x d_remap/2]
    Tensor z_global;  // [n x d_remap/2], identical rows
  };

  /// Remap patch tokens [n x d]. z_global is the mean of the second half over
  /// rows with retained[i] true; both parts are undefined when d_remap is 0.
  Remapped remap_tokens(const Tensor& patch_tokens, const std::vector<bool>& retained) const {
    if (cfg_.d_remap == 0) return {};
    const std::size_t n = patch_tokens.dim(0), half = cfg_.d_remap / 2;
    if (retained.size() != n) throw DimensionError("remap_tokens: retained mask length differs from token count");
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i)
      if (retained[i]) rows.push_back(i);
    if (rows.empty()) throw ContractError("remap_tokens: no retained token to pool");
    Tensor z = gelu(remap_(norm_(patch_tokens)));
    Tensor local = slice(z, 0, n, 0, half);
    Tensor second = slice(z, 0, n, half, 2 * half);
    Tensor pooled = col_mean(rows.size() == n ? second : gather_rows(second, rows));
    return {local, broadcast_rows(pooled, n)};
  }

  Tensor features(const Tensor& patch_tokens, const SourceDescriptors& d) const {
    Remapped r = remap_tokens(patch_tokens, std::vector<bool>(patch_tokens.dim(0), true));
    return assemble_features(d, r.z_global, r.z_local, cfg_.layout());
  }

  /// Two-way logits [n x 2] (keep, drop) before the softmax.
  Tensor logits(const Tensor& features) const {
    if (features.rank() != 2 || features.dim(1) != input_width()) {
      throw ContractError("score: feature width " + (features.rank() == 2 ? std::to_string(features.dim(1)) : shape_str(features.shape())) +
                          " does not match predictor input " + std::to_string(input_width()));
    }
    return fc3_(gelu(fc2_(gelu(fc1_(features)))));
  }

  /// Keep probability per token.
  Tensor score(const Tensor& features) const {
    Tensor p = softmax_lastdim(logits(features));
    const std::size_t n = p.dim(0);
    return reshape(slice(p, 0, n, 0, 1), Shape{n});
  }

  void collect(const std::string& prefix, ParamList& out) const {
    if (cfg_.d_remap > 0) {
      norm_.collect(prefix + ".remap_norm", out);
      remap_.collect(prefix + ".remap", out);
    }
    fc1_.collect(prefix + ".score.fc1", out);
    fc2_.collect(prefix + ".score.fc2", out);
    fc3_.collect(prefix + ".score.fc3", out);
  }

  Linear& last_layer() { return fc3_; }

 private:
  PredictorConfig cfg_;
  std::size_t heads_ = 0;
  LayerNorm norm_;
  Linear remap_;
  Linear fc1_;
  Linear fc2_;
  Linear fc3_;
};

/// One predictor per stage, or a single shared one.
class PredictorBank {
 public:
  PredictorBank() = default;

  PredictorBank(const PredictorConfig& cfg, std::size_t stages, std::size_t embed_dim, std::size_t heads,
                std::uint64_t seed)
      : cfg_(cfg), stages_(stages) {
    Rng rng(seed);
    const std::size_t count = cfg.shared_across_stages ? std::min<std::size_t>(stages, 1) : stages;
    for (std::size_t k = 0; k < count; ++k) predictors_.emplace_back(cfg, embed_dim, heads, rng);
  }

  const PredictorConfig& config() const { return cfg_; }
  std::size_t stages() const { return stages_; }
  std::size_t distinct() const { return predictors_.size(); }

  const RelevancePredictor& at(std::size_t stage) const {
    if (stage >= stages_) throw ContractError("no predictor for stage " + std::to_string(stage));
    return predictors_.at(cfg_.shared_across_stages ? 0 : stage);
  }

  /// Parameters named "predictor.<k>.*" (k is 0-based; one entry when shared).
  ParamList parameters() const {
    ParamList out;
    for (std::size_t k = 0; k < predictors_.size(); ++k) predictors_[k].collect("predictor." + std::to_string(k), out);
    return out;
  }

 private:
  PredictorConfig cfg_;
  std::size_t stages_ = 0;
  std::vector<RelevancePredictor> predictors_;
};

struct GumbelSettings {
  double tau = 1.0;
  bool hard = true;
  double tau_initial = 5.0;
  double tau_final = 0.1;

  /// Exponential decay from tau_initial (epoch 0) to tau_final (last epoch).
  double temperature(std::size_t epoch, std::size_t epochs) const {
    if (epochs <= 1) return tau_initial;
    const double t = static_cast<double>(epoch) / static_cast<double>(epochs - 1);
    return tau_initial * std::pow(tau_final / tau_initial, t);
  }
};

/// Standard Gumbel(0, 1) draws, shaped like `shape`.
inline std::vector<double> gumbel_noise(std::size_t count, Rng& rng) {
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> g(count);
  for (double& v : g) {
    double u = 0.0;
    while (u <= 0.0) u = uniform(rng);
    v = -std::log(-std::log(u));
  }
  return g;
}

struct GumbelSample {
  Tensor keep;               // [n]; soft keep weights, or straight-through hard values
  std::vector<double> hard;  // argmax decision per token (1 keep, 0 drop)
};

/// Gumbel-Softmax relaxation of per-token keep/drop decisions with explicit noise.
inline GumbelSample gumbel_mask(const Tensor& keep_logits, double tau, bool hard, std::span<const double> noise) {
  if (!(tau > 0.0)) throw ContractError("gumbel_mask: temperature must be positive");
  if (keep_logits.rank() != 2 || keep_logits.dim(1) != 2) {
    throw DimensionError("gumbel_mask: logits must be [n x 2], got " + shape_str(keep_logits.shape()));
  }
  if (noise.size() != keep_logits.numel()) throw DimensionError("gumbel_mask: noise size mismatch");
  const std::size_t n = keep_logits.dim(0);
  Tensor g(keep_logits.shape(), std::vector<double>(noise.begin(), noise.end()));
  Tensor soft = softmax_lastdim(scale(add(keep_logits, g), 1.0 / tau));
  Tensor keep_soft = reshape(slice(soft, 0, n, 0, 1), Shape{n});
  GumbelSample out;
  out.hard.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.hard[i] = soft.at(i, 0) >= soft.at(i, 1) ? 1.0 : 0.0;
  out.keep = hard ? straight_through(out.hard, keep_soft) : keep_soft;
  return out;
}

inline GumbelSample gumbel_mask(const Tensor& keep_logits, double tau, bool hard, Rng& rng) {
  std::vector<double> noise = gumbel_noise(keep_logits.numel(), rng);
  return gumbel_mask(keep_logits, tau, hard, noise);
}

/// Keeps the `target_count` highest-probability tokens among those with
/// prev_mask set; ties go to the lower index. Vectors index patch tokens only
/// (the class token is always retained by the caller).
inline std::vector<bool> topk_select(std::span<const double> keep_prob, std::size_t target_count,
                                     const std::vector<bool>& prev_mask) {
  if (target_count < 1) throw ContractError("topk_select: target count must be at least 1");
  if (prev_mask.size() != keep_prob.size()) throw DimensionError("topk_select: mask and probabilities differ in length");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < prev_mask.size(); ++i)
    if (prev_mask[i]) candidates.push_back(i);
  if (target_count > candidates.size()) {
    throw ContractError("topk_select: target " + std::to_string(target_count) + " exceeds the " +
                        std::to_string(candidates.size()) + " available tokens");
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return keep_prob[a] > keep_prob[b]; });
  std::vector<bool> mask(keep_prob.size(), false);
  for (std::size_t i = 0; i < target_count; ++i) mask[candidates[i]] = true;
  return mask;
}

/// Hierarchical stage masks and their bookkeeping.
struct RetentionState {
  std::vector<std::vector<bool>> masks;  // B_1..B_K over the full sequence, class at 0
  std::vector<double> target_rates;      // rho^k
  std::vector<double> empirical_rates;   // kept patch tokens / N0
  std::vector<std::size_t> kept_counts;  // kept patch tokens per stage
  std::vector<std::vector<std::size_t>> kept_indices;

  std::size_t stages() const { return masks.size(); }
};

/// Validates that B_T <= B_k for T > k and the class token is always kept.
inline RetentionState compose_hierarchy(const std::vector<std::vector<bool>>& masks) {
  if (masks.empty()) throw ContractError("compose_hierarchy: needs at least one mask");
  const std::size_t total = masks.front().size();
  if (total < 2) throw ContractError("compose_hierarchy: masks must cover class and patch tokens");
  RetentionState state;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    const auto& m = masks[k];
    if (m.size() != total) throw DimensionError("compose_hierarchy: mask " + std::to_string(k + 1) + " has a different length");
    if (!m[0]) throw HierarchyError(k + 1, 0, "stage " + std::to_string(k + 1) + " drops the class token");
    if (k > 0) {
      for (std::size_t t = 0; t < total; ++t) {
        if (m[t] && !masks[k - 1][t]) {
          throw HierarchyError(k + 1, t, "stage " + std::to_string(k + 1) + " re-admits token " + std::to_string(t) +
                                             " pruned at an earlier stage");
        }
      }
    }
    std::vector<std::size_t> kept;
    for (std::size_t t = 1; t < total; ++t)
      if (m[t]) kept.push_back(t);
    state.kept_counts.push_back(kept.size());
    state.empirical_rates.push_back(static_cast<double>(kept.size()) / static_cast<double>(total - 1));
    state.kept_indices.push_back(std::move(kept));
  }
  state.masks = masks;
  return state;
}

}  // namespace spot
