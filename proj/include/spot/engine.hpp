#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "spot/heuristic.hpp"
#include "spot/predictor.hpp"
#include "spot/stats.hpp"
#include "spot/vit.hpp"

namespace spot {

enum class EngineMode { training, inference };

struct SparsifyConfig {
  double rho = 0.7;
  std::vector<std::size_t> stage_layers;  // 1-based; each is the first layer on the reduced set
  EngineMode mode = EngineMode::inference;

  std::size_t stages() const { return stage_layers.size(); }

  void validate(std::size_t depth) const {
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in (0, 1], got " + std::to_string(rho));
    for (std::size_t i = 0; i < stage_layers.size(); ++i) {
      const std::size_t l = stage_layers[i];
      if (l < 2 || l > depth) {
        throw ConfigError("stage layer " + std::to_string(l) + " outside [2, " + std::to_string(depth) +
                          "]; a stage needs the attention maps of an earlier layer");
      }
      if (i > 0 && l <= stage_layers[i - 1]) throw ConfigError("stage layers must be strictly increasing");
    }
  }
};

/// Quarter-mark placement: floor(k * depth / 4) + 1 for k = 1..K.
inline std::vector<std::size_t> quarter_mark_stages(std::size_t depth, std::size_t stages) {
  if (depth < 4 || stages > 3) {
    throw ConfigError("quarter-mark placement needs depth >= 4 and at most 3 stages (depth " + std::to_string(depth) +
                      ", stages " + std::to_string(stages) + ")");
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 1; k <= stages; ++k) out.push_back(k * depth / 4 + 1);
  return out;
}

/// Kept patch-token counts ceil(rho^k * N0), k = 1..K. Products within 1e-9
/// of an integer count as that integer.
inline std::vector<std::size_t> target_counts(std::size_t n0, double rho, std::size_t stages) {
  if (n0 < 1) throw ContractError("target_counts: needs at least one patch token");
  if (!(rho > 0.0 && rho <= 1.0)) throw ContractError("target_counts: rho must lie in (0, 1]");
  std::vector<std::size_t> out;
  std::size_t prev = n0;
  for (std::size_t k = 1; k <= stages; ++k) {
    const double x = std::pow(rho, static_cast<double>(k)) * static_cast<double>(n0);
    auto c = static_cast<std::size_t>(std::ceil(x - 1e-9));
    c = std::clamp<std::size_t>(c, 1, prev);
    out.push_back(c);
    prev = c;
  }
  return out;
}

/// Source of per-stage keep decisions.
class StageScorer {
 public:
  virtual ~StageScorer() = default;
  /// Attention maps of the layer just computed, restricted to retained tokens.
  virtual void observe(const std::vector<Tensor>& maps) = 0;
  /// Retained set shrank to local rows `keep` (class row 0 included).
  virtual void shrink(std::span<const std::size_t> keep) = 0;
  /// Keep/drop logits [n x 2] for the retained patch tokens.
  virtual Tensor keep_logits(std::size_t stage, const Tensor& patch_tokens) = 0;
  /// Keep scores for the retained patch tokens; higher means keep.
  virtual std::vector<double> keep_scores(std::size_t stage, const Tensor& patch_tokens) = 0;
};

/// Learned scorer: cross-layer statistics plus the stage predictors.
class SpotScorer : public StageScorer {
 public:
  SpotScorer(const PredictorBank& bank, std::size_t heads) : bank_(bank), acc_(heads) {}

  void observe(const std::vector<Tensor>& maps) override {
    acc_.accumulate(maps);
    last_maps_ = maps;
  }

  void shrink(std::span<const std::size_t> keep) override {
    acc_.shrink(keep);
    for (Tensor& m : last_maps_) m = gather_square(m, keep);
  }

  Tensor features(std::size_t stage, const Tensor& patch_tokens) const {
    if (last_maps_.empty()) throw ContractError("predictor stage reached before any attention map");
    SourceDescriptors d = extract_descriptors(last_maps_, acc_, bank_.config().spread);
    return bank_.at(stage).features(patch_tokens, d);
  }

  Tensor keep_logits(std::size_t stage, const Tensor& patch_tokens) override {
    return bank_.at(stage).logits(features(stage, patch_tokens));
  }

  std::vector<double> keep_scores(std::size_t stage, const Tensor& patch_tokens) override {
    return bank_.at(stage).score(features(stage, patch_tokens)).to_vector();
  }

  const CrossLayerAccumulator& accumulator() const { return acc_; }

 private:
  const PredictorBank& bank_;
  CrossLayerAccumulator acc_;
  std::vector<Tensor> last_maps_;
};

/// Non-learned scorer: mean class-token attention over heads and layers.
class HeuristicScorer : public StageScorer {
 public:
  void observe(const std::vector<Tensor>& maps) override { state_.observe(maps); }

  void shrink(std::span<const std::size_t> keep) override {
    std::vector<std::size_t> patches;
    for (std::size_t i = 1; i < keep.size(); ++i) patches.push_back(keep[i] - 1);
    state_.shrink(patches);
  }

  Tensor keep_logits(std::size_t, const Tensor&) override {
    throw ContractError("the attention-averaging heuristic has no trainable keep logits");
  }

  std::vector<double> keep_scores(std::size_t, const Tensor& patch_tokens) override {
    std::vector<double> s = state_.scores();
    if (s.size() != patch_tokens.dim(0)) throw ContractError("heuristic scores are misaligned with the tokens");
    return s;
  }

 private:
  HeuristicState state_;
};

/// Supplies Gumbel noise (2 values per token) for stage k with n tokens.
using NoiseSource = std::function<std::vector<double>(std::size_t stage, std::size_t tokens)>;

struct EngineOptions {
  GumbelSettings gumbel;
  Rng* rng = nullptr;        // used when no noise source is given
  NoiseSource noise;         // optional fixed noise
};

struct EngineResult {
  Tensor logits;
  RetentionState retention;
  std::vector<Tensor> rate_estimates;              // differentiable kept fraction per stage
  std::vector<std::size_t> layer_tokens;           // tokens incl. class entering each layer
  std::vector<std::size_t> stage_tokens;           // patch tokens scored at each stage
  TokenSequence final_tokens;                      // normalised last-layer tokens
  std::vector<std::size_t> retained_positions;     // original indices retained at the end
  std::vector<std::vector<Tensor>> maps;           // [layer][head], retained tokens only

  /// Final retained patch-token embeddings, one row per token.
  Tensor retained_patch_tokens() const {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < final_tokens.positions.size(); ++r) {
      const std::size_t pos = final_tokens.positions[r];
      if (pos != 0 && std::binary_search(retained_positions.begin(), retained_positions.end(), pos)) rows.push_back(r);
    }
    return gather_rows(final_tokens.tokens, rows);
  }
};

/// One forward pass with token sparsification. At each stage layer the scorer
/// sees the maps of the preceding layers, selects the tokens that continue,
/// and the stage layer is the first to run on the reduced set. Training masks
/// tokens (Gumbel-Softmax, shapes unchanged); inference removes them (top-k).
inline EngineResult run(const Image& image, const VisionTransformer& vit, StageScorer& scorer,
                        const SparsifyConfig& cfg, const EngineOptions& opt = {}) {
  const ViTConfig& vc = vit.config();
  cfg.validate(vc.depth);
  const std::size_t n0 = vc.num_patches(), total = n0 + 1, K = cfg.stages();
  const bool training = cfg.mode == EngineMode::training;
  const std::vector<std::size_t> counts = target_counts(n0, cfg.rho, K);

  EngineResult res;
  TokenSequence seq = vit.embed(image);
  std::vector<std::size_t> ret(total);
  for (std::size_t i = 0; i < total; ++i) ret[i] = i;
  Tensor keep_prev;  // B_{k-1} over the full sequence (training)
  std::vector<std::vector<bool>> masks;
  std::size_t stage = 0;

  auto rate_of = [&](const Tensor& b) {
    return scale(sum(slice(reshape(b, Shape{1, total}), 0, 1, 1, total)), 1.0 / static_cast<double>(n0));
  };

  for (std::size_t l = 1; l <= vc.depth; ++l) {
    if (stage < K && cfg.stage_layers[stage] == l) {
      const std::size_t current = ret.size() - 1;
      const std::size_t target = counts[stage];
      res.stage_tokens.push_back(current);
      // Masked training scores every stage whose target drops patches; the
      // per-sample hard count only decides physical removal at inference.
      const bool active = training ? target < n0 && current > 0 : target < current;
      if (active) {
        std::vector<std::size_t> patch_rows;
        if (training) {
          patch_rows.assign(ret.begin() + 1, ret.end());
        } else {
          for (std::size_t r = 1; r < seq.size(); ++r) patch_rows.push_back(r);
        }
        Tensor patches = gather_rows(seq.tokens, patch_rows);
        std::vector<std::size_t> keep_local{0};
        if (training) {
          Tensor logits = scorer.keep_logits(stage, patches);
          std::vector<double> noise;
          if (opt.noise) {
            noise = opt.noise(stage, current);
          } else {
            if (opt.rng == nullptr) throw ContractError("training mode needs a random generator or a noise source");
            noise = gumbel_noise(2 * current, *opt.rng);
          }
          GumbelSample sample = gumbel_mask(logits, opt.gumbel.tau, opt.gumbel.hard, noise);
          Tensor with_cls = reshape(concat_rows({Tensor(Shape{1, 1}, 1.0), reshape(sample.keep, Shape{current, 1})}),
                                    Shape{current + 1});
          Tensor full = scatter(with_cls, ret, total);
          keep_prev = keep_prev.defined() ? mul(full, keep_prev) : full;
          for (std::size_t i = 0; i < current; ++i)
            if (!opt.gumbel.hard || sample.hard[i] > 0.0) keep_local.push_back(i + 1);
        } else {
          std::vector<double> scores = scorer.keep_scores(stage, patches);
          std::vector<bool> sel = topk_select(scores, target, std::vector<bool>(current, true));
          for (std::size_t i = 0; i < current; ++i)
            if (sel[i]) keep_local.push_back(i + 1);
          std::vector<bool> rows(seq.size(), false);
          for (std::size_t r : keep_local) rows[r] = true;
          seq = physical_prune(seq, rows);
        }
        if (keep_local.size() < ret.size()) {
          scorer.shrink(keep_local);
          std::vector<std::size_t> next;
          for (std::size_t r : keep_local) next.push_back(ret[r]);
          ret = std::move(next);
        }
      }
      std::vector<bool> mask(total, false);
      for (std::size_t p : ret) mask[p] = true;
      masks.push_back(std::move(mask));
      if (training) {
        res.rate_estimates.push_back(keep_prev.defined() ? rate_of(keep_prev)
                                                         : Tensor::scalar(static_cast<double>(ret.size() - 1) /
                                                                          static_cast<double>(n0)));
      }
      ++stage;
    }

    res.layer_tokens.push_back(ret.size());
    VisionTransformer::BlockOutput blk = vit.block(l, seq.tokens, keep_prev.defined() ? &keep_prev : nullptr);
    seq.tokens = blk.tokens;
    if (training && ret.size() < total) {
      for (Tensor& m : blk.maps) m = gather_square(m, ret);
    }
    scorer.observe(blk.maps);
    res.maps.push_back(std::move(blk.maps));
  }

  seq.tokens = vit.final_norm(seq.tokens);
  res.logits = vit.classify(seq.tokens);
  res.final_tokens = seq;
  res.retained_positions = ret;
  if (K > 0) {
    res.retention = compose_hierarchy(masks);
    for (std::size_t k = 1; k <= K; ++k) res.retention.target_rates.push_back(std::pow(cfg.rho, static_cast<double>(k)));
  }
  return res;
}

}  // namespace spot
