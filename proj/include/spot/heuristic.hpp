#pragma once

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "spot/ops.hpp"
#include "spot/predictor.hpp"

namespace spot {

/// Class-token attention averaged over heads and every layer seen so far,
/// one entry per retained patch token.
class HeuristicState {
 public:
  /// Adds one layer of maps (one per head, over the retained tokens).
  void observe(const std::vector<Tensor>& maps) {
    for (const Tensor& map : maps) {
      if (map.rank() != 2 || map.dim(0) != map.dim(1) || map.dim(0) < 2) {
        throw DimensionError("heuristic: attention map must be square with patch tokens");
      }
      const std::size_t n = map.dim(0) - 1;
      if (sums_.empty() && contributions_ == 0) sums_.assign(n, 0.0);
      if (sums_.size() != n) throw ContractError("heuristic: map size drifted without a prune");
      auto row = map.data();
      for (std::size_t t = 0; t < n; ++t) sums_[t] += row[1 + t];
      ++contributions_;
    }
  }

  /// Keeps patch entries `keep` (local patch indices, ascending).
  void shrink(std::span<const std::size_t> keep) {
    std::vector<double> next;
    next.reserve(keep.size());
    for (std::size_t i : keep) next.push_back(sums_.at(i));
    sums_ = std::move(next);
  }

  std::vector<double> scores() const {
    if (contributions_ == 0) throw ContractError("heuristic: no attention maps observed");
    std::vector<double> out(sums_);
    for (double& v : out) v /= static_cast<double>(contributions_);
    return out;
  }

  std::size_t contributions() const { return contributions_; }
  std::size_t size() const { return sums_.size(); }

 private:
  std::vector<double> sums_;
  std::size_t contributions_ = 0;
};

/// Mean cls_out over a stack of layers, each a list of per-head maps.
inline std::vector<double> heuristic_score(const std::vector<std::vector<Tensor>>& layers) {
  HeuristicState state;
  for (const auto& maps : layers) state.observe(maps);
  return state.scores();
}

/// Same selection rule as the learned predictor's top-k.
inline std::vector<bool> heuristic_prune(std::span<const double> scores, std::size_t target_count,
                                         const std::vector<bool>& prev_mask) {
  return topk_select(scores, target_count, prev_mask);
}

/// Sample variance, over `trials`, of the mean of `layers` noisy observations
/// R + eps_l with independent eps_l ~ N(0, noise_std^2).
inline double variance_reduction_trial(double noise_std, std::size_t layers, std::size_t trials, Rng& rng) {
  if (layers < 1) throw ContractError("variance_reduction_trial: needs at least one layer");
  if (trials < 1000) throw ContractError("variance_reduction_trial: needs at least 1000 trials");
  std::normal_distribution<double> noise(0.0, noise_std);
  const double relevance = 0.5;
  double mean = 0.0, m2 = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    double s = 0.0;
    for (std::size_t l = 0; l < layers; ++l) s += relevance + noise(rng);
    const double estimate = s / static_cast<double>(layers);
    const double delta = estimate - mean;
    mean += delta / static_cast<double>(t + 1);
    m2 += delta * (estimate - mean);
  }
  return m2 / static_cast<double>(trials - 1);
}

}  // namespace spot
