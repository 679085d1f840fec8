#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spot/ops.hpp"

namespace spot {

/// Class-token row/column and the patch-patch block of one attention map.
/// The class self-interaction (top-left element) is in none of them.
struct MapPartition {
  Tensor cls_out;  // [N]  map[0, 1..N]
  Tensor cls_in;   // [N]  map[1..N, 0]
  Tensor non_cls;  // [N x N]
};

inline MapPartition partition(const Tensor& map) {
  if (map.rank() != 2 || map.dim(0) != map.dim(1)) {
    throw DimensionError("partition: attention map must be square, got " + shape_str(map.shape()));
  }
  const std::size_t total = map.dim(0);
  if (total < 2) throw ContractError("partition: map has no patch tokens");
  const std::size_t n = total - 1;
  return MapPartition{reshape(slice(map, 0, 1, 1, total), Shape{n}),
                      reshape(slice(map, 1, total, 0, 1), Shape{n}),
                      slice(map, 1, total, 1, total)};
}

struct Moments {
  Tensor mu_row;
  Tensor mu_col;
  Tensor var_row;
  Tensor var_col;
};

/// Population mean and variance of every row and column.
inline Moments row_col_moments(const Tensor& non_cls) {
  if (non_cls.rank() != 2 || non_cls.dim(0) != non_cls.dim(1) || non_cls.dim(0) == 0) {
    throw DimensionError("row_col_moments: expected a non-empty square matrix, got " + shape_str(non_cls.shape()));
  }
  return Moments{row_mean(non_cls), col_mean(non_cls), row_var(non_cls), col_var(non_cls)};
}

/// Whether the spread columns hold the variance or the standard deviation.
enum class Spread { variance, stddev };

inline constexpr std::size_t kDescriptorColumns = 6;

inline const std::vector<std::string>& descriptor_column_names() {
  static const std::vector<std::string> names = {"cls_out", "cls_in", "mu_row", "mu_col", "var_row", "var_col"};
  return names;
}

/// N x 6 descriptor [cls_out, cls_in, mu_row, mu_col, var_row, var_col].
inline Tensor build_descriptor(const MapPartition& p, const Moments& m, Spread spread = Spread::variance) {
  const std::size_t n = p.cls_out.numel();
  for (const Tensor* t : {&p.cls_in, &m.mu_row, &m.mu_col, &m.var_row, &m.var_col}) {
    if (t->numel() != n) throw DimensionError("build_descriptor: inconsistent token counts");
  }
  auto column = [n](const Tensor& v) { return reshape(v, Shape{n, 1}); };
  Tensor vr = spread == Spread::variance ? m.var_row : sqrt(m.var_row);
  Tensor vc = spread == Spread::variance ? m.var_col : sqrt(m.var_col);
  return concat_cols({column(p.cls_out), column(p.cls_in), column(m.mu_row), column(m.mu_col), column(vr), column(vc)});
}

inline Tensor describe_map(const Tensor& map, Spread spread = Spread::variance) {
  MapPartition p = partition(map);
  return build_descriptor(p, row_col_moments(p.non_cls), spread);
}

/// Elementwise mean over heads.
inline Tensor head_average(const std::vector<Tensor>& descriptors) {
  if (descriptors.empty()) throw ContractError("head_average: no descriptors");
  Tensor acc = descriptors.front();
  for (std::size_t h = 1; h < descriptors.size(); ++h) {
    if (descriptors[h].shape() != acc.shape()) throw DimensionError("head_average: descriptor shapes differ");
    acc = add(acc, descriptors[h]);
  }
  return descriptors.size() == 1 ? acc : scale(acc, 1.0 / static_cast<double>(descriptors.size()));
}

/// Running elementwise mean and population variance of attention maps across
/// layers, one pair per head, aligned to the currently retained tokens.
class CrossLayerAccumulator {
 public:
  explicit CrossLayerAccumulator(std::size_t heads = 1) : mean_(heads), m2_(heads) {}

  std::size_t heads() const { return mean_.size(); }
  std::size_t layer_count() const { return layers_; }
  /// Current side length (retained tokens + class), 0 before the first layer.
  std::size_t size() const { return layers_ == 0 ? 0 : mean_.front().dim(0); }

  /// Welford update with one map per head.
  void accumulate(const std::vector<Tensor>& maps) {
    if (maps.size() != mean_.size()) {
      throw DimensionError("accumulate: got " + std::to_string(maps.size()) + " maps for " +
                           std::to_string(mean_.size()) + " heads");
    }
    for (const Tensor& m : maps) {
      if (m.rank() != 2 || m.dim(0) != m.dim(1)) throw DimensionError("accumulate: map is not square");
      if (layers_ > 0 && m.shape() != mean_.front().shape()) {
        throw ContractError("accumulate: map " + shape_str(m.shape()) + " does not match accumulator " +
                            shape_str(mean_.front().shape()) + " and no prune was recorded");
      }
    }
    ++layers_;
    const double inv_n = 1.0 / static_cast<double>(layers_);
    for (std::size_t h = 0; h < maps.size(); ++h) {
      if (layers_ == 1) {
        mean_[h] = maps[h];
        m2_[h] = Tensor(maps[h].shape());
        continue;
      }
      Tensor delta = sub(maps[h], mean_[h]);
      mean_[h] = add(mean_[h], scale(delta, inv_n));
      m2_[h] = add(m2_[h], mul(delta, sub(maps[h], mean_[h])));
    }
  }

  void accumulate(const Tensor& map) { accumulate(std::vector<Tensor>{map}); }

  /// Restrict to rows/columns `keep` (local indices, must contain 0).
  void shrink(std::span<const std::size_t> keep) {
    if (keep.empty() || keep.front() != 0) throw ContractError("shrink: the class token must be kept");
    if (layers_ == 0 || keep.size() == size()) return;
    for (std::size_t h = 0; h < mean_.size(); ++h) {
      mean_[h] = gather_square(mean_[h], keep);
      m2_[h] = gather_square(m2_[h], keep);
    }
  }

  const Tensor& mean(std::size_t head) const { return mean_.at(head); }
  Tensor variance(std::size_t head) const {
    if (layers_ == 0) throw ContractError("variance: nothing accumulated");
    return scale(m2_.at(head), 1.0 / static_cast<double>(layers_));
  }

 private:
  std::vector<Tensor> mean_;
  std::vector<Tensor> m2_;
  std::size_t layers_ = 0;
};

/// Per-head descriptors of the current map (A), cross-layer mean (M) and
/// cross-layer variance (Sigma).
struct SourceDescriptors {
  std::vector<Tensor> A;
  std::vector<Tensor> M;
  std::vector<Tensor> S;
};

inline SourceDescriptors extract_descriptors(const std::vector<Tensor>& current_maps, const CrossLayerAccumulator& acc,
                                             Spread spread = Spread::variance) {
  if (current_maps.size() != acc.heads()) throw DimensionError("extract_descriptors: head count mismatch");
  SourceDescriptors out;
  for (std::size_t h = 0; h < current_maps.size(); ++h) {
    out.A.push_back(describe_map(current_maps[h], spread));
    out.M.push_back(describe_map(acc.mean(h), spread));
    out.S.push_back(describe_map(acc.variance(h), spread));
  }
  return out;
}

/// Which descriptor sources and columns enter the predictor features.
struct FeatureLayout {
  bool per_head = true;
  bool include_A = true;
  bool include_M = true;
  bool include_Sigma = true;
  bool include_mu = true;
  bool include_sigma = true;

  std::size_t sources() const { return std::size_t{include_A} + include_M + include_Sigma; }
  std::size_t columns_per_descriptor() const { return 2 + 2 * std::size_t{include_mu} + 2 * std::size_t{include_sigma}; }
  std::size_t stats_width(std::size_t heads) const {
    return sources() * columns_per_descriptor() * (per_head ? heads : 1);
  }
};

/// Feature matrix [z_global, z_local, D^A..., D^M..., D^Sigma...] with heads
/// in index order (or one head-averaged block per source). z_global/z_local
/// may be undefined when no token features are used.
inline Tensor assemble_features(const SourceDescriptors& d, const Tensor& z_global, const Tensor& z_local,
                                const FeatureLayout& layout) {
  std::vector<Tensor> parts;
  std::size_t n = 0;
  bool have_n = false;
  auto check_rows = [&](const Tensor& t) {
    if (!have_n) {
      n = t.dim(0);
      have_n = true;
    } else if (t.dim(0) != n) {
      throw ContractError("assemble_features: token count " + std::to_string(t.dim(0)) + " differs from " +
                          std::to_string(n));
    }
  };
  if (z_global.defined()) {
    check_rows(z_global);
    check_rows(z_local);
    parts.push_back(z_global);
    parts.push_back(z_local);
  }
  auto add_source = [&](const std::vector<Tensor>& heads) {
    if (heads.empty()) throw ContractError("assemble_features: empty head list");
    std::vector<Tensor> blocks = layout.per_head ? heads : std::vector<Tensor>{head_average(heads)};
    for (const Tensor& b : blocks) {
      check_rows(b);
      const std::size_t rows = b.dim(0);
      parts.push_back(slice(b, 0, rows, 0, 2));
      if (layout.include_mu) parts.push_back(slice(b, 0, rows, 2, 4));
      if (layout.include_sigma) parts.push_back(slice(b, 0, rows, 4, 6));
    }
  };
  if (layout.include_A) add_source(d.A);
  if (layout.include_M) add_source(d.M);
  if (layout.include_Sigma) add_source(d.S);
  if (parts.empty()) throw ContractError("assemble_features: no information source enabled");
  return concat_cols(parts);
}

}  // namespace spot
