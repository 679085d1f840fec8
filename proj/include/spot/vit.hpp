#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spot/nn.hpp"

namespace spot {

struct ViTConfig {
  std::size_t depth = 8;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t patch_size = 8;
  std::size_t image_size = 64;
  std::size_t channels = 1;
  double mlp_ratio = 4.0;
  std::size_t num_classes = 4;

  void validate() const {
    if (depth == 0) throw ConfigError("depth must be positive");
    if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                        std::to_string(heads));
    }
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    if (channels == 0) throw ConfigError("channels must be positive");
    if (!(mlp_ratio >= 0.0)) throw ConfigError("mlp_ratio must be nonnegative");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t mlp_hidden() const { return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim))); }

  static ViTConfig deit_small() { return {12, 384, 6, 16, 224, 3, 4.0, 1000}; }
  static ViTConfig deit_tiny() { return {12, 192, 3, 16, 224, 3, 4.0, 1000}; }
  static ViTConfig desk() { return {}; }
};

/// Height x width x channels image, row-major with channels innermost.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  double at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
};

/// Token matrix plus the original sequence index of each row. Row 0 is the
/// class token and always carries original index 0.
struct TokenSequence {
  Tensor tokens;
  std::vector<std::size_t> positions;

  std::size_t size() const { return positions.size(); }
  std::size_t patch_count() const { return positions.size() - 1; }
};

/// Rows of `seq` whose mask entry is true, order preserved.
inline TokenSequence physical_prune(const TokenSequence& seq, const std::vector<bool>& row_mask) {
  if (row_mask.size() != seq.size()) {
    throw DimensionError("physical_prune: mask length " + std::to_string(row_mask.size()) + " vs " +
                         std::to_string(seq.size()) + " tokens");
  }
  if (!row_mask[0]) throw ContractError("physical_prune: the class token must be retained");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < row_mask.size(); ++i)
    if (row_mask[i]) rows.push_back(i);
  if (rows.size() == seq.size()) return seq;
  TokenSequence out;
  out.tokens = gather_rows(seq.tokens, rows);
  for (std::size_t r : rows) out.positions.push_back(seq.positions[r]);
  return out;
}

/// Stage masks keyed by 1-based layer; each mask covers the original
/// sequence (class token at 0) and applies from that layer onward.
using RetentionHooks = std::map<std::size_t, std::vector<bool>>;

enum class MaskMode { masked, pruned };

/// DeiT-style pre-norm Vision Transformer that exposes per-head attention maps.
class VisionTransformer {
 public:
  struct Block {
    LayerNorm norm1;
    Linear qkv;
    Linear proj;
    LayerNorm norm2;
    Linear fc1;
    Linear fc2;
  };

  struct BlockOutput {
    Tensor tokens;
    std::vector<Tensor> maps;  // one (n x n) map per head
  };

  struct ForwardResult {
    Tensor logits;
    std::vector<std::vector<Tensor>> maps;  // [layer][head]
    TokenSequence final_tokens;              // after the final norm
  };

  VisionTransformer() = default;

  VisionTransformer(ViTConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.embed_dim;
    patch_embed_ = Linear::init(cfg_.patch_dim(), d, rng);
    cls_token_ = trunc_normal_param(Shape{1, d}, rng);
    pos_embed_ = trunc_normal_param(Shape{cfg_.num_patches() + 1, d}, rng);
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      Block b;
      b.norm1 = LayerNorm::init(d);
      b.qkv = Linear::init(d, 3 * d, rng);
      b.proj = Linear::init(d, d, rng);
      b.norm2 = LayerNorm::init(d);
      b.fc1 = Linear::init(d, cfg_.mlp_hidden(), rng);
      b.fc2 = Linear::init(cfg_.mlp_hidden(), d, rng);
      blocks_.push_back(std::move(b));
    }
    norm_ = LayerNorm::init(d);
    head_ = Linear::init(d, cfg_.num_classes, rng);
  }

  const ViTConfig& config() const { return cfg_; }

  /// Patch rows of an image, each flattened as (py, px, channel).
  Tensor patchify(const Image& image) const {
    if (image.height != cfg_.image_size || image.width != cfg_.image_size || image.channels != cfg_.channels ||
        image.pixels.size() != image.height * image.width * image.channels) {
      throw ConfigError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                        std::to_string(image.channels) + " does not match the model input " +
                        std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) + "x" +
                        std::to_string(cfg_.channels));
    }
    const std::size_t p = cfg_.patch_size, g = cfg_.grid(), c = cfg_.channels;
    Tensor patches(Shape{cfg_.num_patches(), cfg_.patch_dim()});
    auto out = patches.mutable_data();
    std::size_t k = 0;
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            for (std::size_t ch = 0; ch < c; ++ch) out[k++] = image.at(gy * p + py, gx * p + px, ch);
    return patches;
  }

  TokenSequence embed(const Image& image) const {
    Tensor patches = patch_embed_(patchify(image));
    Tensor tokens = add(concat_rows({cls_token_, patches}), pos_embed_);
    TokenSequence seq{tokens, {}};
    seq.positions.resize(cfg_.num_patches() + 1);
    for (std::size_t i = 0; i < seq.positions.size(); ++i) seq.positions[i] = i;
    return seq;
  }

  /// One transformer block (1-based layer). `key_mask`, when given, weights
  /// the softmax columns; a zero entry hides that token from every query.
  BlockOutput block(std::size_t layer, const Tensor& tokens, const Tensor* key_mask = nullptr) const {
    if (layer == 0 || layer > blocks_.size()) throw ConfigError("no layer " + std::to_string(layer));
    const Block& b = blocks_[layer - 1];
    const std::size_t n = tokens.dim(0), d = cfg_.embed_dim, dh = cfg_.head_dim();
    if (key_mask && key_mask->numel() != n) {
      throw DimensionError("attention mask length " + std::to_string(key_mask->numel()) + " vs " +
                           std::to_string(n) + " tokens");
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor qkv = b.qkv(b.norm1(tokens));
    BlockOutput out;
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Tensor q = slice(qkv, 0, n, h * dh, (h + 1) * dh);
      Tensor k = slice(qkv, 0, n, d + h * dh, d + (h + 1) * dh);
      Tensor v = slice(qkv, 0, n, 2 * d + h * dh, 2 * d + (h + 1) * dh);
      Tensor scores = scale(matmul_transposed(q, k), inv_sqrt);
      Tensor attn = key_mask ? masked_softmax(scores, *key_mask) : softmax_lastdim(scores);
      heads.push_back(matmul(attn, v));
      out.maps.push_back(attn);
    }
    Tensor x = add(tokens, b.proj(concat_cols(heads)));
    out.tokens = add(x, b.fc2(gelu(b.fc1(b.norm2(x)))));
    return out;
  }

  BlockOutput block(std::size_t layer, const Tensor& tokens, const std::vector<bool>& mask) const {
    if (mask.empty() || !mask[0]) throw ContractError("attention mask must retain the class token");
    Tensor m(Shape{mask.size()});
    for (std::size_t i = 0; i < mask.size(); ++i) m.mutable_data()[i] = mask[i] ? 1.0 : 0.0;
    return block(layer, tokens, &m);
  }

  Tensor final_norm(const Tensor& tokens) const { return norm_(tokens); }

  /// Class logits from already-normalised tokens.
  Tensor classify(const Tensor& normed_tokens) const {
    return reshape(head_(slice(normed_tokens, 0, 1, 0, cfg_.embed_dim)), Shape{cfg_.num_classes});
  }

  /// Full forward pass. Hooks install fixed retention masks; in masked mode
  /// the hidden tokens stay in the sequence, in pruned mode they are removed.
  ForwardResult forward(const Image& image, const RetentionHooks& hooks = {}, MaskMode mode = MaskMode::masked) const {
    const std::size_t total = cfg_.num_patches() + 1;
    for (const auto& [layer, mask] : hooks) {
      if (layer == 0 || layer > cfg_.depth) throw ConfigError("retention hook at nonexistent layer " + std::to_string(layer));
      if (mask.size() != total) throw ConfigError("retention hook mask must cover all " + std::to_string(total) + " tokens");
      if (!mask[0]) throw ContractError("retention hook drops the class token");
    }
    TokenSequence seq = embed(image);
    ForwardResult result;
    std::vector<bool> active(total, true);
    Tensor key_mask;
    for (std::size_t l = 1; l <= cfg_.depth; ++l) {
      if (auto it = hooks.find(l); it != hooks.end()) {
        for (std::size_t i = 0; i < total; ++i) active[i] = active[i] && it->second[i];
        if (mode == MaskMode::pruned) {
          std::vector<bool> rows(seq.size());
          for (std::size_t r = 0; r < seq.size(); ++r) rows[r] = active[seq.positions[r]];
          seq = physical_prune(seq, rows);
        } else {
          key_mask = Tensor(Shape{total});
          for (std::size_t i = 0; i < total; ++i) key_mask.mutable_data()[i] = active[i] ? 1.0 : 0.0;
        }
      }
      BlockOutput blk = block(l, seq.tokens, key_mask.defined() ? &key_mask : nullptr);
      seq.tokens = blk.tokens;
      result.maps.push_back(std::move(blk.maps));
    }
    seq.tokens = final_norm(seq.tokens);
    result.logits = classify(seq.tokens);
    result.final_tokens = seq;
    return result;
  }

  ParamList parameters() const {
    ParamList out;
    patch_embed_.collect("backbone.patch_embed", out);
    out.push_back({"backbone.cls_token", cls_token_});
    out.push_back({"backbone.pos_embed", pos_embed_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      const std::string p = "backbone.blocks." + std::to_string(l);
      blocks_[l].norm1.collect(p + ".norm1", out);
      blocks_[l].qkv.collect(p + ".attn.qkv", out);
      blocks_[l].proj.collect(p + ".attn.proj", out);
      blocks_[l].norm2.collect(p + ".norm2", out);
      blocks_[l].fc1.collect(p + ".mlp.fc1", out);
      blocks_[l].fc2.collect(p + ".mlp.fc2", out);
    }
    norm_.collect("backbone.norm", out);
    head_.collect("backbone.head", out);
    return out;
  }

  /// Independent copy of the weights.
  VisionTransformer clone() const {
    VisionTransformer copy(cfg_, 0);
    copy_values(parameters(), copy.parameters());
    return copy;
  }

 private:
  ViTConfig cfg_;
  Linear patch_embed_;
  Tensor cls_token_;
  Tensor pos_embed_;
  std::vector<Block> blocks_;
  LayerNorm norm_;
  Linear head_;
};

}  // namespace spot
