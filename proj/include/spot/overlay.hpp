#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "spot/predictor.hpp"
#include "spot/vit.hpp"

namespace spot {

/// Darkening per stage: tokens dropped at stage k are multiplied by shades[k],
/// retained tokens are left as they are.
struct MaskOverlay {
  std::vector<double> shades{0.25, 0.5, 0.75};
};

/// Stage (1-based) at which each patch was dropped, 0 if it survived.
inline std::vector<std::size_t> pruned_at(const std::vector<std::vector<bool>>& masks, std::size_t patches) {
  std::vector<std::size_t> out(patches, 0);
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (masks[k].size() != patches + 1) {
      throw ContractError("overlay: mask " + std::to_string(k + 1) + " covers " + std::to_string(masks[k].size()) +
                          " tokens, image grid has " + std::to_string(patches + 1));
    }
    for (std::size_t p = 0; p < patches; ++p)
      if (!masks[k][p + 1] && out[p] == 0) out[p] = k + 1;
  }
  return out;
}

/// Binary PPM (P6) of `image` with pruned patches shaded. Pixel values are
/// clamped to [0, 1]; all scaling after that is integer arithmetic.
inline std::string render_overlay(const Image& image, std::size_t patch_size, const std::vector<std::vector<bool>>& masks,
                                  const MaskOverlay& overlay = {}) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("overlay: images need 1 or 3 channels");
  if (patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0) {
    throw ContractError("overlay: patch size does not tile the image");
  }
  if (masks.size() > overlay.shades.size()) {
    throw ContractError("overlay: " + std::to_string(masks.size()) + " stages but only " +
                        std::to_string(overlay.shades.size()) + " shade levels");
  }
  const std::size_t gw = image.width / patch_size, gh = image.height / patch_size;
  const std::vector<std::size_t> stage = pruned_at(masks, gw * gh);
  std::vector<std::uint32_t> q(overlay.shades.size());
  for (std::size_t k = 0; k < q.size(); ++k) q[k] = static_cast<std::uint32_t>(std::lround(overlay.shades[k] * 256.0));

  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  out.reserve(out.size() + image.width * image.height * 3);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const std::size_t s = stage[(y / patch_size) * gw + x / patch_size];
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = image.at(y, x, image.channels == 1 ? 0 : c);
        auto base = static_cast<std::uint32_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        if (s > 0) base = (base * q[s - 1] + 128) >> 8;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::min<std::uint32_t>(base, 255))));
      }
    }
  }
  return out;
}

}  // namespace spot
