#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "spot/checkpoint.hpp"
#include "spot/vit.hpp"

// Dataset file: "SPOTDS1" then records of (u16 label, little-endian;
// height*width*channels float64 pixels, row-major). No other header.

namespace spot {

inline constexpr std::string_view kDatasetMagic = "SPOTDS1";

enum class Background { low_noise, uniform_noise };

/// Textured square objects on a plain or noisy background. The object covers
/// object_size^2 pixels aligned to the patch grid; its texture names the class.
struct SyntheticDatasetSpec {
  std::size_t image_size = 64;
  std::size_t channels = 1;
  std::size_t classes = 4;
  std::size_t samples = 512;
  std::size_t object_size = 16;
  std::size_t grid_align = 8;
  Background background = Background::low_noise;
  double noise = 0.05;
  std::uint64_t seed = 7;

  void validate() const {
    if (classes < 2 || classes > 8) throw ConfigError("synthetic data supports 2 to 8 classes");
    if (image_size == 0 || channels == 0) throw ConfigError("image size and channels must be positive");
    if (object_size == 0 || object_size > image_size) throw ConfigError("object must fit inside the image");
    if (grid_align == 0 || image_size % grid_align != 0) throw ConfigError("grid alignment must divide the image size");
    if (noise < 0.0) throw ConfigError("noise must be nonnegative");
  }
};

struct Sample {
  Image image;
  std::size_t label = 0;
};

using Dataset = std::vector<Sample>;

/// Texture intensity of class c at object-local pixel (y, x).
inline double texture(std::size_t c, std::size_t y, std::size_t x) {
  switch (c) {
    case 0: return (y / 2) % 2 == 0 ? 1.0 : 0.0;          // horizontal stripes
    case 1: return (x / 2) % 2 == 0 ? 1.0 : 0.0;          // vertical stripes
    case 2: return ((x / 2) + (y / 2)) % 2 == 0 ? 1.0 : 0.0;  // checker
    case 3: return 1.0;                                   // solid
    case 4: return ((x + y) / 2) % 2 == 0 ? 1.0 : 0.0;    // diagonal
    case 5: return y % 2 == 0 ? 1.0 : 0.0;                // fine horizontal
    case 6: return x % 2 == 0 ? 1.0 : 0.0;                // fine vertical
    default: return ((x + 64 - y % 64) / 2) % 2 == 0 ? 1.0 : 0.0;  // anti-diagonal
  }
}

inline Dataset generate(const SyntheticDatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const std::size_t slots = (spec.image_size - spec.object_size) / spec.grid_align + 1;
  std::uniform_int_distribution<std::size_t> slot(0, slots - 1);

  Dataset out;
  out.reserve(spec.samples);
  for (std::size_t i = 0; i < spec.samples; ++i) {
    Sample s;
    s.label = i % spec.classes;
    const std::size_t S = spec.image_size, C = spec.channels;
    s.image = Image{S, S, C, std::vector<double>(S * S * C)};
    for (double& v : s.image.pixels) {
      v = spec.background == Background::uniform_noise ? uniform(rng) : 0.3 + spec.noise * gauss(rng);
    }
    const std::size_t oy = slot(rng) * spec.grid_align, ox = slot(rng) * spec.grid_align;
    for (std::size_t y = 0; y < spec.object_size; ++y)
      for (std::size_t x = 0; x < spec.object_size; ++x)
        for (std::size_t c = 0; c < C; ++c) {
          const double base = 0.1 + 0.8 * texture(s.label, y, x);
          s.image.pixels[((oy + y) * S + ox + x) * C + c] = base + spec.noise * gauss(rng);
        }
    out.push_back(std::move(s));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline std::string encode_dataset(const Dataset& data) {
  std::string buf(kDatasetMagic);
  for (const auto& s : data) {
    if (s.label > 0xFFFF) throw ContractError("dataset label does not fit in 16 bits");
    detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(s.label));
    for (double v : s.image.pixels) detail::put_f64(buf, v);
  }
  return buf;
}

/// The format stores no geometry; the caller supplies it.
inline Dataset decode_dataset(const std::string& bytes, std::size_t image_size, std::size_t channels,
                              const std::string& source = "dataset") {
  detail::Reader r(bytes, source);
  if (r.get_bytes(kDatasetMagic.size()) != kDatasetMagic) throw LoadError(source + ": bad magic header");
  const std::size_t pixels = image_size * image_size * channels;
  const std::size_t record = 2 + 8 * pixels;
  if (r.remaining() % record != 0) {
    throw LoadError(source + ": size does not match " + std::to_string(image_size) + "x" + std::to_string(image_size) +
                    "x" + std::to_string(channels) + " records");
  }
  Dataset out;
  while (!r.done()) {
    Sample s;
    s.label = r.get<std::uint16_t>();
    s.image = Image{image_size, image_size, channels, std::vector<double>(pixels)};
    for (double& v : s.image.pixels) v = r.get_f64();
    out.push_back(std::move(s));
  }
  return out;
}

inline void save_dataset(const std::string& path, const Dataset& data) { detail::write_file(path, encode_dataset(data)); }

inline Dataset load_dataset(const std::string& path, std::size_t image_size, std::size_t channels) {
  return decode_dataset(detail::read_file(path), image_size, channels, path);
}

}  // namespace spot
