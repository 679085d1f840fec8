#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "spot/spot.hpp"

namespace spot::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

/// Random row-stochastic n x n matrix.
inline Tensor random_stochastic(std::size_t n, Rng& rng) {
  Tensor t = random_tensor(Shape{n, n}, rng, 0.01, 1.0);
  auto d = t.mutable_data();
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += d[r * n + c];
    for (std::size_t c = 0; c < n; ++c) d[r * n + c] /= s;
  }
  return t;
}

inline double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3}); }

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Largest relative error between tape gradients and central differences.
inline double max_grad_error(const ScalarFn& f, std::vector<Tensor> inputs, double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    for (Tensor& t : inputs) {
      t.zero_grad();
      t.set_requires_grad(true);
    }
    Tensor loss = f(inputs);
    tape.backward(loss);
    for (const Tensor& t : inputs) {
      auto g = t.grad();
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0);
    }
  }
  NoGradScope ng;
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto data = inputs[i].mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + h;
      const double up = f(inputs).item();
      data[j] = orig - h;
      const double down = f(inputs).item();
      data[j] = orig;
      worst = std::max(worst, rel_error(analytic[i][j], (up - down) / (2.0 * h)));
    }
  }
  for (Tensor& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
  return worst;
}

/// sum(out * w) with fixed weights, turning any output into a scalar.
inline Tensor weighted(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

inline Image random_image(const ViTConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img{cfg.image_size, cfg.image_size, cfg.channels, std::vector<double>(cfg.image_size * cfg.image_size * cfg.channels)};
  for (double& v : img.pixels) v = u(rng);
  return img;
}

/// Small model for fast tests.
inline ViTConfig tiny_config(std::size_t depth = 4) {
  ViTConfig c;
  c.depth = depth;
  c.embed_dim = 16;
  c.heads = 2;
  c.patch_size = 4;
  c.image_size = 16;
  c.channels = 1;
  c.mlp_ratio = 2.0;
  c.num_classes = 3;
  return c;
}

}  // namespace spot::test
