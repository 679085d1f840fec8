#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "spot/ops.hpp"

namespace spot {

using Rng = std::mt19937_64;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParamList = std::vector<NamedTensor>;

/// Normal(0, std) restricted to [-2 std, 2 std] by rejection.
inline double truncated_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (;;) {
    const double z = normal(rng);
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

inline Tensor trunc_normal_param(Shape shape, Rng& rng, double stddev = 0.02) {
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = truncated_normal(rng, stddev);
  t.set_requires_grad(true);
  return t;
}

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for a weight stored as [in x out].
inline Tensor fan_in_param(Shape shape, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.at(0)));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = u(rng);
  t.set_requires_grad(true);
  return t;
}

inline Tensor constant_param(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

/// y = x W + b with W stored as [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    return Linear{trunc_normal_param(Shape{in, out}, rng), constant_param(Shape{out}, 0.0)};
  }

  /// Variance-preserving start for small stacked heads.
  static Linear init_fan_in(std::size_t in, std::size_t out, Rng& rng) {
    return Linear{fan_in_param(Shape{in, out}, rng), constant_param(Shape{out}, 0.0)};
  }

  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm init(std::size_t dim) {
    return LayerNorm{constant_param(Shape{dim}, 1.0), constant_param(Shape{dim}, 0.0)};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

/// Deep copy of parameter values from `src` into `dst`, matched by position.
inline void copy_values(const ParamList& src, const ParamList& dst) {
  if (src.size() != dst.size()) throw DimensionError("copy_values: parameter lists differ in length");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape() || src[i].name != dst[i].name) {
      throw DimensionError("copy_values: parameter " + src[i].name + " does not match " + dst[i].name);
    }
    Tensor d = dst[i].tensor;
    auto from = src[i].tensor.data();
    std::copy(from.begin(), from.end(), d.mutable_data().begin());
  }
}

}  // namespace spot
