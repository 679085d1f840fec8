#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "spot/tensor.hpp"

// Differentiable operations on Tensor. Each op computes its value eagerly and,
// when a tape is active and an input requires gradients, records an adjoint
// that accumulates into the inputs' gradient buffers.

namespace spot {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using MatMap = Eigen::Map<RowMatrix>;

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline void check_finite(const Tensor& out, const char* op) {
  for (double v : out.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
}

// Gradient sink for an input, or nullptr when the input is not tracked.
inline double* sink(const Tensor& t) {
  return t.requires_grad() ? t.impl()->grad_buffer() : nullptr;
}

template <typename Adjoint>
Tensor finish(Tensor out, const char* op, std::initializer_list<const Tensor*> inputs, Adjoint&& adjoint) {
  check_finite(out, op);
  if (tracking(inputs)) {
    out.set_requires_grad(true);
    Tape::active()->record(out.impl(), std::forward<Adjoint>(adjoint));
  }
  return out;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

/// Matrix product a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  auto o = out.impl();
  return detail::finish(out, "matmul", {&a, &b}, [a, b, o, m, k, n] {
    ConstMatMap g(o->grad.data(), m, n);
    if (double* ga = detail::sink(a)) MatMap(ga, m, k).noalias() += g * ConstMatMap(b.data().data(), k, n).transpose();
    if (double* gb = detail::sink(b)) MatMap(gb, k, n).noalias() += ConstMatMap(a.data().data(), m, k).transpose() * g;
  });
}

/// a[m x k] * b[n x k]^T without materialising the transpose.
inline Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_transposed");
  detail::require_rank2(b, "matmul_transposed");
  if (a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_transposed: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out(Shape{m, n});
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap(out.mutable_data().data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), n, k).transpose();
  auto o = out.impl();
  return detail::finish(out, "matmul_transposed", {&a, &b}, [a, b, o, m, k, n] {
    ConstMatMap g(o->grad.data(), m, n);
    if (double* ga = detail::sink(a)) MatMap(ga, m, k).noalias() += g * ConstMatMap(b.data().data(), n, k);
    if (double* gb = detail::sink(b)) MatMap(gb, n, k).noalias() += g.transpose() * ConstMatMap(a.data().data(), m, k);
  });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out(Shape{n, m});
  auto src = a.data();
  auto dst = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  auto o = out.impl();
  return detail::finish(out, "transpose", {&a}, [a, o, m, n] {
    double* ga = detail::sink(a);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += o->grad[j * m + i];
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  auto o = out.impl();
  return detail::finish(out, "add", {&a, &b}, [a, b, o] {
    if (double* ga = detail::sink(a))
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i];
    if (double* gb = detail::sink(b))
      for (std::size_t i = 0; i < o->grad.size(); ++i) gb[i] += o->grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
  auto o = out.impl();
  return detail::finish(out, "sub", {&a, &b}, [a, b, o] {
    if (double* ga = detail::sink(a))
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i];
    if (double* gb = detail::sink(b))
      for (std::size_t i = 0; i < o->grad.size(); ++i) gb[i] -= o->grad[i];
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
  auto o = out.impl();
  return detail::finish(out, "mul", {&a, &b}, [a, b, o] {
    auto x = a.data(), y = b.data();
    if (double* ga = detail::sink(a))
      for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i] * y[i];
    if (double* gb = detail::sink(b))
      for (std::size_t i = 0; i < o->grad.size(); ++i) gb[i] += o->grad[i] * x[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  auto x = a.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * c;
  auto o = out.impl();
  return detail::finish(out, "scale", {&a}, [a, o, c] {
    double* ga = detail::sink(a);
    for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i] * c;
  });
}

/// x[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_bias");
  if (bias.numel() != x.dim(1)) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor out(x.shape());
  auto a = x.data(), b = bias.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) z[i * n + j] = a[i * n + j] + b[j];
  auto o = out.impl();
  return detail::finish(out, "add_bias", {&x, &bias}, [x, bias, o, m, n] {
    if (double* gx = detail::sink(x))
      for (std::size_t i = 0; i < m * n; ++i) gx[i] += o->grad[i];
    if (double* gb = detail::sink(bias))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += o->grad[i * n + j];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  Tensor out = Tensor::scalar(s);
  auto o = out.impl();
  return detail::finish(out, "sum", {&a}, [a, o] {
    double* ga = detail::sink(a);
    for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += o->grad[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

inline Tensor sqrt(const Tensor& a) {
  Tensor out(a.shape());
  auto x = a.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (x[i] < 0.0) throw ContractError("sqrt of a negative value");
    z[i] = std::sqrt(x[i]);
  }
  auto o = out.impl();
  return detail::finish(out, "sqrt", {&a}, [a, o] {
    double* ga = detail::sink(a);
    for (std::size_t i = 0; i < o->grad.size(); ++i) {
      if (o->data[i] > 0.0) ga[i] += o->grad[i] * 0.5 / o->data[i];
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.to_vector());
  auto o = out.impl();
  return detail::finish(out, "reshape", {&a}, [a, o] {
    double* ga = detail::sink(a);
    for (std::size_t i = 0; i < o->grad.size(); ++i) ga[i] += o->grad[i];
  });
}

/// Softmax over the last dimension, stabilised by subtracting the slice max.
inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax_lastdim: empty last dimension");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = a.data() + r * n;
    double* p = z.data() + r * n;
    const double mx = *std::max_element(s, s + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(s[j] - mx);
      total += p[j];
    }
    for (std::size_t j = 0; j < n; ++j) p[j] /= total;
  }
  auto o = out.impl();
  return detail::finish(out, "softmax_lastdim", {&x}, [x, o, n, rows] {
    double* gx = detail::sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = o->data.data() + r * n;
      const double* g = o->grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[j] * (g[j] - dot);
    }
  });
}

/// Row softmax of scores[m x n] restricted to columns with mask weight > 0.
///
/// p[i][j] = mask[j] * exp(s[i][j]) / sum_k mask[k] * exp(s[i][k]). For a 0/1
/// mask this equals adding -inf to the masked columns; fractional masks
/// interpolate and the mask receives a gradient.
inline Tensor masked_softmax(const Tensor& scores, const Tensor& mask) {
  detail::require_rank2(scores, "masked_softmax");
  const std::size_t m = scores.dim(0), n = scores.dim(1);
  if (mask.numel() != n) {
    throw DimensionError("masked_softmax: mask " + shape_str(mask.shape()) + " does not match " +
                         shape_str(scores.shape()));
  }
  auto w = mask.data();
  bool any = false;
  for (double v : w) {
    if (v < 0.0) throw ContractError("masked_softmax: negative mask weight");
    any = any || v > 0.0;
  }
  if (!any) throw ContractError("masked_softmax: mask hides every column");

  Tensor out(scores.shape());
  // unmasked normalised exponentials, kept for the mask adjoint
  std::vector<double> q(m * n);
  auto s = scores.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (w[j] > 0.0) mx = std::max(mx, s[i * n + j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      // hidden columns may exceed the max; cap so exp stays finite
      const double e = std::exp(std::min(s[i * n + j] - mx, 700.0));
      q[i * n + j] = e;
      z[i * n + j] = e * w[j];
      total += z[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      z[i * n + j] /= total;
      q[i * n + j] /= total;
    }
  }
  auto o = out.impl();
  return detail::finish(out, "masked_softmax", {&scores, &mask},
                        [scores, mask, o, m, n, q = std::move(q)] {
                          double* gs = detail::sink(scores);
                          double* gm = detail::sink(mask);
                          for (std::size_t i = 0; i < m; ++i) {
                            const double* p = o->data.data() + i * n;
                            const double* g = o->grad.data() + i * n;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += p[j] * g[j];
                            if (gs)
                              for (std::size_t j = 0; j < n; ++j) gs[i * n + j] += p[j] * (g[j] - dot);
                            if (gm)
                              for (std::size_t j = 0; j < n; ++j) gm[j] += q[i * n + j] * (g[j] - dot);
                          }
                        });
}

inline constexpr double kLayerNormEps = 1e-6;

/// Per-row normalisation of x[m x n] followed by gain/bias of length n.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  std::vector<double> xhat(m * n), inv_std(m);
  auto a = x.data(), g = gain.data(), b = bias.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mu) * inv_std[i];
      z[i * n + j] = xhat[i * n + j] * g[j] + b[j];
    }
  }
  auto o = out.impl();
  return detail::finish(
      out, "layer_norm", {&x, &gain, &bias},
      [x, gain, bias, o, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
        double* gx = detail::sink(x);
        double* gg = detail::sink(gain);
        double* gb = detail::sink(bias);
        auto gv = gain.data();
        std::vector<double> dxhat(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* dy = o->grad.data() + i * n;
          const double* xh = xhat.data() + i * n;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxhat[j] = dy[j] * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
            if (gg) gg[j] += dy[j] * xh[j];
            if (gb) gb[j] += dy[j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          if (gx)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
      });
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
inline Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = 0.5 * a[i] * (1.0 + std::erf(a[i] * std::numbers::sqrt2 / 2.0));
  auto o = out.impl();
  return detail::finish(out, "gelu", {&x}, [x, o] {
    double* gx = detail::sink(x);
    auto a = x.data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(a[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * a[i] * a[i]) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      gx[i] += o->grad[i] * (cdf + a[i] * pdf);
    }
  });
}

/// Rows [r0, r1) and columns [c0, c1) of a matrix.
inline Tensor slice(const Tensor& x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
  detail::require_rank2(x, "slice");
  if (r0 > r1 || r1 > x.dim(0) || c0 > c1 || c1 > x.dim(1)) {
    throw DimensionError("slice: range out of bounds for " + shape_str(x.shape()));
  }
  const std::size_t n = x.dim(1), rows = r1 - r0, cols = c1 - c0;
  Tensor out(Shape{rows, cols});
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) z[i * cols + j] = a[(r0 + i) * n + c0 + j];
  auto o = out.impl();
  return detail::finish(out, "slice", {&x}, [x, o, r0, c0, rows, cols, n] {
    double* gx = detail::sink(x);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) gx[(r0 + i) * n + c0 + j] += o->grad[i * cols + j];
  });
}

/// Selected rows of a matrix, in the order given.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_rank2(x, "gather_rows");
  const std::size_t n = x.dim(1);
  for (std::size_t r : idx)
    if (r >= x.dim(0)) throw DimensionError("gather_rows: index out of range for " + shape_str(x.shape()));
  Tensor out(Shape{idx.size(), n});
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(a.data() + idx[i] * n, n, z.data() + i * n);
  auto o = out.impl();
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return detail::finish(out, "gather_rows", {&x}, [x, o, n, rows = std::move(rows)] {
    double* gx = detail::sink(x);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) gx[rows[i] * n + j] += o->grad[i * n + j];
  });
}

/// Square sub-matrix x[idx][:, idx].
inline Tensor gather_square(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_rank2(x, "gather_square");
  if (x.dim(0) != x.dim(1)) throw DimensionError("gather_square: matrix is not square " + shape_str(x.shape()));
  const std::size_t n = x.dim(1), k = idx.size();
  for (std::size_t r : idx)
    if (r >= n) throw DimensionError("gather_square: index out of range for " + shape_str(x.shape()));
  Tensor out(Shape{k, k});
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) z[i * k + j] = a[idx[i] * n + idx[j]];
  auto o = out.impl();
  std::vector<std::size_t> keep(idx.begin(), idx.end());
  return detail::finish(out, "gather_square", {&x}, [x, o, n, keep = std::move(keep)] {
    double* gx = detail::sink(x);
    const std::size_t k = keep.size();
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) gx[keep[i] * n + keep[j]] += o->grad[i * k + j];
  });
}

/// Vector of length `size` holding v[i] at position idx[i] and zeros elsewhere.
inline Tensor scatter(const Tensor& v, std::span<const std::size_t> idx, std::size_t size) {
  if (v.numel() != idx.size()) throw DimensionError("scatter: value count does not match index count");
  Tensor out(Shape{size});
  auto a = v.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size) throw DimensionError("scatter: index out of range");
    z[idx[i]] = a[i];
  }
  auto o = out.impl();
  std::vector<std::size_t> pos(idx.begin(), idx.end());
  return detail::finish(out, "scatter", {&v}, [v, o, pos = std::move(pos)] {
    double* gv = detail::sink(v);
    for (std::size_t i = 0; i < pos.size(); ++i) gv[i] += o->grad[pos[i]];
  });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.dim(0) != m) {
      throw DimensionError("concat_cols: row count " + std::to_string(p.dim(0)) + " differs from " +
                           std::to_string(m));
    }
    total += p.dim(1);
  }
  Tensor out(Shape{m, total});
  auto z = out.mutable_data();
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t c = p.dim(1);
    auto a = p.data();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(a.data() + i * c, c, z.data() + i * total + offset);
    offset += c;
  }
  detail::check_finite(out, "concat_cols");
  bool track = false;
  if (Tape::active() != nullptr)
    for (const Tensor& p : parts) track = track || p.requires_grad();
  if (track) {
    out.set_requires_grad(true);
    auto o = out.impl();
    Tape::active()->record(o, [parts, o, m, total] {
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        const std::size_t c = p.dim(1);
        if (double* gp = detail::sink(p))
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += o->grad[i * total + offset + j];
        offset += c;
      }
    });
  }
  return out;
}

/// Vertical concatenation of matrices with equal column counts.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.dim(1) != n) {
      throw DimensionError("concat_rows: column count " + std::to_string(p.dim(1)) + " differs from " +
                           std::to_string(n));
    }
    total += p.dim(0);
  }
  std::vector<double> values;
  values.reserve(total * n);
  for (const Tensor& p : parts) values.insert(values.end(), p.data().begin(), p.data().end());
  Tensor out(Shape{total, n}, std::move(values));
  detail::check_finite(out, "concat_rows");
  bool track = false;
  if (Tape::active() != nullptr)
    for (const Tensor& p : parts) track = track || p.requires_grad();
  if (track) {
    out.set_requires_grad(true);
    auto o = out.impl();
    Tape::active()->record(o, [parts, o] {
      std::size_t offset = 0;
      for (const Tensor& p : parts) {
        if (double* gp = detail::sink(p))
          for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += o->grad[offset + i];
        offset += p.numel();
      }
    });
  }
  return out;
}

/// v[n] repeated as `rows` identical rows.
inline Tensor broadcast_rows(const Tensor& v, std::size_t rows) {
  const std::size_t n = v.numel();
  Tensor out(Shape{rows, n});
  auto a = v.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(a.data(), n, z.data() + i * n);
  auto o = out.impl();
  return detail::finish(out, "broadcast_rows", {&v}, [v, o, rows, n] {
    double* gv = detail::sink(v);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < n; ++j) gv[j] += o->grad[i * n + j];
  });
}

/// Mean of each row of x[m x n] -> [m].
inline Tensor row_mean(const Tensor& x) {
  detail::require_rank2(x, "row_mean");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (n == 0) throw DimensionError("row_mean: empty rows");
  Tensor out(Shape{m});
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
    z[i] = s / static_cast<double>(n);
  }
  auto o = out.impl();
  return detail::finish(out, "row_mean", {&x}, [x, o, m, n] {
    double* gx = detail::sink(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += o->grad[i] / static_cast<double>(n);
  });
}

/// Mean of each column of x[m x n] -> [n].
inline Tensor col_mean(const Tensor& x) {
  detail::require_rank2(x, "col_mean");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (m == 0) throw DimensionError("col_mean: empty columns");
  Tensor out(Shape{n});
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) z[j] += a[i * n + j];
  for (std::size_t j = 0; j < n; ++j) z[j] /= static_cast<double>(m);
  auto o = out.impl();
  return detail::finish(out, "col_mean", {&x}, [x, o, m, n] {
    double* gx = detail::sink(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += o->grad[j] / static_cast<double>(m);
  });
}

/// Population variance of each row of x[m x n] -> [m].
inline Tensor row_var(const Tensor& x) {
  detail::require_rank2(x, "row_var");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (n == 0) throw DimensionError("row_var: empty rows");
  Tensor out(Shape{m});
  std::vector<double> mu(m);
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
    mu[i] = s / static_cast<double>(n);
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += (a[i * n + j] - mu[i]) * (a[i * n + j] - mu[i]);
    z[i] = v / static_cast<double>(n);
  }
  auto o = out.impl();
  return detail::finish(out, "row_var", {&x}, [x, o, m, n, mu = std::move(mu)] {
    double* gx = detail::sink(x);
    auto a = x.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += o->grad[i] * 2.0 * (a[i * n + j] - mu[i]) / static_cast<double>(n);
  });
}

/// Population variance of each column of x[m x n] -> [n].
inline Tensor col_var(const Tensor& x) {
  detail::require_rank2(x, "col_var");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (m == 0) throw DimensionError("col_var: empty columns");
  Tensor out(Shape{n});
  std::vector<double> mu(n, 0.0);
  auto a = x.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) mu[j] += a[i * n + j];
  for (std::size_t j = 0; j < n; ++j) mu[j] /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) z[j] += (a[i * n + j] - mu[j]) * (a[i * n + j] - mu[j]);
  for (std::size_t j = 0; j < n; ++j) z[j] /= static_cast<double>(m);
  auto o = out.impl();
  return detail::finish(out, "col_var", {&x}, [x, o, m, n, mu = std::move(mu)] {
    double* gx = detail::sink(x);
    auto a = x.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        gx[i * n + j] += o->grad[j] * 2.0 * (a[i * n + j] - mu[j]) / static_cast<double>(m);
  });
}

/// Straight-through estimator: the forward value is `hard`, the gradient goes
/// to `soft` unchanged.
inline Tensor straight_through(std::span<const double> hard, const Tensor& soft) {
  if (hard.size() != soft.numel()) throw DimensionError("straight_through: hard/soft size mismatch");
  Tensor out(soft.shape(), std::vector<double>(hard.begin(), hard.end()));
  auto o = out.impl();
  return detail::finish(out, "straight_through", {&soft}, [soft, o] {
    double* gs = detail::sink(soft);
    for (std::size_t i = 0; i < o->grad.size(); ++i) gs[i] += o->grad[i];
  });
}

/// -log softmax(logits)[label] for a single row of logits.
inline Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  const std::size_t c = logits.numel();
  if (label >= c) {
    throw ContractError("cross_entropy: label " + std::to_string(label) + " outside [0, " + std::to_string(c) + ")");
  }
  auto z = logits.data();
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  const double lse = mx + std::log(total);
  Tensor out = Tensor::scalar(lse - z[label]);
  auto o = out.impl();
  return detail::finish(out, "cross_entropy", {&logits}, [logits, o, label, lse] {
    double* g = detail::sink(logits);
    auto z = logits.data();
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double p = std::exp(z[i] - lse);
      g[i] += o->grad[0] * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

inline constexpr double kLogFloor = 1e-12;

/// KL(reference || probs) = sum_i ref_i * (log ref_i - log probs_i), with both
/// logs floored at kLogFloor.
inline Tensor kl_divergence(std::span<const double> reference, const Tensor& probs) {
  if (reference.size() != probs.numel()) throw DimensionError("kl_divergence: distributions differ in length");
  auto y = probs.data();
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (reference[i] <= 0.0) continue;
    total += reference[i] * (std::log(std::max(reference[i], kLogFloor)) - std::log(std::max(y[i], kLogFloor)));
  }
  Tensor out = Tensor::scalar(total);
  auto o = out.impl();
  std::vector<double> ref(reference.begin(), reference.end());
  return detail::finish(out, "kl_divergence", {&probs}, [probs, o, ref = std::move(ref)] {
    double* g = detail::sink(probs);
    auto y = probs.data();
    for (std::size_t i = 0; i < y.size(); ++i)
      if (ref[i] > 0.0 && y[i] > kLogFloor) g[i] -= o->grad[0] * ref[i] / y[i];
  });
}

/// Cosine similarity of two tensors viewed as flat vectors.
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw DimensionError("cosine_similarity: length mismatch");
  auto x = a.data(), y = b.data();
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  if (nx == 0.0 || ny == 0.0) throw ContractError("cosine_similarity: zero-norm vector");
  nx = std::sqrt(nx);
  ny = std::sqrt(ny);
  const double c = dot / (nx * ny);
  Tensor out = Tensor::scalar(c);
  auto o = out.impl();
  return detail::finish(out, "cosine_similarity", {&a, &b}, [a, b, o, nx, ny, c] {
    const double g = o->grad[0];
    auto x = a.data(), y = b.data();
    if (double* ga = detail::sink(a))
      for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g * (y[i] / (nx * ny) - c * x[i] / (nx * nx));
    if (double* gb = detail::sink(b))
      for (std::size_t i = 0; i < y.size(); ++i) gb[i] += g * (x[i] / (nx * ny) - c * y[i] / (ny * ny));
  });
}

}  // namespace spot
