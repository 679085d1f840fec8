#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spot/ops.hpp"

namespace spot {

struct LossWeights {
  double rate = 2.0;    // lambda_1
  double pred = 0.5;    // lambda_2
  double token = 0.0;   // lambda_3

  void validate() const {
    if (rate < 0.0 || pred < 0.0 || token < 0.0) throw ConfigError("loss weights must be nonnegative");
  }
};

/// Teacher targets for one sample; plain values, never part of a graph.
struct TeacherOutputs {
  std::vector<double> probs;   // y'
  Tensor retained_tokens;      // t', aligned with the student's retained patch tokens
};

/// Cross-entropy of one sample.
inline Tensor task_loss(const Tensor& logits, std::size_t label) { return cross_entropy(logits, label); }

/// Batch mean of per-sample cross-entropy.
inline Tensor task_loss(const std::vector<Tensor>& logits, std::span<const std::size_t> labels) {
  if (logits.size() != labels.size() || logits.empty()) throw ContractError("task_loss: batch size mismatch");
  Tensor acc = cross_entropy(logits[0], labels[0]);
  for (std::size_t i = 1; i < logits.size(); ++i) acc = add(acc, cross_entropy(logits[i], labels[i]));
  return scale(acc, 1.0 / static_cast<double>(logits.size()));
}

/// Mean over samples and stages of (rho_k - rho_hat_k)^2. `rates[s][k]` is
/// a differentiable scalar.
inline Tensor rate_loss(const std::vector<std::vector<Tensor>>& rates, std::span<const double> targets) {
  if (rates.empty()) throw ContractError("rate_loss: empty batch");
  Tensor acc = Tensor::scalar(0.0);
  std::size_t terms = 0;
  for (const auto& sample : rates) {
    if (sample.size() != targets.size()) throw DimensionError("rate_loss: stage count differs from targets");
    for (std::size_t k = 0; k < sample.size(); ++k) {
      Tensor diff = add(sample[k], Tensor::scalar(-targets[k]));
      acc = add(acc, mul(diff, diff));
      ++terms;
    }
  }
  return terms == 0 ? acc : scale(acc, 1.0 / static_cast<double>(terms));
}

/// Value-only variant on an S x K matrix.
inline double rate_loss_value(const std::vector<std::vector<double>>& rates, std::span<const double> targets) {
  double acc = 0.0;
  std::size_t terms = 0;
  for (const auto& sample : rates) {
    if (sample.size() != targets.size()) throw DimensionError("rate_loss: stage count differs from targets");
    for (std::size_t k = 0; k < sample.size(); ++k) {
      acc += (targets[k] - sample[k]) * (targets[k] - sample[k]);
      ++terms;
    }
  }
  return terms == 0 ? 0.0 : acc / static_cast<double>(terms);
}

/// KL(teacher || student) where the student distribution is softmax(logits).
inline Tensor pred_similarity(std::span<const double> teacher_probs, const Tensor& student_logits) {
  return kl_divergence(teacher_probs, softmax_lastdim(student_logits));
}

/// 1 - cos between the flattened retained token sets.
inline Tensor token_similarity(const Tensor& teacher_tokens, const Tensor& student_tokens) {
  if (teacher_tokens.shape() != student_tokens.shape()) {
    throw DimensionError("token_similarity: teacher " + shape_str(teacher_tokens.shape()) + " vs student " +
                         shape_str(student_tokens.shape()));
  }
  const Shape flat{student_tokens.numel()};
  return add(Tensor::scalar(1.0), scale(cosine_similarity(reshape(teacher_tokens.detach(), flat),
                                                          reshape(student_tokens, flat)), -1.0));
}

struct LossTerms {
  Tensor cls;
  Tensor rate;
  Tensor pred;
  Tensor token;  // may be undefined when its weight is zero
};

inline Tensor total(const LossTerms& t, const LossWeights& w) {
  Tensor acc = t.cls;
  if (t.rate.defined() && w.rate != 0.0) acc = add(acc, scale(t.rate, w.rate));
  if (t.pred.defined() && w.pred != 0.0) acc = add(acc, scale(t.pred, w.pred));
  if (t.token.defined() && w.token != 0.0) acc = add(acc, scale(t.token, w.token));
  return acc;
}

}  // namespace spot
