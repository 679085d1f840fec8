#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "spot/dataset.hpp"
#include "spot/engine.hpp"
#include "spot/flops.hpp"
#include "spot/losses.hpp"

namespace spot {

struct TrainConfig {
  double backbone_lr = 1e-3;
  double predictor_lr = 1e-2;
  double pretrain_lr = 1e-3;
  std::size_t epochs = 10;
  std::size_t pretrain_epochs = 10;
  std::size_t batch_size = 16;
  double weight_decay = 0.05;
  std::uint64_t seed = 0;
  LossWeights weights;
  GumbelSettings gumbel;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(backbone_lr >= 0.0) || !(predictor_lr >= 0.0) || !(pretrain_lr >= 0.0)) {
      throw ConfigError("learning rates must be nonnegative");
    }
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
    if (!(gumbel.tau_initial > 0.0) || !(gumbel.tau_final > 0.0)) throw ConfigError("Gumbel temperatures must be positive");
    weights.validate();
  }
};

struct ParamGroup {
  ParamList params;
  double lr = 1e-3;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  struct Settings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<ParamGroup> groups, Settings s) : groups_(std::move(groups)), s_(s) {
    for (const auto& g : groups_) {
      auto& m = m_.emplace_back();
      auto& v = v_.emplace_back();
      for (const auto& p : g.params) {
        m.emplace_back(p.tensor.numel(), 0.0);
        v.emplace_back(p.tensor.numel(), 0.0);
      }
    }
  }

  /// Applies one update from the accumulated gradients; a missing gradient
  /// counts as zero.
  void step() {
    for (const auto& g : groups_)
      for (const auto& p : g.params)
        for (double x : p.tensor.grad())
          if (!std::isfinite(x)) throw NumericError("non-finite gradient in " + p.name);
    ++t_;
    const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const double lr = groups_[gi].lr;
      for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
        Tensor p = groups_[gi].params[pi].tensor;
        auto grad = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[gi][pi];
        auto& v = v_[gi][pi];
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double gval = grad.empty() ? 0.0 : grad[i];
          w[i] *= 1.0 - lr * s_.weight_decay;
          m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * gval;
          v[i] = s_.beta2 * v[i] + (1.0 - s_.beta2) * gval * gval;
          w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s_.eps);
        }
      }
    }
  }

  void zero_grad() {
    for (const auto& g : groups_) zero_grads(g.params);
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<ParamGroup> groups_;
  Settings s_;
  std::vector<std::vector<std::vector<double>>> m_, v_;
  std::size_t t_ = 0;
};

/// Frozen dense copy of a pretrained backbone.
class Teacher {
 public:
  explicit Teacher(const VisionTransformer& source) : model_(source.clone()) {
    for (auto& p : model_.parameters()) {
      Tensor t = p.tensor;
      t.set_requires_grad(false);
    }
  }

  /// Class distribution y' and all last-layer tokens t' (row = original index).
  TeacherOutputs outputs(const Image& image) const {
    NoGradScope ng;
    VisionTransformer::ForwardResult f = model_.forward(image);
    return TeacherOutputs{softmax_lastdim(f.logits).to_vector(), f.final_tokens.tokens};
  }

  const VisionTransformer& model() const { return model_; }

 private:
  VisionTransformer model_;
};

inline Teacher make_teacher(const ViTConfig& cfg, const ParamList& stored) {
  VisionTransformer vit(cfg, 0);
  load_into(stored, vit.parameters());
  return Teacher(vit);
}

inline std::size_t argmax(const Tensor& logits) {
  auto d = logits.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.8f", v);
  return buf;
}

/// Snapshot of parameter values, detached from any graph.
inline ParamList snapshot(const ParamList& params) {
  ParamList out;
  for (const auto& p : params) out.push_back({p.name, p.tensor.detach()});
  return out;
}

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

[[noreturn]] inline void diverged(const ParamList& params, const ParamList& last_good, std::size_t epoch,
                                  const std::string& why) {
  copy_values(last_good, params);
  throw NumericError("training diverged in epoch " + std::to_string(epoch + 1) + " (" + why +
                     "); parameters restored to the last completed epoch");
}

}  // namespace detail

struct PretrainEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Dense supervised training of the backbone alone.
inline std::vector<PretrainEpoch> pretrain(VisionTransformer& vit, const Dataset& data, const TrainConfig& cfg,
                                           std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ContractError("pretrain: empty dataset");
  const ParamList params = vit.parameters();
  AdamW opt({{params, cfg.pretrain_lr}}, {0.9, 0.999, 1e-8, cfg.weight_decay});
  Rng rng(cfg.seed);
  std::vector<PretrainEpoch> history;
  if (log) *log << "epoch,loss,accuracy\n";
  for (std::size_t e = 0; e < cfg.pretrain_epochs; ++e) {
    const ParamList last_good = snapshot(params);
    const auto order = detail::epoch_order(data.size(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      opt.zero_grad();
      try {
        for (std::size_t i = b; i < end; ++i) {
          const Sample& s = data[order[i]];
          Tape tape;
          TapeScope scope(tape);
          VisionTransformer::ForwardResult f = vit.forward(s.image);
          Tensor loss = cross_entropy(f.logits, s.label);
          if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");
          loss_sum += loss.item();
          correct += argmax(f.logits) == s.label;
          tape.backward(scale(loss, inv));
        }
        opt.step();
      } catch (const NumericError& err) {
        detail::diverged(params, last_good, e, err.what());
      }
    }
    PretrainEpoch row{e + 1, loss_sum / static_cast<double>(data.size()),
                      static_cast<double>(correct) / static_cast<double>(data.size())};
    if (log) *log << row.epoch << ',' << fmt_num(row.loss) << ',' << fmt_num(row.accuracy) << '\n' << std::flush;
    history.push_back(row);
  }
  return history;
}

struct EpochStats {
  std::size_t epoch = 0;
  double tau = 0.0;
  double total = 0.0;
  double cls = 0.0;
  double rate = 0.0;
  double pred = 0.0;
  double token = 0.0;
  std::vector<double> rho_hat;  // mean hard kept fraction per stage
  double accuracy = 0.0;        // training-mode accuracy
};

inline std::string epoch_csv_header(std::size_t stages) {
  std::string h = "epoch,tau,loss,l_cls,l_rate,l_pred,l_token";
  for (std::size_t k = 1; k <= stages; ++k) h += ",rho_hat_" + std::to_string(k);
  return h + ",accuracy";
}

inline std::string epoch_csv_row(const EpochStats& s) {
  std::string r = std::to_string(s.epoch) + ',' + fmt_num(s.tau) + ',' + fmt_num(s.total) + ',' + fmt_num(s.cls) + ',' +
                  fmt_num(s.rate) + ',' + fmt_num(s.pred) + ',' + fmt_num(s.token);
  for (double v : s.rho_hat) r += ',' + fmt_num(v);
  return r + ',' + fmt_num(s.accuracy);
}

/// Joint fine-tuning of backbone and predictors against a frozen teacher.
inline std::vector<EpochStats> finetune(VisionTransformer& student, PredictorBank& bank, const Teacher& teacher,
                                        const Dataset& data, const SparsifyConfig& sparsify, const TrainConfig& cfg,
                                        std::ostream* log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ContractError("finetune: empty dataset");
  SparsifyConfig sp = sparsify;
  sp.mode = EngineMode::training;
  sp.validate(student.config().depth);
  const std::size_t K = sp.stages();
  std::vector<double> targets;
  for (std::size_t k = 1; k <= K; ++k) targets.push_back(std::pow(sp.rho, static_cast<double>(k)));

  const ParamList backbone = student.parameters();
  const ParamList predictors = bank.parameters();
  ParamList all = backbone;
  all.insert(all.end(), predictors.begin(), predictors.end());
  AdamW opt({{backbone, cfg.backbone_lr}, {predictors, cfg.predictor_lr}}, {0.9, 0.999, 1e-8, cfg.weight_decay});

  std::vector<TeacherOutputs> teacher_out;
  teacher_out.reserve(data.size());
  for (const auto& s : data) teacher_out.push_back(teacher.outputs(s.image));

  Rng order_rng(cfg.seed);
  Rng noise_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<EpochStats> history;
  if (log) *log << epoch_csv_header(K) << '\n';

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const ParamList last_good = snapshot(all);
    EngineOptions opts;
    opts.gumbel = cfg.gumbel;
    opts.gumbel.tau = cfg.gumbel.temperature(e, cfg.epochs);
    opts.rng = &noise_rng;
    EpochStats st;
    st.epoch = e + 1;
    st.tau = opts.gumbel.tau;
    st.rho_hat.assign(K, 0.0);
    std::size_t correct = 0;
    const auto order = detail::epoch_order(data.size(), order_rng);

    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - b);
      opt.zero_grad();
      try {
        for (std::size_t i = b; i < end; ++i) {
          const Sample& s = data[order[i]];
          const TeacherOutputs& t = teacher_out[order[i]];
          Tape tape;
          TapeScope scope(tape);
          SpotScorer scorer(bank, student.config().heads);
          EngineResult r = run(s.image, student, scorer, sp, opts);

          LossTerms terms;
          terms.cls = task_loss(r.logits, s.label);
          if (K > 0) terms.rate = rate_loss({r.rate_estimates}, targets);
          terms.pred = pred_similarity(t.probs, r.logits);
          if (cfg.weights.token != 0.0 && r.retained_positions.size() > 1) {
            std::vector<std::size_t> rows(r.retained_positions.begin() + 1, r.retained_positions.end());
            terms.token = token_similarity(gather_rows(t.retained_tokens, rows), r.retained_patch_tokens());
          }
          Tensor loss = total(terms, cfg.weights);
          if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");

          st.total += loss.item();
          st.cls += terms.cls.item();
          st.rate += terms.rate.defined() ? terms.rate.item() : 0.0;
          st.pred += terms.pred.item();
          st.token += terms.token.defined() ? terms.token.item() : 0.0;
          for (std::size_t k = 0; k < K; ++k) st.rho_hat[k] += r.rate_estimates[k].item();
          correct += argmax(r.logits) == s.label;
          tape.backward(scale(loss, inv));
        }
        opt.step();
      } catch (const NumericError& err) {
        detail::diverged(all, last_good, e, err.what());
      }
    }
    const double n = static_cast<double>(data.size());
    st.total /= n;
    st.cls /= n;
    st.rate /= n;
    st.pred /= n;
    st.token /= n;
    for (double& v : st.rho_hat) v /= n;
    st.accuracy = static_cast<double>(correct) / n;
    if (log) *log << epoch_csv_row(st) << '\n' << std::flush;
    history.push_back(st);
  }
  return history;
}

enum class EvalMode { dense, spot, heuristic };

struct EvalResult {
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  FlopReport flops;
  std::vector<double> kept_fraction;  // mean kept patch fraction per stage
};

/// Top-1 accuracy with inference-mode pruning and the cost of one pass.
inline EvalResult evaluate(const VisionTransformer& vit, const PredictorBank* bank, const Dataset& data, EvalMode mode,
                           const SparsifyConfig& sparsify = {}) {
  NoGradScope ng;
  EvalResult res;
  const ViTConfig& vc = vit.config();
  SparsifyConfig sp = sparsify;
  sp.mode = EngineMode::inference;
  if (mode == EvalMode::spot && bank == nullptr) throw ContractError("evaluate: SPOT mode needs predictors");
  if (mode == EvalMode::dense) res.flops = model_cost(vc, RetentionPlan::dense());
  res.kept_fraction.assign(mode == EvalMode::dense ? 0 : sp.stages(), 0.0);
  bool have_cost = false;
  for (const auto& s : data) {
    Tensor logits;
    if (mode == EvalMode::dense) {
      logits = vit.forward(s.image).logits;
    } else {
      EngineResult r;
      if (mode == EvalMode::spot) {
        SpotScorer scorer(*bank, vc.heads);
        r = run(s.image, vit, scorer, sp);
      } else {
        HeuristicScorer scorer;
        r = run(s.image, vit, scorer, sp);
      }
      logits = r.logits;
      if (!have_cost) {
        res.flops = measured_cost(vc, r.layer_tokens, r.stage_tokens,
                                  mode == EvalMode::spot ? &bank->config() : nullptr);
        have_cost = true;
      }
      for (std::size_t k = 0; k < r.retention.stages(); ++k) res.kept_fraction[k] += r.retention.empirical_rates[k];
    }
    res.correct += argmax(logits) == s.label;
    ++res.total;
  }
  if (res.total > 0) {
    res.accuracy = static_cast<double>(res.correct) / static_cast<double>(res.total);
    for (double& v : res.kept_fraction) v /= static_cast<double>(res.total);
  }
  if (!have_cost && mode != EvalMode::dense) {
    res.flops = model_cost(vc, RetentionPlan::sparsified(vc, sp.rho, sp.stage_layers,
                                                         bank ? bank->config() : PredictorConfig{}));
  }
  return res;
}

}  // namespace spot
