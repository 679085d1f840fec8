#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace spot;
using namespace spot::test;

TEST(TaskLoss, Examples) {
  EXPECT_NEAR(task_loss(Tensor::vector({0.3, 0.3, 0.3, 0.3}), 2).item(), std::log(4.0), 1e-14);
  EXPECT_LT(task_loss(Tensor::vector({60.0, 0.0, 0.0}), 0).item(), 1e-20);
  Rng rng(50);
  Tensor l = random_tensor(Shape{5}, rng, -3, 3);
  double z = 0.0;
  for (double v : l.data()) z += std::exp(v);
  EXPECT_NEAR(task_loss(l, 3).item(), std::log(z) - l[3], 1e-13);
  EXPECT_THROW(task_loss(l, 5), ContractError);
  std::vector<std::size_t> labels{3, 0};
  EXPECT_NEAR(task_loss({l, l}, labels).item(), 0.5 * (task_loss(l, 3).item() + task_loss(l, 0).item()), 1e-14);
}

TEST(RateLoss, Examples) {
  const std::vector<double> target{0.7};
  EXPECT_NEAR(rate_loss_value({{0.5}}, target), 0.04, 1e-15);
  EXPECT_EQ(rate_loss_value({{0.7}}, target), 0.0);
  EXPECT_NEAR(rate_loss({{Tensor::scalar(0.5)}}, target).item(), 0.04, 1e-15);

  Rng rng(51);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::vector<double>> rates(6, std::vector<double>(3));
  std::vector<std::vector<Tensor>> tensors(6);
  const std::vector<double> targets{0.7, 0.49, 0.343};
  double oracle = 0.0;
  for (std::size_t s = 0; s < 6; ++s)
    for (std::size_t k = 0; k < 3; ++k) {
      rates[s][k] = u(rng);
      tensors[s].push_back(Tensor::scalar(rates[s][k]));
      oracle += (targets[k] - rates[s][k]) * (targets[k] - rates[s][k]);
    }
  oracle /= 18.0;
  EXPECT_NEAR(rate_loss_value(rates, targets), oracle, 1e-15);
  EXPECT_NEAR(rate_loss(tensors, targets).item(), oracle, 1e-15);
  EXPECT_THROW(rate_loss_value({{0.5, 0.2}}, target), DimensionError);
}

TEST(PredSimilarity, Examples) {
  std::vector<double> y{0.2, 0.3, 0.5};
  Tensor logits = Tensor::vector({std::log(0.2), std::log(0.3), std::log(0.5)});
  EXPECT_NEAR(pred_similarity(y, logits).item(), 0.0, 1e-14);
  EXPECT_NEAR(pred_similarity(std::vector<double>{1.0, 0.0}, Tensor::vector({0.0, 0.0})).item(), std::log(2.0), 1e-14);
  Rng rng(52);
  Tensor l = random_tensor(Shape{4}, rng, -2, 2);
  std::vector<double> t{0.1, 0.4, 0.3, 0.2};
  double z = 0.0;
  for (double v : l.data()) z += std::exp(v);
  double oracle = 0.0;
  for (std::size_t i = 0; i < 4; ++i) oracle += t[i] * std::log(t[i] / (std::exp(l[i]) / z));
  EXPECT_NEAR(pred_similarity(t, l).item(), oracle, 1e-14);
  EXPECT_GE(oracle, 0.0);
}

TEST(TokenSimilarity, Examples) {
  Rng rng(53);
  Tensor t = random_tensor(Shape{3, 4}, rng);
  EXPECT_NEAR(token_similarity(t, t).item(), 0.0, 1e-14);
  EXPECT_NEAR(token_similarity(t, scale(t, -1.0)).item(), 2.0, 1e-14);
  Tensor s = random_tensor(Shape{3, 4}, rng);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < 12; ++i) {
    dot += t[i] * s[i];
    na += t[i] * t[i];
    nb += s[i] * s[i];
  }
  EXPECT_NEAR(token_similarity(t, s).item(), 1.0 - dot / std::sqrt(na * nb), 1e-14);
  EXPECT_THROW(token_similarity(Tensor(Shape{3, 4}), s), ContractError);
  EXPECT_THROW(token_similarity(t, random_tensor(Shape{2, 4}, rng)), DimensionError);
}

TEST(TotalLoss, WeightedSum) {
  LossTerms terms{Tensor::scalar(1.5), Tensor::scalar(0.25), Tensor::scalar(0.5), Tensor::scalar(0.125)};
  EXPECT_EQ(total(terms, {0, 0, 0}).item(), 1.5);
  EXPECT_DOUBLE_EQ(total(terms, {2.0, 0.5, 3.0}).item(), 1.5 + 0.5 + 0.25 + 0.375);
  LossTerms zero{Tensor::scalar(0.75), Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor()};
  EXPECT_EQ(total(zero, LossWeights{}).item(), 0.75);
  EXPECT_THROW((LossWeights{-1.0, 0.0, 0.0}).validate(), ConfigError);
}

TEST(LossGradients, EachTermMatchesFiniteDifferences) {
  Rng rng(54);
  std::vector<double> teacher{0.1, 0.6, 0.3};
  Tensor tt = random_tensor(Shape{2, 3}, rng);
  EXPECT_LT(max_grad_error([&](const auto& in) { return task_loss(in[0], 1); }, {random_tensor(Shape{3}, rng)}), 1e-5);
  EXPECT_LT(max_grad_error([&](const auto& in) { return pred_similarity(teacher, in[0]); }, {random_tensor(Shape{3}, rng)}),
            1e-5);
  EXPECT_LT(max_grad_error([&](const auto& in) { return token_similarity(tt, in[0]); }, {random_tensor(Shape{2, 3}, rng)}),
            1e-5);
  const std::vector<double> targets{0.7, 0.49};
  EXPECT_LT(max_grad_error([&](const auto& in) { return rate_loss({{sum(in[0]), mean(in[0])}}, targets); },
                           {random_tensor(Shape{3}, rng, 0, 0.5)}),
            1e-5);
}

TEST(LossGradients, EndToEndThroughEngineWithFixedNoise) {
  ViTConfig c = tiny_config(4);
  c.image_size = 12;
  VisionTransformer vit(c, 7);
  PredictorConfig pc;
  pc.d_remap = 4;
  PredictorBank bank(pc, 2, c.embed_dim, c.heads, 8);
  Rng rng(55);
  Image img = random_image(c, rng);
  const std::vector<double> teacher_probs{0.2, 0.5, 0.3};
  Tensor teacher_tokens = random_tensor(Shape{c.num_patches(), c.embed_dim}, rng);
  std::vector<std::vector<double>> noise{gumbel_noise(2 * 9, rng), gumbel_noise(2 * 9, rng)};
  SparsifyConfig sp{0.6, {2, 3}, EngineMode::training};
  EngineOptions opt;
  opt.gumbel.tau = 0.8;
  opt.gumbel.hard = false;
  opt.noise = [&](std::size_t k, std::size_t n) { return std::vector<double>(noise[k].begin(), noise[k].begin() + 2 * n); };
  const std::vector<double> targets{0.6, 0.36};
  LossWeights w{2.0, 0.5, 0.3};

  // differentiate the loss w.r.t. the last layer of each predictor and one backbone weight
  ParamList params = bank.parameters();
  std::vector<Tensor> inputs;
  for (const auto& p : params)
    if (p.name.find("fc3") != std::string::npos) inputs.push_back(p.tensor);
  for (const auto& p : vit.parameters())
    if (p.name == "backbone.blocks.1.attn.proj.bias") inputs.push_back(p.tensor);
  ASSERT_EQ(inputs.size(), 5u);

  auto f = [&](const std::vector<Tensor>&) {
    SpotScorer scorer(bank, c.heads);
    EngineResult r = run(img, vit, scorer, sp, opt);
    LossTerms t;
    t.cls = task_loss(r.logits, 1);
    t.rate = rate_loss({r.rate_estimates}, targets);
    t.pred = pred_similarity(teacher_probs, r.logits);
    std::vector<std::size_t> rows;
    for (std::size_t p : r.retained_positions)
      if (p > 0) rows.push_back(p - 1);
    t.token = token_similarity(gather_rows(teacher_tokens, rows), r.retained_patch_tokens());
    return total(t, w);
  };
  EXPECT_LT(max_grad_error(f, inputs), 1e-4);
  for (Tensor& t : inputs) t.set_requires_grad(true);
}
