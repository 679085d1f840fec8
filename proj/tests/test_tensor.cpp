#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace spot;
using namespace spot::test;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a.at(i, p) * b.at(p, j);
      out.mutable_data()[i * n + j] = s;
    }
  return out;
}

// Phi(1) by composite Simpson on [-12, 1] of the standard normal density.
double normal_cdf_quadrature(double x) {
  const int n = 20000;
  const double a = -12.0, h = (x - a) / n;
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi); };
  double s = pdf(a) + pdf(x);
  for (int i = 1; i < n; ++i) s += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  Tensor m = random_tensor(Shape{3, 3}, rng);
  Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(matmul(eye, m).to_vector(), m.to_vector());
}

TEST(Matmul, PermutationSwapsColumns) {
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  Tensor p = Tensor::matrix(2, 2, {0, 1, 1, 0});
  EXPECT_EQ(matmul(a, p).to_vector(), (std::vector<double>{2, 1, 4, 3}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  Tensor a = random_tensor(Shape{5, 7}, rng), b = random_tensor(Shape{7, 3}, rng);
  Tensor got = matmul(a, b), want = naive_matmul(a, b);
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Matmul, AssociativeWithinTolerance) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(Shape{4, 6}, rng), b = random_tensor(Shape{6, 5}, rng), c = random_tensor(Shape{5, 3}, rng);
    Tensor l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < l.numel(); ++i) EXPECT_NEAR(l[i], r[i], 1e-9);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor(Shape{2, 3}), Tensor(Shape{4, 2}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Softmax, ZerosGiveUniform) {
  Tensor s = softmax_lastdim(Tensor::vector({0, 0, 0, 0}));
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, LogRatioCase) {
  Tensor s = softmax_lastdim(Tensor::vector({std::log(1.0), std::log(3.0)}));
  EXPECT_NEAR(s[0], 0.25, 1e-15);
  EXPECT_NEAR(s[1], 0.75, 1e-15);
}

TEST(Softmax, MatchesDirectFormulaAndSumsToOne) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(Shape{6}, rng, -5.0, 5.0);
    Tensor s = softmax_lastdim(x);
    double z = 0.0;
    for (double v : x.data()) z += std::exp(v);
    double total = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_NEAR(s[i], std::exp(x[i]) / z, 1e-12);
      EXPECT_GT(s[i], 0.0);
      EXPECT_LT(s[i], 1.0);
      total += s[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, LargeInputsStayFinite) {
  Tensor s = softmax_lastdim(Tensor::vector({1000.0, 1000.0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
}

TEST(LayerNorm, ConstantVectorIsZero) {
  Tensor y = layer_norm(Tensor::matrix(1, 4, {3, 3, 3, 3}), Tensor::vector({1, 1, 1, 1}), Tensor::vector({0, 0, 0, 0}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementWithEpsilon) {
  Tensor y = layer_norm(Tensor::matrix(1, 2, {1, -1}), Tensor::vector({1, 1}), Tensor::vector({0, 0}));
  const double want = 1.0 / std::sqrt(1.0 + 1e-6);
  EXPECT_NEAR(y[0], want, 1e-15);
  EXPECT_NEAR(y[1], -want, 1e-15);
  EXPECT_NEAR(y[0], 0.9999995, 1e-9);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Rng rng(5);
  Tensor y = layer_norm(random_tensor(Shape{3, 4}, rng), Tensor::vector({0, 0, 0, 0}), Tensor::vector({1, 2, 3, 4}));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(y.at(r, c), c + 1.0);
}

TEST(Gelu, ZeroAndAsymptote) {
  Tensor y = gelu(Tensor::vector({0.0, 20.0}));
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 20.0, 1e-12);
}

TEST(Gelu, MatchesQuadratureAtOne) {
  EXPECT_NEAR(gelu(Tensor::vector({1.0}))[0], 1.0 * normal_cdf_quadrature(1.0), 1e-10);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::vector({1, 2, 3});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  Tensor x = Tensor::vector({1.5, -2, 3});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, NonScalarLossRejected) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, SecondPassRejected) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = sum(x);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
}

TEST(Backward, DetachedTensorWarnsAndDoesNothing) {
  std::vector<std::string> warnings;
  WarningHandler saved = warning_handler();
  set_warning_handler([&](const std::string& m) { warnings.push_back(m); });
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor loss = sum(x).detach();
    tape.backward(loss);
  }
  set_warning_handler(saved);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, ComposedGraphMatchesFiniteDifferences) {
  Rng rng(6);
  Tensor w = random_tensor(Shape{4, 3}, rng);
  auto f = [&](const std::vector<Tensor>& in) {
    Tensor h = gelu(layer_norm(matmul(in[0], in[1]), in[2], in[3]));
    return weighted(softmax_lastdim(h), w);
  };
  double worst = max_grad_error(f, {random_tensor(Shape{4, 5}, rng), random_tensor(Shape{5, 3}, rng),
                                    random_tensor(Shape{3}, rng), random_tensor(Shape{3}, rng)});
  EXPECT_LT(worst, 1e-5);
}

TEST(Values, NonFiniteResultRaises) {
  EXPECT_THROW(scale(Tensor::vector({1e308}), 1e10), NumericError);
}

TEST(Values, DeterministicForSameSeed) {
  Rng a(9), b(9);
  Tensor x = random_tensor(Shape{3, 4}, a), y = random_tensor(Shape{3, 4}, b);
  EXPECT_EQ(gelu(matmul(x, transpose(x))).to_vector(), gelu(matmul(y, transpose(y))).to_vector());
}

// Finite-difference checks, 20 random draws per operation.
class GradCheck : public ::testing::Test {
 protected:
  void check(const std::function<double(Rng&)>& one_trial) {
    Rng rng(1234);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) worst = std::max(worst, one_trial(rng));
    EXPECT_LT(worst, 1e-5);
  }
};

TEST_F(GradCheck, Matmul) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 2}, rng);
    return max_grad_error([&](auto& in) { return weighted(matmul(in[0], in[1]), w); },
                          {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{4, 2}, rng)});
  });
}

TEST_F(GradCheck, MatmulTransposed) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 5}, rng);
    return max_grad_error([&](auto& in) { return weighted(matmul_transposed(in[0], in[1]), w); },
                          {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{5, 4}, rng)});
  });
}

TEST_F(GradCheck, Transpose) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{4, 3}, rng);
    return max_grad_error([&](auto& in) { return weighted(transpose(in[0]), w); }, {random_tensor(Shape{3, 4}, rng)});
  });
}

TEST_F(GradCheck, AddSubMul) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 4}, rng);
    return max_grad_error(
        [&](auto& in) { return weighted(mul(sub(in[0], in[1]), add(in[0], in[1])), w); },
        {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{3, 4}, rng)});
  });
}

TEST_F(GradCheck, ScaleAndBias) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 4}, rng);
    return max_grad_error([&](auto& in) { return weighted(add_bias(scale(in[0], -1.7), in[1]), w); },
                          {random_tensor(Shape{3, 4}, rng), random_tensor(Shape{4}, rng)});
  });
}

TEST_F(GradCheck, SqrtMeanSum) {
  check([](Rng& rng) {
    return max_grad_error([&](auto& in) { return add(mean(sqrt(in[0])), sum(in[0])); },
                          {random_tensor(Shape{3, 4}, rng, 0.5, 2.0)});
  });
}

TEST_F(GradCheck, ReshapeSliceGather) {
  check([](Rng& rng) {
    Tensor w1 = random_tensor(Shape{2, 2}, rng), w2 = random_tensor(Shape{3, 5}, rng), w3 = random_tensor(Shape{3, 3}, rng);
    const std::vector<std::size_t> rows{4, 0, 2}, square{0, 2, 4};
    return max_grad_error(
        [&](auto& in) {
          Tensor r = reshape(in[0], Shape{25});
          Tensor a = weighted(slice(in[0], 1, 3, 2, 4), w1);
          Tensor b = weighted(gather_rows(in[0], rows), w2);
          Tensor c = weighted(gather_square(in[0], square), w3);
          return add(add(a, b), add(c, sum(mul(r, r))));
        },
        {random_tensor(Shape{5, 5}, rng)});
  });
}

TEST_F(GradCheck, ScatterConcatBroadcast) {
  check([](Rng& rng) {
    Tensor w1 = random_tensor(Shape{6}, rng), w2 = random_tensor(Shape{3, 5}, rng), w3 = random_tensor(Shape{5, 2}, rng),
           w4 = random_tensor(Shape{4, 3}, rng);
    const std::vector<std::size_t> idx{5, 1, 3};
    return max_grad_error(
        [&](auto& in) {
          Tensor a = weighted(scatter(in[0], idx, 6), w1);
          Tensor b = weighted(concat_cols({in[1], in[2]}), w2);
          Tensor c = weighted(concat_rows({in[1], in[3]}), w3);
          Tensor d = weighted(broadcast_rows(in[0], 4), w4);
          return add(add(a, b), add(c, d));
        },
        {random_tensor(Shape{3}, rng), random_tensor(Shape{3, 2}, rng), random_tensor(Shape{3, 3}, rng),
         random_tensor(Shape{2, 2}, rng)});
  });
}

TEST_F(GradCheck, Softmax) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 5}, rng);
    return max_grad_error([&](auto& in) { return weighted(softmax_lastdim(in[0]), w); },
                          {random_tensor(Shape{3, 5}, rng, -2, 2)});
  });
}

TEST_F(GradCheck, MaskedSoftmaxBothInputs) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 5}, rng);
    return max_grad_error([&](auto& in) { return weighted(masked_softmax(in[0], in[1]), w); },
                          {random_tensor(Shape{3, 5}, rng, -2, 2), random_tensor(Shape{5}, rng, 0.1, 1.0)});
  });
}

TEST_F(GradCheck, LayerNorm) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{3, 6}, rng);
    return max_grad_error([&](auto& in) { return weighted(layer_norm(in[0], in[1], in[2]), w); },
                          {random_tensor(Shape{3, 6}, rng, -2, 2), random_tensor(Shape{6}, rng),
                           random_tensor(Shape{6}, rng)});
  });
}

TEST_F(GradCheck, Gelu) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{4, 4}, rng);
    return max_grad_error([&](auto& in) { return weighted(gelu(in[0]), w); }, {random_tensor(Shape{4, 4}, rng, -3, 3)});
  });
}

TEST_F(GradCheck, RowColMoments) {
  check([](Rng& rng) {
    Tensor a = random_tensor(Shape{4}, rng), b = random_tensor(Shape{5}, rng), c = random_tensor(Shape{4}, rng),
           d = random_tensor(Shape{5}, rng);
    return max_grad_error(
        [&](auto& in) {
          return add(add(weighted(row_mean(in[0]), a), weighted(col_mean(in[0]), b)),
                     add(weighted(row_var(in[0]), c), weighted(col_var(in[0]), d)));
        },
        {random_tensor(Shape{4, 5}, rng)});
  });
}

TEST_F(GradCheck, StraightThroughUsesSoftGradient) {
  check([](Rng& rng) {
    Tensor w = random_tensor(Shape{4}, rng);
    const std::vector<double> hard{1, 0, 1, 1};
    Tensor x = random_tensor(Shape{4}, rng);
    x.set_requires_grad(true);
    std::vector<double> through, soft;
    {
      Tape tape;
      TapeScope scope(tape);
      Tensor st = straight_through(hard, softmax_lastdim(x));
      if (st.to_vector() != hard) return 1.0;
      tape.backward(weighted(st, w));
      through.assign(x.grad().begin(), x.grad().end());
      x.zero_grad();
    }
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(weighted(softmax_lastdim(x), w));
      soft.assign(x.grad().begin(), x.grad().end());
      x.zero_grad();
    }
    double worst = max_grad_error([&](auto& in) { return weighted(softmax_lastdim(in[0]), w); }, {x});
    for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, rel_error(through[i], soft[i]));
    return worst;
  });
}

TEST_F(GradCheck, CrossEntropy) {
  check([](Rng& rng) {
    const std::size_t label = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    return max_grad_error([&](auto& in) { return cross_entropy(in[0], label); }, {random_tensor(Shape{5}, rng, -3, 3)});
  });
}

TEST_F(GradCheck, KlDivergence) {
  check([](Rng& rng) {
    std::vector<double> ref = softmax_lastdim(random_tensor(Shape{5}, rng, -2, 2)).to_vector();
    return max_grad_error([&](auto& in) { return kl_divergence(ref, softmax_lastdim(in[0])); },
                          {random_tensor(Shape{5}, rng, -2, 2)});
  });
}

TEST_F(GradCheck, Cosine) {
  check([](Rng& rng) {
    return max_grad_error([&](auto& in) { return cosine_similarity(in[0], in[1]); },
                          {random_tensor(Shape{6}, rng), random_tensor(Shape{6}, rng)});
  });
}
