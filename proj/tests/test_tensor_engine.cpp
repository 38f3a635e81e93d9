#include <gtest/gtest.h>

#include <cmath>

#include "ecvit/error.hpp"
#include "ecvit/gradcheck.hpp"
#include "ecvit/ops.hpp"
#include "ecvit/parallel.hpp"
#include "ecvit/verify/oracles.hpp"
#include "ecvit/verify/suites.hpp"

using namespace ecvit;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

std::vector<double> vals(const TD& t) { return t.to_vector(); }

}  // namespace

TEST(Tensor, ConstructionChecksSize) {
  EXPECT_THROW(TD({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(TD(Shape{}), ShapeError);
  TD t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.at({1, 2}), 1.5);
}

TEST(Matmul, IdentityAndHandContraction) {
  const TD eye({2, 2}, {1, 0, 0, 1});
  const TD v({2, 1}, {3, 4});
  EXPECT_EQ(vals(matmul(eye, v)), (std::vector<double>{3, 4}));
  const TD a({2, 2}, {1, 2, 3, 4});
  const TD b({2, 1}, {5, 6});
  EXPECT_EQ(vals(matmul(a, b)), (std::vector<double>{17, 39}));
}

TEST(Matmul, GradientOfSum) {
  TD a({2, 2}, {1, 2, 3, 4});
  a.set_requires_grad(true);
  const TD b({2, 1}, {5, 6});
  backward(sum(matmul(a, b)));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{5, 6, 5, 6}));
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    (void)matmul(TD({2, 3}), TD({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, AllOnes) {
  const TD x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0);
  const TD y = conv2d(x, w, TD(), {});
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng(3);
  const TD x = verify::random_tensor<double>({2, 3, 5, 4}, rng);
  TD w({3, 1, 3, 3}, 0.0);
  for (std::int64_t c = 0; c < 3; ++c) w.set({c, 0, 1, 1}, 1.0);
  EXPECT_EQ(vals(conv2d(x, w, TD(), {.pad = {1, 1}, .groups = 3})), vals(x));
  TD dense({1, 1, 3, 3}, 0.0);
  dense.set({0, 0, 1, 1}, 1.0);
  const TD x1 = verify::random_tensor<double>({1, 1, 4, 4}, rng);
  EXPECT_EQ(vals(conv2d(x1, dense, TD(), {.pad = {1, 1}})), vals(x1));
}

TEST(Conv2d, GroupedMatchesOracle) {
  Rng rng(5);
  const TF x = verify::random_tensor<float>({1, 2, 5, 5}, rng);
  const TF w = verify::random_tensor<float>({4, 1, 3, 3}, rng);
  const auto y = verify::as_doubles(conv2d(x, w, TF(), {.groups = 2}));
  const auto ref = oracle::conv2d(verify::as_doubles(x), {1, 2, 5, 5}, verify::as_doubles(w), {4, 1, 3, 3}, {}, 1, 1,
                                  0, 0, 2, nullptr);
  ASSERT_EQ(y.size(), ref.size());
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-6);
}

TEST(Conv2d, Errors) {
  EXPECT_THROW(conv2d(TD({1, 3, 4, 4}), TD({2, 1, 3, 3}), TD(), {.groups = 2}), ConfigError);
  EXPECT_THROW(conv2d(TD({1, 1, 2, 2}), TD({1, 1, 3, 3}), TD(), {}), ConfigError);
  EXPECT_THROW(conv2d(TD({1, 2, 4, 4}), TD({1, 1, 3, 3}), TD(), {}), ShapeError);
}

TEST(Conv2d, FloorsOutputSize) {
  const TD y = conv2d(TD({1, 1, 6, 6}, 1.0), TD({1, 1, 3, 3}, 1.0), TD(), {.stride = {2, 2}});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
}

TEST(Maxpool2d, SingleWindowAndTies) {
  const TD x({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(maxpool2d(x, {}).item(), 4.0);
  TD c({1, 1, 4, 4}, 2.0);
  c.set_requires_grad(true);
  const TD y = maxpool2d(c, {});
  EXPECT_EQ(vals(y), std::vector<double>(4, 2.0));
  backward(sum(y));
  const std::vector<double> expect{1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0};
  EXPECT_EQ(std::vector<double>(c.grad().begin(), c.grad().end()), expect);
}

TEST(Maxpool2d, MatchesSlidingWindowOracle) {
  Rng rng(9);
  const TD x = verify::random_tensor<double>({1, 1, 6, 6}, rng);
  const TD y = maxpool2d(x, {.kernel = {3, 3}, .stride = {2, 2}, .pad = {1, 1}});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(vals(y), oracle::maxpool2d(vals(x), {1, 1, 6, 6}, 3, 2, 1, nullptr));
}

TEST(Maxpool2d, WindowLargerThanInput) {
  EXPECT_THROW(maxpool2d(TD({1, 1, 2, 2}), {.kernel = {5, 5}, .stride = {1, 1}}), ConfigError);
}

TEST(Maxpool1dSeq, Examples) {
  const TD x({1, 4, 1}, {1, 5, 2, 3});
  EXPECT_EQ(vals(maxpool1d_seq(x, 2, 2)), (std::vector<double>{5, 3}));
  const TD same({1, 4, 3}, 0.25);
  const TD y = maxpool1d_seq(same, 2, 2);
  EXPECT_EQ(y.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(vals(y), std::vector<double>(6, 0.25));
  Rng rng(11);
  const TD r = verify::random_tensor<double>({1, 8, 4}, rng);
  EXPECT_EQ(vals(maxpool1d_seq(r, 4, 4)), oracle::group_max(vals(r), 1, 8, 4, 4));
  EXPECT_THROW(maxpool1d_seq(TD({1, 6, 2}), 4, 4), DivisibilityError);
}

TEST(Activations, Gelu) {
  EXPECT_EQ(gelu(TD({1}, 0.0)).item(), 0.0);
  EXPECT_NEAR(gelu(TD({1}, 1.0)).item(), 0.841345, 5e-7);
  TD x({1}, 0.5);
  x.set_requires_grad(true);
  backward(sum(gelu(x)));
  const TD fd = finite_diff_grad([](const TD& v) { return sum(gelu(v)).item(); }, x);
  EXPECT_NEAR(x.grad()[0], fd.item(), 1e-8);
  EXPECT_EQ(vals(relu(TD({3}, {-1, 0, 2}))), (std::vector<double>{0, 0, 2}));
}

TEST(Softmax, Examples) {
  const auto u = vals(softmax(TD({3}, 0.0), 0));
  for (double v : u) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const auto big = vals(softmax(TD({2}, {1000, 0}), 0));
  EXPECT_EQ(big[0], 1.0);
  EXPECT_EQ(big[1], 0.0);
  const TF f = softmax(TF({2}, {1000.0f, 0.0f}), 0);
  EXPECT_TRUE(std::isfinite(f.at({0})));
}

TEST(BatchNorm, TrainNormalizes) {
  Rng rng(13);
  const TD x = verify::random_tensor<double>({4, 3, 2, 2}, rng, -3, 5);
  TD rm({3}, 0.0), rv({3}, 1.0);
  const TD y = batchnorm(x, TD({3}, 1.0), TD({3}, 0.0), rm, rv, Mode::kTrain);
  for (std::int64_t c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (std::int64_t b = 0; b < 4; ++b)
      for (std::int64_t i = 0; i < 2; ++i)
        for (std::int64_t j = 0; j < 2; ++j) {
          s += y.at({b, c, i, j});
          s2 += y.at({b, c, i, j}) * y.at({b, c, i, j});
        }
    EXPECT_NEAR(s / 16, 0.0, 1e-5);
    EXPECT_NEAR(s2 / 16, 1.0, 1e-5);
  }
}

TEST(BatchNorm, EvalWithInitialBuffers) {
  Rng rng(15);
  const TD x = verify::random_tensor<double>({2, 2, 3, 3}, rng);
  TD rm({2}, 0.0), rv({2}, 1.0);
  const TD y = batchnorm(x, TD({2}, 1.0), TD({2}, 0.0), rm, rv, Mode::kEval);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.data()[i], x.data()[i] / std::sqrt(1 + 1e-5), 1e-12);
}

TEST(BatchNorm, RunningStatisticsTwoSteps) {
  // Channel values {1,3} then {2,6}: means 2 and 4, unbiased variances 2 and 8.
  TD rm({1}, 0.0), rv({1}, 1.0);
  const TD g({1}, 1.0), b({1}, 0.0);
  batchnorm(TD({2, 1}, {1, 3}), g, b, rm, rv, Mode::kTrain);
  batchnorm(TD({2, 1}, {2, 6}), g, b, rm, rv, Mode::kTrain);
  EXPECT_NEAR(rm.item(), 0.9 * (0.9 * 0 + 0.1 * 2) + 0.1 * 4, 1e-15);
  EXPECT_NEAR(rv.item(), 0.9 * (0.9 * 1 + 0.1 * 2) + 0.1 * 8, 1e-15);
}

TEST(LayerNorm, Examples) {
  const auto z = vals(layernorm(TD({4}, 3.0), TD({4}, 1.0), TD({4}, 0.0)));
  for (double v : z) EXPECT_EQ(v, 0.0);
  const auto pm = vals(layernorm(TD({2}, {1, -1}), TD({2}, 1.0), TD({2}, 0.0)));
  EXPECT_NEAR(pm[0], 1.0, 1e-5);
  EXPECT_NEAR(pm[1], -1.0, 1e-5);
}

TEST(Backward, LinearAndQuadratic) {
  TD x({3}, {1, 2, 3});
  x.set_requires_grad(true);
  backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
  TD y({2}, {1, 2});
  y.set_requires_grad(true);
  backward(sum(mul(y, y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4}));
}

TEST(Backward, RejectsNonScalar) {
  TD x({3}, 1.0);
  x.set_requires_grad(true);
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, TwoConsumersSumContributions) {
  TD x({2}, {0.5, -1.5});
  x.set_requires_grad(true);
  // d/dx [3x + x^2] = 3 + 2x
  backward(sum(add(scale(x, 3.0), mul(x, x))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  TD x({2}, 1.0);
  x.set_requires_grad(true);
  NoGradGuard guard;
  const TD y = mul(x, x);
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(FiniteDiff, SumOfSquares) {
  Rng rng(17);
  const TD x = verify::random_tensor<double>({5}, rng);
  const TD g = finite_diff_grad([](const TD& v) { return sum(mul(v, v)).item(); }, x);
  for (std::int64_t i = 0; i < 5; ++i) EXPECT_NEAR(g.data()[i], 2 * x.data()[i], 1e-7);
}

TEST(Layout, ReshapeTransposeRoundTrip) {
  Rng rng(19);
  const TD x = verify::random_tensor<double>({2, 3, 4}, rng);
  EXPECT_EQ(vals(reshape(reshape(x, {6, -1}), {2, 3, 4})), vals(x));
  EXPECT_EQ(vals(transpose(transpose(x, 0, 2), 0, 2)), vals(x));
  EXPECT_EQ(vals(permute(permute(x, {1, 2, 0}), {2, 0, 1})), vals(x));
  const auto parts = split(x, 1, {1, 2});
  EXPECT_EQ(vals(concat(parts, 1)), vals(x));
}

TEST(CrossEntropy, StableAndChecked) {
  const std::vector<std::int64_t> labels{0};
  const TD l = cross_entropy(TD({1, 2}, {1000, 0}), std::span<const std::int64_t>(labels));
  EXPECT_NEAR(l.item(), 0.0, 1e-12);
  const std::vector<std::int64_t> bad{2};
  EXPECT_THROW(cross_entropy(TD({1, 2}), std::span<const std::int64_t>(bad)), ContractError);
  const std::vector<std::int64_t> two{1, 0};
  EXPECT_NEAR(cross_entropy(TD({2, 4}, 0.0), std::span<const std::int64_t>(two)).item(), std::log(4.0), 1e-12);
}

TEST(Argmax, FirstMaximum) {
  const TD x({2, 3}, {1, 3, 3, 5, 0, 5});
  EXPECT_EQ(argmax(x, 1), (std::vector<std::int64_t>{1, 0}));
}

TEST(Determinism, ForwardBackwardBitwise) {
  auto run = [] {
    Rng rng(23);
    TD a = verify::random_tensor<double>({3, 4, 5}, rng, -2, 2, true);
    TD w = verify::random_tensor<double>({5, 6}, rng, -2, 2, true);
    backward(sum(gelu(softmax(matmul(a, w), -1))));
    auto out = a.to_vector();
    out.insert(out.end(), a.grad().begin(), a.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
  auto run = [] {
    Rng rng(29);
    TF x = verify::random_tensor<float>({3, 8, 9, 9}, rng, -1, 1, true);
    const TF w = verify::random_tensor<float>({8, 1, 3, 3}, rng);
    const TF y = conv2d(x, w, TF(), {.pad = {1, 1}, .groups = 8});
    backward(sum(mul(y, y)));
    auto out = y.to_vector();
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  set_worker_threads(1);
  const auto one = run();
  set_worker_threads(3);
  const auto three = run();
  set_worker_threads(0);
  EXPECT_EQ(one, three);
}

TEST(PrimitiveGradients, AllPass) {
  const auto suite = verify::gradcheck_primitives(1);
  for (const auto& c : suite) EXPECT_TRUE(c.pass) << c.name << " err " << c.error;
}
