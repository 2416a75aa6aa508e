#include <gtest/gtest.h>

#include "calign/autograd.hpp"
#include "support/oracles.hpp"

using namespace calign;
using oracle::check_gradient;
using oracle::random_matrix;

namespace {

constexpr double kTol = 1e-6;

struct OpCase {
  const char* name;
  std::function<ad::Var(const std::vector<ad::Var>&)> f;
  std::vector<std::pair<int, int>> shapes;
};

// Every op is reduced to a scalar through a fixed random weighting so that
// all output entries contribute distinct gradients.
ad::Var weigh(const ad::Var& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ad::sum_all(ad::mul(y, ad::Var(random_matrix(y.rows(), y.cols(), rng))));
}

std::vector<OpCase> op_cases() {
  return {
      {"matmul", [](const auto& v) { return weigh(ad::matmul(v[0], v[1])); }, {{3, 4}, {4, 2}}},
      {"matmul_nt", [](const auto& v) { return weigh(ad::matmul_nt(v[0], v[1])); }, {{3, 4}, {5, 4}}},
      {"add", [](const auto& v) { return weigh(ad::add(v[0], v[1])); }, {{2, 3}, {2, 3}}},
      {"sub", [](const auto& v) { return weigh(ad::sub(v[0], v[1])); }, {{2, 3}, {2, 3}}},
      {"mul", [](const auto& v) { return weigh(ad::mul(v[0], v[1])); }, {{2, 3}, {2, 3}}},
      {"add_row", [](const auto& v) { return weigh(ad::add_row(v[0], v[1])); }, {{4, 3}, {1, 3}}},
      {"scale", [](const auto& v) { return weigh(ad::scale(v[0], -2.5)); }, {{3, 3}}},
      {"add_scalar", [](const auto& v) { return weigh(ad::add_scalar(v[0], 0.7)); }, {{3, 3}}},
      {"sigmoid", [](const auto& v) { return weigh(ad::sigmoid(v[0])); }, {{3, 4}}},
      {"transpose", [](const auto& v) { return weigh(ad::transpose(v[0])); }, {{3, 4}}},
      {"mean_rows", [](const auto& v) { return weigh(ad::mean_rows(v[0])); }, {{5, 3}}},
      {"row_dot", [](const auto& v) { return weigh(ad::row_dot(v[0], v[1])); }, {{4, 3}, {4, 3}}},
      {"l2_normalize_rows", [](const auto& v) { return weigh(ad::l2_normalize_rows(v[0])); }, {{4, 5}}},
      {"softmax_rows", [](const auto& v) { return weigh(ad::softmax_rows(v[0])); }, {{3, 5}}},
      {"logsumexp_all", [](const auto& v) { return ad::logsumexp_all(v[0]); }, {{4, 3}}},
      {"concat_rows",
       [](const auto& v) {
         std::vector<ad::Var> parts{v[0], v[1]};
         return weigh(ad::concat_rows(parts));
       },
       {{2, 3}, {3, 3}}},
      {"select_rows", [](const auto& v) { return weigh(ad::select_rows(v[0], {2, 0, 2, 1})); }, {{3, 4}}},
      {"cross_entropy_mean", [](const auto& v) { return ad::cross_entropy_rows(v[0], {1, 0, 3}); }, {{3, 4}}},
      {"cross_entropy_sum",
       [](const auto& v) { return ad::cross_entropy_rows(v[0], {1, 0, 3}, ad::Reduction::Sum); },
       {{3, 4}}},
      {"bce_with_logits",
       [](const auto& v) {
         Mat t(2, 3);
         t << 1, 0, 1, 0, 0, 1;
         return ad::bce_with_logits_sum(v[0], t, Mat::Ones(2, 3));
       },
       {{2, 3}}},
      {"bce_probs",
       [](const auto& v) {
         Mat t(2, 3);
         t << 1, 0, 1, 0, 0, 1;
         Mat mask = Mat::Ones(2, 3);
         mask(1, 2) = 0.0;
         return ad::bce_probs_sum(ad::sigmoid(v[0]), t, mask, 1e-6);
       },
       {{2, 3}}},
      {"stack_scalars",
       [](const auto& v) {
         std::vector<ad::Var> s{ad::sum_all(v[0]), ad::logsumexp_all(v[0]), ad::sum_all(ad::mul(v[0], v[0]))};
         return weigh(ad::stack_scalars(s, 1, 3));
       },
       {{2, 2}}},
  };
}

}  // namespace

TEST(Autograd, EveryOpMatchesCentralDifferences) {
  Rng rng(1234);
  for (const auto& c : op_cases()) {
    std::vector<Mat> inputs;
    for (auto [r, k] : c.shapes) inputs.push_back(random_matrix(r, k, rng));
    const auto check = check_gradient(c.f, inputs);
    EXPECT_LT(check.relative_error, kTol) << c.name;
    EXPECT_GT(check.analytic_norm, 0.0) << c.name;
  }
}

TEST(Autograd, ReluGradientAwayFromKink) {
  Mat x(2, 3);
  x << 0.5, -0.7, 1.2, -0.3, 0.9, -1.1;
  const auto check = check_gradient([](const auto& v) { return weigh(ad::relu(v[0])); }, {x});
  EXPECT_LT(check.relative_error, kTol);
}

TEST(Autograd, ConvMatchesDirectLoopsAndGradients) {
  Rng rng(7);
  struct Geo {
    int h, w, c, k, stride, pad, out;
  };
  for (const Geo g : {Geo{8, 8, 3, 4, 4, 0, 5}, Geo{6, 6, 2, 3, 2, 1, 4}, Geo{5, 7, 1, 3, 1, 1, 2}}) {
    ad::ConvGeometry geo{g.h, g.w, g.c, g.k, g.stride, g.pad};
    const Mat x = random_matrix(g.h * g.w, g.c, rng);
    const Mat w = random_matrix(geo.patch_size(), g.out, rng);
    const Mat b = random_matrix(1, g.out, rng);
    const Mat got = ad::conv2d(ad::Var(x), geo, ad::Var(w), ad::Var(b)).value();
    const Mat want = oracle::conv_reference(x, g.h, g.w, g.c, g.k, g.stride, g.pad, w, b);
    ASSERT_EQ(got.rows(), geo.out_h() * geo.out_w());
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-12);
    const auto check = check_gradient(
        [geo](const auto& v) { return weigh(ad::conv2d(v[0], geo, v[1], v[2])); }, {x, w, b});
    EXPECT_LT(check.relative_error, kTol);
  }
}

TEST(Autograd, GradientsAccumulateAcrossSharedUses) {
  ad::Var x(Mat::Constant(1, 1, 3.0), true);
  auto y = ad::add(ad::mul(x, x), x);  // x^2 + x
  ad::backward(y);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 7.0);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  ad::Var x(Mat::Ones(2, 2), true);
  ad::Var y;
  {
    ad::NoGradGuard guard;
    y = ad::sum_all(ad::mul(x, x));
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, SoftmaxIsStableForLargeLogits) {
  Mat x(1, 3);
  x << 1000.0, 999.0, -1000.0;
  const Mat p = ad::softmax_rows_value(x);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  EXPECT_NEAR(ad::logsumexp_value(x), 1000.0 + std::log1p(std::exp(-1.0)), 1e-9);
}
