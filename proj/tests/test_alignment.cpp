#include <gtest/gtest.h>

#include "calign/alignment.hpp"
#include "calign/objective.hpp"
#include "support/oracles.hpp"

using namespace calign;
using oracle::random_matrix;
using oracle::unit_rows;

// ---------------------------------------------------------------------------
// Image-level contrastive loss

TEST(ImageLevelLoss, SinglePairIsZero) {
  Rng rng(1);
  const Mat a = unit_rows(1, 5, rng);
  const Mat b = unit_rows(1, 5, rng);
  EXPECT_NEAR(ila_loss(ad::Var(a), ad::Var(b), 0.25).loss.item(), 0.0, 1e-15);
}

TEST(ImageLevelLoss, EqualSimilaritiesGiveLogN) {
  // Identical rows make every similarity equal.
  for (int n : {2, 5, 9}) {
    Mat a = Mat::Zero(n, 4);
    a.col(0).setOnes();
    EXPECT_NEAR(ila_loss(ad::Var(a), ad::Var(a), 0.25).loss.item(), std::log(n), 1e-12) << n;
  }
}

TEST(ImageLevelLoss, OrthonormalPairClosedForm) {
  const Mat eye = Mat::Identity(2, 2);
  const double want = -std::log(std::exp(4.0) / (std::exp(4.0) + 1.0));
  EXPECT_NEAR(ila_loss(ad::Var(eye), ad::Var(eye), 0.25).loss.item(), want, 1e-12);
}

TEST(ImageLevelLoss, MatchesLongDoubleOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 2 + trial % 5;
    const Mat a = unit_rows(n, 6, rng);
    const Mat b = unit_rows(n, 6, rng);
    for (auto red : {ad::Reduction::Mean, ad::Reduction::Sum}) {
      const double got = ila_loss(ad::Var(a), ad::Var(b), 0.3, red).loss.item();
      const auto want = oracle::image_level_loss(a, b, 0.3, red == ad::Reduction::Mean);
      EXPECT_NEAR(got, static_cast<double>(want), 1e-12);
    }
  }
}

TEST(ImageLevelLoss, SumReductionIsNTimesMean) {
  Rng rng(3);
  const Mat a = unit_rows(4, 3, rng);
  const Mat b = unit_rows(4, 3, rng);
  const double mean = ila_loss(ad::Var(a), ad::Var(b), 0.5).loss.item();
  const double sum = ila_loss(ad::Var(a), ad::Var(b), 0.5, ad::Reduction::Sum).loss.item();
  EXPECT_NEAR(sum, 4 * mean, 1e-12);
}

TEST(ImageLevelLoss, RejectsNonFiniteAndMismatchedInput) {
  Mat a = Mat::Identity(2, 2);
  Mat bad = a;
  bad(0, 0) = std::nan("");
  EXPECT_THROW(ila_loss(ad::Var(a), ad::Var(bad), 0.25), NumericError);
  EXPECT_THROW(ila_loss(ad::Var(a), ad::Var(Mat::Identity(3, 2)), 0.25), NumericError);
}

// ---------------------------------------------------------------------------
// Cross-attention and token matching

TEST(CrossAttention, IdenticalRegionsSplitEvenly) {
  Mat regions(2, 3);
  regions << 1, 0, 0, 1, 0, 0;
  Rng rng(4);
  const Mat tokens = unit_rows(3, 3, rng);
  const Mat w = cross_attention(ad::Var(regions), ad::Var(tokens), 0.2).weights.value();
  EXPECT_LT((w.array() - 0.5).abs().maxCoeff(), 1e-15);
}

TEST(CrossAttention, SmallTemperatureConcentratesOnBestRegion) {
  Rng rng(5);
  const Mat regions = unit_rows(8, 6, rng);
  Mat tokens = regions.topRows(3);  // each token equals one region
  const Mat w = cross_attention(ad::Var(regions), ad::Var(tokens), 0.01).weights.value();
  for (int t = 0; t < 3; ++t) EXPECT_GE(w(t, t), 0.99);
}

TEST(CrossAttention, MatchesOracleAndRowsSumToOne) {
  Rng rng(6);
  const Mat regions = unit_rows(16, 5, rng);
  const Mat tokens = unit_rows(4, 5, rng);
  const auto m = cross_attention(ad::Var(regions), ad::Var(tokens), 0.2);
  const auto w_ref = oracle::attention(regions, tokens, 0.2);
  const auto g_ref = oracle::grounded(regions, tokens, 0.2);
  for (int t = 0; t < 4; ++t) {
    EXPECT_NEAR(m.weights.value().row(t).sum(), 1.0, 1e-12);
    for (int r = 0; r < 16; ++r) EXPECT_NEAR(m.weights.value()(t, r), static_cast<double>(w_ref[t][r]), 1e-14);
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(m.grounded.value()(t, c), static_cast<double>(g_ref[t][c]), 1e-14);
  }
}

TEST(TokenMatch, SingleTokenIsExactSimilarity) {
  Rng rng(7);
  const Mat g = random_matrix(1, 4, rng);
  const Mat a = random_matrix(1, 4, rng);
  EXPECT_NEAR(token_match(ad::Var(g), ad::Var(a), 0.1).item(), g.row(0).dot(a.row(0)), 1e-14);
}

TEST(TokenMatch, ConstantSimilaritiesAddTauLogW) {
  for (int w : {2, 3, 7}) {
    Mat g = Mat::Zero(w, 2);
    g.col(0).setConstant(0.6);
    Mat a = Mat::Zero(w, 2);
    a.col(0).setOnes();
    EXPECT_NEAR(token_match(ad::Var(g), ad::Var(a), 0.1).item(), 0.6 + 0.1 * std::log(w), 1e-13);
  }
}

TEST(TokenMatch, BoundedByMaxAndMaxPlusTauLogW) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const int w = 1 + trial % 6;
    const Mat g = random_matrix(w, 5, rng);
    const Mat a = random_matrix(w, 5, rng);
    const double tau = 0.05 + 0.1 * (trial % 3);
    const double got = token_match(ad::Var(g), ad::Var(a), tau).item();
    const double mx = g.cwiseProduct(a).rowwise().sum().maxCoeff();
    EXPECT_GE(got, mx - 1e-12);
    EXPECT_LE(got, mx + tau * std::log(w) + 1e-12);
    const auto ref = oracle::token_match(oracle::to_long(g), a, tau);
    EXPECT_NEAR(got, static_cast<double>(ref), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Token-level contrastive loss

namespace {
std::pair<std::vector<VisualFeatures>, std::vector<TextFeatures>> features(const std::vector<Mat>& regions,
                                                                          const std::vector<Mat>& tokens) {
  std::vector<VisualFeatures> v;
  std::vector<TextFeatures> t;
  for (const auto& r : regions) {
    VisualFeatures f;
    f.regions = ad::Var(r);
    v.push_back(f);
  }
  for (const auto& k : tokens) {
    TextFeatures f;
    f.tokens = ad::Var(k);
    t.push_back(f);
  }
  return {v, t};
}
}  // namespace

TEST(TokenLevelLoss, SinglePairIsZero) {
  Rng rng(9);
  auto [v, t] = features({unit_rows(4, 3, rng)}, {unit_rows(2, 3, rng)});
  EXPECT_NEAR(tla_loss(v, t, 0.2, 0.1).loss.item(), 0.0, 1e-15);
}

TEST(TokenLevelLoss, ConstantMatchGivesLogN) {
  // All regions and tokens equal: every image/document score is identical.
  Mat r = Mat::Zero(4, 3);
  r.col(1).setOnes();
  Mat k = Mat::Zero(2, 3);
  k.col(1).setOnes();
  for (int n : {2, 4}) {
    auto [v, t] = features(std::vector<Mat>(n, r), std::vector<Mat>(n, k));
    EXPECT_NEAR(tla_loss(v, t, 0.2, 0.1).loss.item(), std::log(n), 1e-12);
  }
}

TEST(TokenLevelLoss, MatchesOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 2 + trial % 3;
    std::vector<Mat> regions, tokens;
    for (int i = 0; i < n; ++i) {
      regions.push_back(unit_rows(4, 5, rng));
      tokens.push_back(unit_rows(1 + (i + trial) % 3, 5, rng));
    }
    auto [v, t] = features(regions, tokens);
    const double got = tla_loss(v, t, 0.2, 0.1).loss.item();
    EXPECT_NEAR(got, static_cast<double>(oracle::token_level_loss(regions, tokens, 0.2, 0.1)), 1e-12);
  }
}

TEST(TokenLevelLoss, GradientOnSmallExample) {
  // N=2 pairs, W=2 tokens, R=4 regions, d=6, central step 1e-4.
  Rng rng(11);
  std::vector<Mat> inputs{random_matrix(4, 6, rng), random_matrix(4, 6, rng), random_matrix(2, 6, rng),
                          random_matrix(2, 6, rng)};
  auto f = [](const std::vector<ad::Var>& x) {
    std::vector<VisualFeatures> v(2);
    std::vector<TextFeatures> t(2);
    for (int i = 0; i < 2; ++i) {
      v[i].regions = ad::l2_normalize_rows(x[i]);
      t[i].tokens = ad::l2_normalize_rows(x[2 + i]);
    }
    return tla_loss(v, t, 0.2, 0.1).loss;
  };
  EXPECT_LT(oracle::check_gradient(f, inputs, 1e-4).relative_error, 1e-4);
}

// ---------------------------------------------------------------------------
// Weighted stage-1 objective

namespace {
struct Batch {
  std::vector<VisualFeatures> images;
  std::vector<TextFeatures> texts;
  std::vector<ConceptDocument> docs;
  std::vector<std::vector<int>> labels;
  CAVBank bank;
};

Batch make_batch(std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  ConceptVocabulary vocab;
  vocab.add("a", "a", "alpha one");
  vocab.add("b", "b", "beta");
  std::vector<std::vector<int>> all{{1, 0}, {0, 1}, {1, 1}, {0, 0}};
  for (const auto& l : all) {
    VisualFeatures v;
    v.global = ad::Var(unit_rows(1, 4, rng));
    v.regions = ad::Var(unit_rows(4, 4, rng));
    TextFeatures t;
    const auto doc = build_concept_document(std::span<const int>(l), vocab);
    t.global = ad::Var(unit_rows(1, 4, rng));
    t.tokens = ad::Var(unit_rows(doc.size(), 4, rng));
    b.images.push_back(v);
    b.texts.push_back(t);
    b.docs.push_back(doc);
    b.labels.push_back(l);
  }
  b.bank = fit_cavs(random_matrix(8, 4, rng), {{1, 0}, {0, 1}, {1, 1}, {0, 0}, {1, 0}, {0, 1}, {1, 1}, {0, 0}},
                    {"a", "b"});
  return b;
}
}  // namespace

TEST(Stage1Objective, WeightedSumOfComponents) {
  const auto b = make_batch(12);
  AlignmentConfig all;
  const auto ref = stage1_loss(b.images, b.texts, b.docs, b.labels, b.bank, all, true);
  ASSERT_FALSE(ref.cla_skipped);
  for (auto [l1, l2, l3] : std::vector<std::array<double, 3>>{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0.5, 2, 0.25}}) {
    AlignmentConfig cfg;
    cfg.lambda1 = l1;
    cfg.lambda2 = l2;
    cfg.lambda3 = l3;
    const auto got = stage1_loss(b.images, b.texts, b.docs, b.labels, b.bank, cfg);
    const double want = l1 * ref.ila.item() + l2 * ref.tla.item() + l3 * ref.cla.item();
    EXPECT_NEAR(got.total.item(), want, 1e-12);
  }
}

TEST(Stage1Objective, ZeroWeightTermsAreNotEvaluated) {
  const auto b = make_batch(13);
  AlignmentConfig cfg;
  cfg.lambda2 = 0;
  cfg.lambda3 = 0;
  const auto got = stage1_loss(b.images, b.texts, b.docs, b.labels, b.bank, cfg);
  EXPECT_EQ(got.tla.item(), 0.0);
  EXPECT_EQ(got.cla.item(), 0.0);
  EXPECT_GT(got.ila.item(), 0.0);
}

TEST(Stage1Objective, InvalidConfigRejected) {
  const auto b = make_batch(14);
  AlignmentConfig cfg;
  cfg.tau1 = 0;
  EXPECT_THROW(stage1_loss(b.images, b.texts, b.docs, b.labels, b.bank, cfg), ConfigError);
  cfg = {};
  cfg.lambda2 = -1;
  EXPECT_THROW(stage1_loss(b.images, b.texts, b.docs, b.labels, b.bank, cfg), ConfigError);
}
