#include <gtest/gtest.h>

#include <filesystem>

#include "calign/datasets.hpp"
#include "calign/encoders.hpp"
#include "support/oracles.hpp"

using namespace calign;

namespace {

EncoderConfig small_config(int vocab = 10) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.seed = 5;
  return c;
}

Image noise_image(int size, std::uint64_t seed) {
  Rng rng(seed);
  Image img(size, size, 3);
  for (auto& p : img.pixels) p = uniform01(rng);
  return img;
}

ConceptDocument doc(std::vector<int> ids) {
  ConceptDocument d;
  d.token_to_concept.assign(ids.size(), -1);
  d.token_ids = std::move(ids);
  return d;
}

}  // namespace

TEST(ImageEncoder, ZeroImageWithZeroBiasesGivesZeroGlobal) {
  ImageEncoder enc(small_config());
  for (auto& e : enc.parameters().entries())
    if (e.name.ends_with(".b")) e.var.mutable_value().setZero();
  const auto f = enc.encode(Image(64, 64, 3));
  EXPECT_EQ(f.global_raw.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(ImageEncoder, ShapesAndUnitNorms) {
  const auto cfg = small_config();
  ImageEncoder enc(cfg);
  const auto f = enc.encode(noise_image(64, 1));
  EXPECT_EQ(f.regions_raw.rows(), 16);
  EXPECT_EQ(f.regions_raw.cols(), cfg.d_r);
  EXPECT_EQ(f.global_raw.cols(), cfg.d_v);
  EXPECT_NEAR(f.global.value().norm(), 1.0, 1e-6);
  for (int r = 0; r < 16; ++r) EXPECT_NEAR(f.regions.value().row(r).norm(), 1.0, 1e-6);
  EXPECT_TRUE(f.regions.value().allFinite());
}

TEST(ImageEncoder, LargerImagesGiveLargerGrids) {
  auto cfg = small_config();
  cfg.image_size = 128;
  cfg.grid_h = cfg.grid_w = 8;
  ImageEncoder enc(cfg);
  EXPECT_EQ(enc.encode(noise_image(128, 2)).regions_raw.rows(), 64);
  cfg.grid_h = 4;
  EXPECT_THROW(ImageEncoder{cfg}, ConfigError);
}

TEST(ImageEncoder, DeterministicForFixedParameters) {
  ImageEncoder a(small_config());
  ImageEncoder b(small_config());
  const auto img = noise_image(64, 3);
  const auto fa = a.encode(img);
  const auto fb = b.encode(img);
  EXPECT_EQ(fa.global.value(), fb.global.value());
  EXPECT_EQ(fa.regions.value(), fb.regions.value());
  EXPECT_EQ(a.parameters().checksum(), b.parameters().checksum());
}

TEST(ImageEncoder, WrongImageSizeIsConfigError) {
  ImageEncoder enc(small_config());
  EXPECT_THROW(enc.encode(Image(32, 32, 3)), ConfigError);
  EXPECT_THROW(enc.encode(Image(64, 64, 1)), ConfigError);
}

TEST(ImageEncoder, ProjectionGradientMatchesFiniteDifferences) {
  // Scalar function of the projected global vector, d <= 8.
  auto cfg = small_config();
  cfg.d = 8;
  cfg.d_v = 8;
  cfg.d_r = 6;
  cfg.width1 = 4;
  cfg.width2 = 4;
  ImageEncoder enc(cfg);
  const Mat raw = enc.encode(noise_image(64, 4)).global_raw.value();
  Rng rng(6);
  const Mat target = oracle::random_matrix(1, 8, rng);
  auto f = [&](const std::vector<ad::Var>& w) {
    return ad::sum_all(ad::mul(ad::l2_normalize_rows(ad::matmul(ad::Var(raw), w[0])), ad::Var(target)));
  };
  const auto check = oracle::check_gradient(f, {enc.parameters().at("img.proj_global").value()});
  EXPECT_LT(check.relative_error, 1e-4);
}

TEST(TextEncoder, SingleTokenAggregateIsThatToken) {
  TextEncoder enc(small_config());
  const auto f = enc.encode(doc({4}));
  EXPECT_EQ(f.aggregate_raw.value(), f.tokens_raw.value());
  EXPECT_EQ(f.tokens_raw.value(), enc.parameters().at("txt.embed").value().row(4));
}

TEST(TextEncoder, AggregateIsOrderInvariantAndShapesFollowDocument) {
  TextEncoder enc(small_config());
  const auto a = enc.encode(doc({1, 5, 7}));
  const auto b = enc.encode(doc({7, 1, 5}));
  EXPECT_LT((a.aggregate_raw.value() - b.aggregate_raw.value()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(a.tokens.rows(), 3);
  EXPECT_NEAR(a.global.value().norm(), 1.0, 1e-6);
  for (int r = 0; r < 3; ++r) EXPECT_NEAR(a.tokens.value().row(r).norm(), 1.0, 1e-6);
}

TEST(TextEncoder, UnknownTokenIsVocabularyError) {
  TextEncoder enc(small_config(6));
  EXPECT_THROW(enc.encode(doc({6})), VocabularyError);
  EXPECT_THROW(enc.encode(doc({-1})), VocabularyError);
  EXPECT_THROW(enc.encode(doc({})), VocabularyError);
}

TEST(TextEncoder, EmbeddingsFrozenByDefault) {
  TextEncoder enc(small_config());
  EXPECT_FALSE(enc.parameters().at("txt.embed").requires_grad());
  EXPECT_TRUE(enc.parameters().at("txt.proj_token").requires_grad());
  auto cfg = small_config();
  cfg.train_token_embeddings = true;
  EXPECT_TRUE(TextEncoder(cfg).parameters().at("txt.embed").requires_grad());
}

// ---------------------------------------------------------------------------
// Cached-embedding adapter

namespace {
ConceptVocabulary two_phrase_vocab() {
  ConceptVocabulary v;
  v.add("a", "a", "blue disk");
  v.add("b", "b", "red disk");
  return v;  // tokens: no, findings, blue, disk, red
}

EmbeddingCache cache_for(const ConceptVocabulary& v, int dim, const std::string& skip = "") {
  EmbeddingCache c;
  c.model_id = "frozen-test-model";
  c.dim = dim;
  for (int id = 0; id < v.token_count(); ++id) {
    const auto& w = v.token_string(id);
    if (w == skip) continue;
    std::vector<double> vec(static_cast<std::size_t>(dim));
    for (int j = 0; j < dim; ++j) vec[static_cast<std::size_t>(j)] = id + 0.125 * j;
    c.vectors[w] = vec;
  }
  return c;
}
}  // namespace

TEST(EmbeddingAdapter, FileRoundTripAndFrozenRows) {
  const auto vocab = two_phrase_vocab();
  const auto path = std::filesystem::temp_directory_path() / "calign_cache_test.txt";
  cache_for(vocab, 5).save(path);
  const auto cache = EmbeddingCache::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(cache.model_id, "frozen-test-model");
  EXPECT_EQ(cache.dim, 5);
  TextEncoder enc(small_config(), cache, vocab);
  EXPECT_TRUE(enc.is_adapter());
  EXPECT_EQ(enc.config().d_t, 5);
  EXPECT_FALSE(enc.parameters().at("txt.embed").requires_grad());
  const auto f = enc.encode(build_concept_document(std::vector<int>{1, 0}, vocab));
  EXPECT_DOUBLE_EQ(f.tokens_raw.value()(0, 1), *vocab.token_id("blue") + 0.125);
}

TEST(EmbeddingAdapter, MissingTokenIsAdapterError) {
  const auto vocab = two_phrase_vocab();
  TextEncoder enc(small_config(), cache_for(vocab, 4, "red"), vocab);
  EXPECT_NO_THROW(enc.encode(build_concept_document(std::vector<int>{1, 0}, vocab)));
  EXPECT_THROW(enc.encode(build_concept_document(std::vector<int>{0, 1}, vocab)), AdapterError);
}

TEST(EmbeddingAdapter, UnknownTokenIdIsVocabularyError) {
  const auto vocab = two_phrase_vocab();
  TextEncoder enc(small_config(), cache_for(vocab, 4), vocab);
  EXPECT_THROW(enc.encode(doc({vocab.token_count()})), VocabularyError);
}

TEST(EmbeddingAdapter, MalformedCacheFilesRejected) {
  const auto path = std::filesystem::temp_directory_path() / "calign_cache_bad.txt";
  {
    std::ofstream(path) << "model=x\ndim=2\nblue\t1 2\n";
  }
  EXPECT_THROW(EmbeddingCache::load(path), AdapterError);  // no header line
  {
    std::ofstream(path) << "# calign-embedding-cache v1\nmodel=x\ndim=3\nblue\t1 2\n";
  }
  EXPECT_THROW(EmbeddingCache::load(path), AdapterError);  // wrong width
  std::filesystem::remove(path);
  EXPECT_THROW(EmbeddingCache::load(path), AdapterError);
}
