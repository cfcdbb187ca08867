#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "uar/errors.hpp"
#include "uar/lsu.hpp"

using namespace uar;

namespace {

std::vector<std::vector<std::string>> tokenized(const std::vector<std::string>& texts) {
  std::vector<std::vector<std::string>> out;
  for (const auto& t : texts) out.push_back(lsu::tokenize(t));
  return out;
}

ImageTensor noise_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageTensor im(h, w, 1);
  for (double& v : im.values) v = u(rng);
  return im;
}

lsu::DvaeConfig small_config() {
  lsu::DvaeConfig c;
  c.codebook_size = 16;
  c.code_dim = 8;
  c.hidden = 16;
  c.steps = 0;
  return c;
}

}  // namespace

TEST(Tokenize, LowercasesAndStripsPunctuation) {
  const std::vector<std::string> expect{"the", "heart", "is", "normal", "no", "effusion"};
  EXPECT_EQ(lsu::tokenize("The heart is normal. No effusion!"), expect);
  EXPECT_TRUE(lsu::tokenize("  ... ").empty());
}

TEST(Vocabulary, ThresholdIsStrict) {
  const auto v = lsu::build_vocabulary(
      tokenized({"the heart is normal", "the lungs are clear", "the heart is enlarged"}), 2);
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.token(4), "the");
  EXPECT_FALSE(v.contains("heart"));
  EXPECT_FALSE(v.contains("is"));
}

TEST(Vocabulary, EmptyCorpusIsSpecialsOnly) {
  const auto v = lsu::build_vocabulary({}, 3);
  EXPECT_EQ(v.size(), 4);
  EXPECT_EQ(v.token(lsu::TextVocabulary::kPad), "<pad>");
  EXPECT_EQ(v.token(lsu::TextVocabulary::kBos), "<bos>");
  EXPECT_EQ(v.token(lsu::TextVocabulary::kEos), "<eos>");
  EXPECT_EQ(v.token(lsu::TextVocabulary::kUnk), "<unk>");
}

TEST(Vocabulary, SingleFrequentToken) {
  const auto v = lsu::build_vocabulary(tokenized({"a a a a"}), 3);
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.id("a"), 4);
}

TEST(Vocabulary, FrequencyThenLexicographicOrder) {
  const auto v = lsu::build_vocabulary(tokenized({"b b c c a a a"}), 0);
  EXPECT_EQ(v.token(4), "a");
  EXPECT_EQ(v.token(5), "b");
  EXPECT_EQ(v.token(6), "c");
}

TEST(Vocabulary, RoundTripAndUnknown) {
  const auto v = lsu::build_vocabulary(tokenized({"x y z x y z x y z x y z"}), 3);
  for (int id = 0; id < v.size(); ++id) EXPECT_EQ(v.id(v.token(id)), id);
  EXPECT_EQ(v.id("never"), lsu::TextVocabulary::kUnk);
  const auto seq = v.encode("X, y never");
  const std::vector<int> expect{1, v.id("x"), v.id("y"), 3, 2};
  EXPECT_EQ(seq.tokens, expect);
  EXPECT_EQ(v.decode(seq.tokens), "x y <unk>");
}

TEST(Vocabulary, EncodeTruncatesToMaxLen) {
  const auto v = lsu::build_vocabulary(tokenized({"a a a a a a a a"}), 0);
  const auto seq = v.encode("a a a a a a a a", 5);
  ASSERT_EQ(seq.tokens.size(), 5u);
  EXPECT_EQ(seq.tokens.front(), lsu::TextVocabulary::kBos);
  EXPECT_EQ(seq.tokens.back(), lsu::TextVocabulary::kEos);
}

TEST(Vocabulary, FileRoundTrip) {
  const auto v = lsu::build_vocabulary(tokenized({"p q q r r r"}), 0);
  const auto path = (std::filesystem::temp_directory_path() / "uar_vocab_test.txt").string();
  v.save(path);
  const auto w = lsu::TextVocabulary::load(path);
  EXPECT_EQ(w.tokens(), v.tokens());
  std::filesystem::remove(path);
}

TEST(EncodeImage, GridShapes) {
  lsu::DvaeConfig c;
  c.steps = 0;
  const auto m = lsu::DvaeModel::initialize(c);
  EXPECT_EQ(lsu::encode_image(m, noise_image(112, 112, 1)).rows(), 196);
  EXPECT_EQ(lsu::encode_image(m, noise_image(112, 112, 1)).cols(), 512);
  EXPECT_EQ(lsu::encode_image(m, noise_image(16, 16, 2)).rows(), 4);
  EXPECT_THROW(lsu::encode_image(m, noise_image(17, 16, 3)), ShapeError);
}

TEST(EncodeImage, TokenCountIdentityAndDeterminism) {
  const auto m = lsu::DvaeModel::initialize(small_config());
  for (int s : {8, 16, 24, 40}) {
    const ImageTensor im = noise_image(s, 2 * s, static_cast<std::uint64_t>(s));
    const auto a = lsu::discretize(lsu::encode_image(m, im));
    const auto b = lsu::discretize(lsu::encode_image(m, im));
    EXPECT_EQ(a.tokens.size(), static_cast<size_t>(s * 2 * s / 64));
    EXPECT_EQ(a.tokens, b.tokens);
  }
}

TEST(Discretize, ArgmaxWithLowestIndexTies) {
  Matrix d(3, 3);
  d << 0.1, 2.0, -1.0,  //
      3.0, 3.0, 0.0,    //
      -5.0, -5.0, -4.0;
  const std::vector<int> expect{1, 0, 2};
  EXPECT_EQ(lsu::discretize(d).tokens, expect);
  const std::vector<int> diag{0, 1, 2, 3};
  EXPECT_EQ(lsu::discretize(Matrix::Identity(4, 4)).tokens, diag);
}

TEST(Embed, LookupRowsAndRange) {
  Matrix w(6, 3);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<double>(i);
  const auto e = lsu::embed_visual({{0}}, w);
  EXPECT_EQ(e.modality, Modality::kImage);
  EXPECT_EQ(e.values.row(0), w.row(0));
  const auto r = lsu::embed_visual({{5, 5}}, w);
  EXPECT_EQ(r.values.row(0), r.values.row(1));
  EXPECT_THROW(lsu::embed_visual({{6}}, w), IndexError);
  EXPECT_THROW(lsu::embed_visual({{-1}}, w), IndexError);

  const auto t = lsu::embed_text({{1, 2}}, w);
  EXPECT_EQ(t.modality, Modality::kText);
  EXPECT_EQ(t.values.rows(), 2);
  EXPECT_EQ(t.values.row(0), w.row(1));
  EXPECT_EQ(t.values.row(1), w.row(2));
  EXPECT_THROW(lsu::embed_text({{1, 6}}, w), IndexError);
}

TEST(Dvae, ConstantImageIsLearned) {
  std::vector<ImageTensor> images(16, ImageTensor(32, 32, 1, 0.5));
  lsu::DvaeConfig c = small_config();
  c.steps = 200;
  c.seed = 4;
  lsu::DvaeTrainLog log;
  const auto m = lsu::train_dvae(images, c, &log);
  ASSERT_EQ(log.step_mse.size(), 200u);
  const double final_mse = lsu::mean_squared_error(lsu::reconstruct(m, images[0]), images[0]);
  EXPECT_LT(final_mse, 0.01);
  const auto init = lsu::DvaeModel::initialize(c);
  EXPECT_LT(final_mse, lsu::mean_squared_error(lsu::reconstruct(init, images[0]), images[0]));
}

TEST(Dvae, ConfigValidation) {
  lsu::DvaeConfig c = small_config();
  c.codebook_size = 1;
  EXPECT_THROW(lsu::DvaeModel::initialize(c), ConfigError);
  c = small_config();
  c.tau_end = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Dvae, ZeroStepsKeepsInitialization) {
  std::vector<ImageTensor> images(4, noise_image(16, 16, 9));
  const auto c = small_config();
  auto trained = lsu::train_dvae(images, c);
  auto init = lsu::DvaeModel::initialize(c);
  auto a = trained.parameters();
  auto b = init.parameters();
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].second->value, b[i].second->value) << a[i].first;
}

TEST(Dvae, ReconstructionShapeAndRange) {
  const auto m = lsu::DvaeModel::initialize(small_config());
  const ImageTensor im = noise_image(24, 16, 5);
  const ImageTensor r = lsu::reconstruct(m, im);
  EXPECT_EQ(r.height, 24);
  EXPECT_EQ(r.width, 16);
  EXPECT_EQ(r.channels, 1);
  for (double v : r.values) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_THROW(lsu::reconstruct(m, noise_image(20, 16, 5)), ShapeError);
}

TEST(Dvae, LowTemperatureRelaxationMatchesArgmax) {
  std::vector<ImageTensor> images;
  for (int i = 0; i < 8; ++i) images.push_back(noise_image(32, 32, 100 + i));
  lsu::DvaeConfig c = small_config();
  c.steps = 50;
  const auto m = lsu::train_dvae(images, c);
  int agree = 0, total = 0;
  for (const auto& im : images) {
    const Matrix logits = lsu::encode_image(m, im);
    const auto hard = lsu::discretize(logits).tokens;
    const Matrix soft = lsu::relaxed_codes(logits, 1e-4, nullptr);
    for (Index r = 0; r < soft.rows(); ++r) {
      Index best = 0;
      soft.row(r).maxCoeff(&best);
      agree += static_cast<int>(best) == hard[static_cast<size_t>(r)] && soft(r, best) > 0.99;
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(agree) / total, 0.99);
}

TEST(Dvae, TwoViewsConcatenate) {
  const auto m = lsu::DvaeModel::initialize(small_config());
  const std::vector<ImageTensor> views{noise_image(16, 16, 1), noise_image(16, 16, 2)};
  const auto both = lsu::tokenize_views(m, views).tokens;
  const auto first = lsu::discretize(lsu::encode_image(m, views[0])).tokens;
  const auto second = lsu::discretize(lsu::encode_image(m, views[1])).tokens;
  ASSERT_EQ(both.size(), 8u);
  EXPECT_TRUE(std::equal(first.begin(), first.end(), both.begin()));
  EXPECT_TRUE(std::equal(second.begin(), second.end(), both.begin() + 4));
}

TEST(Patches, AssembleInvertsExtract) {
  const ImageTensor im = noise_image(24, 16, 6);
  const Matrix p = lsu::extract_patches(im, 8);
  EXPECT_EQ(p.rows(), 6);
  EXPECT_EQ(p.cols(), 64);
  const ImageTensor back = lsu::assemble_patches(p, 3, 2, 8, 1);
  EXPECT_EQ(back.values, im.values);
}

TEST(ImageTensor, ValidateRejectsOutOfRange) {
  ImageTensor im(2, 2, 1, 0.5);
  EXPECT_NO_THROW(im.validate());
  im.at(0, 1) = 1.5;
  EXPECT_THROW(im.validate(), ShapeError);
}
