#pragma once

// Latent space unifier: turns images and reports into discrete token
// sequences and looks up their embeddings.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uar/autograd.hpp"

namespace uar {

// Interleaved height x width x channels, values in [0,1].
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> values;

  ImageTensor() = default;
  ImageTensor(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), values(static_cast<size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c = 0) {
    return values[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c = 0) const {
    return values[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  // Throws ShapeError on inconsistent sizes or values outside [0,1].
  void validate() const;
};

enum class Modality { kImage, kText };

struct EmbeddingSequence {
  Modality modality = Modality::kImage;
  Matrix values;  // rows x d
};

}  // namespace uar

namespace uar::lsu {

// ---- text -----------------------------------------------------------------

// Lowercase, punctuation to spaces, split on whitespace.
std::vector<std::string> tokenize(std::string_view text);

struct TextTokenSequence {
  std::vector<int> tokens;  // BOS ... EOS
};

class TextVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecial = 4;

  TextVocabulary();

  int size() const { return static_cast<int>(tokens_.size()); }
  int min_count() const { return min_count_; }
  const std::string& token(int id) const;
  // UNK for out-of-vocabulary words.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;

  // BOS + ids + EOS, truncated so the result never exceeds max_len tokens.
  TextTokenSequence encode(std::string_view text, int max_len = 1 << 20) const;
  // Joins non-special tokens with single spaces.
  std::string decode(std::span<const int> ids) const;

  void save(const std::string& path) const;
  static TextVocabulary load(const std::string& path);
  // Full id-ordered token list including the specials (as written by save()).
  const std::vector<std::string>& tokens() const { return tokens_; }
  static TextVocabulary from_tokens(const std::vector<std::string>& tokens);

  friend TextVocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus,
                                         int min_count);

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> ids_;
  int min_count_ = 0;
};

// Keeps tokens whose corpus frequency is strictly greater than min_count,
// ordered by descending frequency then lexicographically.
TextVocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus, int min_count);

// ---- images ---------------------------------------------------------------

struct Codebook {
  Matrix entries;  // size x dim
  int size() const { return static_cast<int>(entries.rows()); }
  int dim() const { return static_cast<int>(entries.cols()); }
};

struct VisualTokenSequence {
  std::vector<int> tokens;
};

struct DvaeConfig {
  int downsample = 8;
  int codebook_size = 512;
  int code_dim = 32;
  int hidden = 64;
  int channels = 1;
  int steps = 600;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double tau_start = 1.0;
  double tau_end = 0.0625;
  std::uint64_t seed = 0;

  void validate() const;
};

// Patch encoder (8x8 stride-8 convolution then 1x1 convolution to codebook
// logits) and a mirrored decoder (1x1 convolution then 8x8 stride-8
// transposed convolution). Convolutions with stride equal to kernel size act
// independently per grid cell, so they are stored as dense matrices over
// flattened patches.
struct DvaeModel {
  DvaeConfig config;
  ag::Parameter enc_w1, enc_b1, enc_w2, enc_b2;
  ag::Parameter codebook;
  ag::Parameter dec_w1, dec_b1, dec_w2, dec_b2;

  static DvaeModel initialize(const DvaeConfig& config);
  int downsample() const { return config.downsample; }
  Codebook codebook_view() const { return Codebook{codebook.value}; }
  std::vector<std::pair<std::string, ag::Parameter*>> parameters();
};

// L x (M*M*C) matrix of flattened patches in row-major grid order.
Matrix extract_patches(const ImageTensor& image, int downsample);
ImageTensor assemble_patches(const Matrix& patches, int grid_h, int grid_w, int downsample,
                             int channels);

// D: L x |V_I| codebook logits.
Matrix encode_image(const DvaeModel& model, const ImageTensor& image);
// Row-wise argmax, ties to the lowest index.
VisualTokenSequence discretize(const Matrix& logits);
// Softmax((logits + gumbel)/tau); no noise when rng is null.
Matrix relaxed_codes(const Matrix& logits, double tau, std::mt19937_64* rng);
ImageTensor decode_tokens(const DvaeModel& model, const VisualTokenSequence& tokens, int grid_h,
                          int grid_w);
ImageTensor reconstruct(const DvaeModel& model, const ImageTensor& image);
// Frontal then lateral tokens when several views are given.
VisualTokenSequence tokenize_views(const DvaeModel& model, std::span<const ImageTensor> views);

double mean_squared_error(const ImageTensor& a, const ImageTensor& b);

struct DvaeTrainLog {
  std::vector<double> step_mse;  // relaxed-reconstruction MSE per step
};

DvaeModel train_dvae(std::span<const ImageTensor> images, const DvaeConfig& config,
                     DvaeTrainLog* log = nullptr);
// Continues training an existing model for config.steps steps.
void train_dvae_inplace(DvaeModel& model, std::span<const ImageTensor> images,
                        DvaeTrainLog* log = nullptr);

// ---- embeddings -----------------------------------------------------------

EmbeddingSequence embed_visual(const VisualTokenSequence& tokens, const Matrix& lookup);
EmbeddingSequence embed_text(const TextTokenSequence& tokens, const Matrix& lookup);

}  // namespace uar::lsu
