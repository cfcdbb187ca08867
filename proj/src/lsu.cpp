#include "uar/lsu.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "uar/errors.hpp"
#include "uar/optim.hpp"

namespace uar {

void ImageTensor::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0) throw ShapeError("image: non-positive dimension");
  if (values.size() != static_cast<size_t>(height) * width * channels) {
    throw ShapeError("image: value count does not match dimensions");
  }
  for (double v : values) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw ShapeError("image: value outside [0,1]");
  }
}

}  // namespace uar

namespace uar::lsu {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TextVocabulary::TextVocabulary() {
  add("<pad>");
  add("<bos>");
  add("<eos>");
  add("<unk>");
}

void TextVocabulary::add(std::string token) {
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

const std::string& TextVocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw IndexError("vocabulary: id " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

int TextVocabulary::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

bool TextVocabulary::contains(std::string_view token) const { return ids_.find(token) != ids_.end(); }

TextTokenSequence TextVocabulary::encode(std::string_view text, int max_len) const {
  TextTokenSequence seq;
  seq.tokens.push_back(kBos);
  for (const std::string& w : tokenize(text)) {
    if (static_cast<int>(seq.tokens.size()) + 1 >= max_len) break;
    seq.tokens.push_back(id(w));
  }
  seq.tokens.push_back(kEos);
  return seq;
}

std::string TextVocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(i);
  }
  return out;
}

void TextVocabulary::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write vocabulary file " + path);
  for (const std::string& t : tokens_) f << t << '\n';
}

TextVocabulary TextVocabulary::from_tokens(const std::vector<std::string>& tokens) {
  TextVocabulary v;
  if (tokens.size() < static_cast<size_t>(kNumSpecial)) throw ParseError("vocabulary: missing special tokens");
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i < static_cast<size_t>(kNumSpecial)) {
      if (tokens[i] != v.tokens_[i]) {
        throw ParseError("vocabulary: entry " + std::to_string(i + 1) + " must be " + v.tokens_[i]);
      }
    } else {
      if (tokens[i].empty() || v.contains(tokens[i])) throw ParseError("vocabulary: bad token " + tokens[i]);
      v.add(tokens[i]);
    }
  }
  return v;
}

TextVocabulary TextVocabulary::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingFile(path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(f, line)) tokens.push_back(line);
  return from_tokens(tokens);
}

TextVocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus, int min_count) {
  std::unordered_map<std::string, long> freq;
  for (const auto& report : corpus) {
    for (const auto& w : report) ++freq[w];
  }
  std::vector<std::pair<std::string, long>> kept;
  TextVocabulary vocab;
  for (auto& [w, c] : freq) {
    if (c > min_count && !vocab.contains(w)) kept.emplace_back(w, c);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (auto& [w, c] : kept) vocab.add(w);
  vocab.min_count_ = min_count;
  return vocab;
}

// ---- dVAE -----------------------------------------------------------------

void DvaeConfig::validate() const {
  if (codebook_size < 2) throw ConfigError("dvae: codebook size must be >= 2");
  if (!(tau_start > 0.0) || !(tau_end > 0.0)) throw ConfigError("dvae: temperature must be positive");
  if (downsample <= 0 || code_dim <= 0 || hidden <= 0 || channels <= 0) {
    throw ConfigError("dvae: dimensions must be positive");
  }
  if (steps < 0 || batch_size <= 0) throw ConfigError("dvae: bad step/batch counts");
  if (!(learning_rate > 0.0)) throw ConfigError("dvae: learning rate must be positive");
}

namespace {

Matrix random_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

}  // namespace

DvaeModel DvaeModel::initialize(const DvaeConfig& config) {
  config.validate();
  DvaeModel m;
  m.config = config;
  std::mt19937_64 rng(config.seed ^ 0xd7a3e5ULL);
  const int patch = config.downsample * config.downsample * config.channels;
  const int k = config.codebook_size;
  m.enc_w1 = ag::Parameter(random_normal(patch, config.hidden, 1.0 / std::sqrt(patch), rng));
  m.enc_b1 = ag::Parameter(Matrix::Zero(1, config.hidden));
  m.enc_w2 = ag::Parameter(random_normal(config.hidden, k, 1.0 / std::sqrt(config.hidden), rng));
  m.enc_b2 = ag::Parameter(Matrix::Zero(1, k));
  m.codebook = ag::Parameter(random_normal(k, config.code_dim, 1.0, rng));
  m.dec_w1 = ag::Parameter(
      random_normal(config.code_dim, config.hidden, 1.0 / std::sqrt(config.code_dim), rng));
  m.dec_b1 = ag::Parameter(Matrix::Zero(1, config.hidden));
  m.dec_w2 = ag::Parameter(random_normal(config.hidden, patch, 0.1 / std::sqrt(config.hidden), rng));
  m.dec_b2 = ag::Parameter(Matrix::Zero(1, patch));
  return m;
}

std::vector<std::pair<std::string, ag::Parameter*>> DvaeModel::parameters() {
  return {{"dvae.encoder.w1", &enc_w1}, {"dvae.encoder.b1", &enc_b1},
          {"dvae.encoder.w2", &enc_w2}, {"dvae.encoder.b2", &enc_b2},
          {"dvae.codebook", &codebook}, {"dvae.decoder.w1", &dec_w1},
          {"dvae.decoder.b1", &dec_b1}, {"dvae.decoder.w2", &dec_w2},
          {"dvae.decoder.b2", &dec_b2}};
}

Matrix extract_patches(const ImageTensor& image, int downsample) {
  if (image.height % downsample != 0 || image.width % downsample != 0) {
    throw ShapeError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " not divisible by downsample factor " + std::to_string(downsample));
  }
  const int gh = image.height / downsample, gw = image.width / downsample;
  const int c = image.channels;
  Matrix p(gh * gw, downsample * downsample * c);
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      const Index row = gy * gw + gx;
      Index col = 0;
      for (int y = 0; y < downsample; ++y) {
        for (int x = 0; x < downsample; ++x) {
          for (int ch = 0; ch < c; ++ch) {
            p(row, col++) = image.at(gy * downsample + y, gx * downsample + x, ch);
          }
        }
      }
    }
  }
  return p;
}

ImageTensor assemble_patches(const Matrix& patches, int grid_h, int grid_w, int downsample,
                             int channels) {
  if (patches.rows() != static_cast<Index>(grid_h) * grid_w ||
      patches.cols() != static_cast<Index>(downsample) * downsample * channels) {
    throw ShapeError("assemble_patches: shape mismatch");
  }
  ImageTensor img(grid_h * downsample, grid_w * downsample, channels);
  for (int gy = 0; gy < grid_h; ++gy) {
    for (int gx = 0; gx < grid_w; ++gx) {
      const Index row = gy * grid_w + gx;
      Index col = 0;
      for (int y = 0; y < downsample; ++y) {
        for (int x = 0; x < downsample; ++x) {
          for (int ch = 0; ch < channels; ++ch) {
            img.at(gy * downsample + y, gx * downsample + x, ch) = patches(row, col++);
          }
        }
      }
    }
  }
  return img;
}

namespace {

Matrix encoder_logits(const DvaeModel& m, const Matrix& patches) {
  Matrix h = (patches * m.enc_w1.value).rowwise() + m.enc_b1.value.row(0);
  h = h.cwiseMax(0.0);
  Matrix logits = h * m.enc_w2.value;
  logits.rowwise() += m.enc_b2.value.row(0);
  return logits;
}

Matrix decoder_pixels(const DvaeModel& m, const Matrix& codes) {
  Matrix h = (codes * m.dec_w1.value).rowwise() + m.dec_b1.value.row(0);
  h = h.cwiseMax(0.0);
  Matrix out = h * m.dec_w2.value;
  out.rowwise() += m.dec_b2.value.row(0);
  return out.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

}  // namespace

Matrix encode_image(const DvaeModel& model, const ImageTensor& image) {
  image.validate();
  if (image.channels != model.config.channels) throw ShapeError("encode_image: channel mismatch");
  return encoder_logits(model, extract_patches(image, model.downsample()));
}

VisualTokenSequence discretize(const Matrix& logits) {
  VisualTokenSequence seq;
  seq.tokens.reserve(static_cast<size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = c;
    }
    seq.tokens.push_back(static_cast<int>(best));
  }
  return seq;
}

Matrix relaxed_codes(const Matrix& logits, double tau, std::mt19937_64* rng) {
  if (!(tau > 0.0)) throw ConfigError("relaxed_codes: temperature must be positive");
  Matrix z = logits;
  if (rng != nullptr) {
    std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
    for (Index i = 0; i < z.size(); ++i) z.data()[i] -= std::log(-std::log(u(*rng)));
  }
  z /= tau;
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    z.row(r) = (z.row(r).array() - m).exp().matrix();
    z.row(r) /= z.row(r).sum();
  }
  return z;
}

ImageTensor decode_tokens(const DvaeModel& model, const VisualTokenSequence& tokens, int grid_h,
                          int grid_w) {
  if (static_cast<int>(tokens.tokens.size()) != grid_h * grid_w) {
    throw ShapeError("decode_tokens: token count does not match grid");
  }
  Matrix codes(static_cast<Index>(tokens.tokens.size()), model.codebook.value.cols());
  for (size_t i = 0; i < tokens.tokens.size(); ++i) {
    const int t = tokens.tokens[i];
    if (t < 0 || t >= model.config.codebook_size) throw IndexError("decode_tokens: bad token id");
    codes.row(static_cast<Index>(i)) = model.codebook.value.row(t);
  }
  Matrix pixels = decoder_pixels(model, codes).cwiseMax(0.0).cwiseMin(1.0);
  return assemble_patches(pixels, grid_h, grid_w, model.downsample(), model.config.channels);
}

ImageTensor reconstruct(const DvaeModel& model, const ImageTensor& image) {
  const Matrix logits = encode_image(model, image);
  const int m = model.downsample();
  return decode_tokens(model, discretize(logits), image.height / m, image.width / m);
}

VisualTokenSequence tokenize_views(const DvaeModel& model, std::span<const ImageTensor> views) {
  VisualTokenSequence all;
  for (const ImageTensor& v : views) {
    VisualTokenSequence t = discretize(encode_image(model, v));
    all.tokens.insert(all.tokens.end(), t.tokens.begin(), t.tokens.end());
  }
  return all;
}

double mean_squared_error(const ImageTensor& a, const ImageTensor& b) {
  if (a.values.size() != b.values.size() || a.values.empty()) {
    throw ShapeError("mse: image shapes differ");
  }
  double s = 0.0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    s += d * d;
  }
  return s / static_cast<double>(a.values.size());
}

void train_dvae_inplace(DvaeModel& model, std::span<const ImageTensor> images, DvaeTrainLog* log) {
  const DvaeConfig& cfg = model.config;
  cfg.validate();
  if (cfg.steps == 0) return;
  if (images.empty()) throw ConfigError("train_dvae: empty image set");
  for (const ImageTensor& im : images) {
    if (im.height != images[0].height || im.width != images[0].width ||
        im.channels != images[0].channels) {
      throw ShapeError("train_dvae: images must share one shape");
    }
  }
  if (images[0].channels != cfg.channels) throw ShapeError("train_dvae: channel mismatch");

  std::vector<Matrix> patch_cache;
  patch_cache.reserve(images.size());
  for (const ImageTensor& im : images) patch_cache.push_back(extract_patches(im, cfg.downsample));
  const Index per_image = patch_cache[0].rows();
  const Index pdim = patch_cache[0].cols();

  std::vector<optim::NamedParameter> params;
  for (auto& [name, p] : model.parameters()) params.push_back({name, p, false});
  optim::AdamW opt;
  std::mt19937_64 rng(cfg.seed ^ 0x5eed0dbaeULL);
  std::uniform_int_distribution<size_t> pick(0, images.size() - 1);

  for (int step = 0; step < cfg.steps; ++step) {
    const double frac = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;
    const double tau = cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac;
    const int bs = cfg.batch_size;
    Matrix batch(per_image * bs, pdim);
    for (int b = 0; b < bs; ++b) batch.middleRows(per_image * b, per_image) = patch_cache[pick(rng)];

    ag::Tape tape;
    ag::Var x = tape.constant(batch);
    ag::Var h = ag::relu(ag::add_row(ag::matmul(x, tape.parameter(model.enc_w1)),
                                     tape.parameter(model.enc_b1)));
    ag::Var logits =
        ag::add_row(ag::matmul(h, tape.parameter(model.enc_w2)), tape.parameter(model.enc_b2));
    Matrix noise(logits.rows(), logits.cols());
    std::uniform_real_distribution<double> u(1e-12, 1.0 - 1e-12);
    for (Index i = 0; i < noise.size(); ++i) noise.data()[i] = -std::log(-std::log(u(rng)));
    ag::Var z = ag::softmax_rows(ag::scale(ag::add(logits, tape.constant(std::move(noise))), 1.0 / tau));
    ag::Var codes = ag::matmul(z, tape.parameter(model.codebook));
    ag::Var h2 = ag::relu(ag::add_row(ag::matmul(codes, tape.parameter(model.dec_w1)),
                                      tape.parameter(model.dec_b1)));
    ag::Var out = ag::sigmoid(
        ag::add_row(ag::matmul(h2, tape.parameter(model.dec_w2)), tape.parameter(model.dec_b2)));
    ag::Var diff = ag::sub(out, x);
    ag::Var loss = ag::scale(ag::sum_all(ag::hadamard(diff, diff)),
                             1.0 / static_cast<double>(batch.size()));
    const double mse = loss.value()(0, 0);
    if (!std::isfinite(mse)) throw NonFinite("train_dvae: non-finite reconstruction loss");
    if (log != nullptr) log->step_mse.push_back(mse);
    optim::zero_grads(params);
    tape.backward(loss);
    opt.step(params, cfg.learning_rate);
  }
}

DvaeModel train_dvae(std::span<const ImageTensor> images, const DvaeConfig& config,
                     DvaeTrainLog* log) {
  DvaeModel model = DvaeModel::initialize(config);
  train_dvae_inplace(model, images, log);
  return model;
}

// ---- embeddings -----------------------------------------------------------

namespace {

Matrix lookup_rows(std::span<const int> ids, const Matrix& table) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw IndexError("embedding lookup: id " + std::to_string(ids[i]) + " outside [0, " +
                       std::to_string(table.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = table.row(ids[i]);
  }
  return out;
}

}  // namespace

EmbeddingSequence embed_visual(const VisualTokenSequence& tokens, const Matrix& lookup) {
  return EmbeddingSequence{Modality::kImage, lookup_rows(tokens.tokens, lookup)};
}

EmbeddingSequence embed_text(const TextTokenSequence& tokens, const Matrix& lookup) {
  return EmbeddingSequence{Modality::kText, lookup_rows(tokens.tokens, lookup)};
}

}  // namespace uar::lsu
