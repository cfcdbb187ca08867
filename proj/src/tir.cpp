#include "uar/tir.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "uar/errors.hpp"

namespace uar::tir {

void TransformerConfig::validate() const {
  if (layers <= 0 || width <= 0 || heads <= 0 || ffn_width <= 0) {
    throw ConfigError("transformer: dimensions must be positive");
  }
  if (width % heads != 0) throw ConfigError("transformer: width must be divisible by head count");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("transformer: dropout must be in [0,1)");
  if (max_text <= 0 || max_visual <= 0) throw ConfigError("transformer: max lengths must be positive");
  if (mask_scale < 0.0) throw ConfigError("transformer: mask scale must be non-negative");
}

namespace {

ag::Parameter normal_param(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return ag::Parameter(std::move(m));
}

AttentionParams init_attention(int width, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  return AttentionParams{normal_param(width, width, s, rng), normal_param(width, width, s, rng),
                         normal_param(width, width, s, rng), normal_param(width, width, s, rng)};
}

LayerNormParams init_norm(int width) {
  return LayerNormParams{ag::Parameter(Matrix::Ones(1, width)), ag::Parameter(Matrix::Zero(1, width))};
}

FeedForwardParams init_ffn(int width, int hidden, std::mt19937_64& rng) {
  return FeedForwardParams{normal_param(width, hidden, 1.0 / std::sqrt(static_cast<double>(width)), rng),
                           ag::Parameter(Matrix::Zero(1, hidden)),
                           normal_param(hidden, width, 1.0 / std::sqrt(static_cast<double>(hidden)), rng),
                           ag::Parameter(Matrix::Zero(1, width))};
}

}  // namespace

TransformerParams TransformerParams::initialize(const TransformerConfig& config, int vocab_size,
                                                std::mt19937_64& rng) {
  config.validate();
  if (vocab_size <= 0) throw ConfigError("transformer: vocabulary must be non-empty");
  TransformerParams p;
  p.config = config;
  for (int l = 0; l < config.layers; ++l) {
    EncoderLayer e;
    e.self_attn = init_attention(config.width, rng);
    e.norm1 = init_norm(config.width);
    e.ffn = init_ffn(config.width, config.ffn_width, rng);
    e.norm2 = init_norm(config.width);
    p.encoder.push_back(std::move(e));
  }
  for (int l = 0; l < config.layers; ++l) {
    DecoderLayer d;
    d.self_attn = init_attention(config.width, rng);
    d.norm1 = init_norm(config.width);
    d.cross_attn = init_attention(config.width, rng);
    d.mask.logits = ag::Parameter(Matrix::Zero(config.max_text, config.max_visual));
    d.mask.scale = config.mask_scale;
    d.norm2 = init_norm(config.width);
    d.ffn = init_ffn(config.width, config.ffn_width, rng);
    d.norm3 = init_norm(config.width);
    p.decoder.push_back(std::move(d));
  }
  p.head_w = normal_param(config.width, vocab_size, 1.0 / std::sqrt(static_cast<double>(config.width)), rng);
  p.head_b = ag::Parameter(Matrix::Zero(1, vocab_size));
  return p;
}

Matrix sinusoidal_positions(Index rows, Index width) {
  Matrix pe(rows, width);
  for (Index pos = 0; pos < rows; ++pos) {
    for (Index i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      pe(pos, i) = (i % 2 == 0) ? std::sin(static_cast<double>(pos) * rate)
                                : std::cos(static_cast<double>(pos) * rate);
    }
  }
  return pe;
}

ag::Var multi_head_attention(ag::Var queries, ag::Var keys_values, AttentionParams& params,
                             int heads, std::optional<ag::Var> mask_term,
                             const Matrix* additive_bias, std::vector<Matrix>* head_weights) {
  ag::Tape& tape = *queries.tape();
  const Index d = params.wq.value.rows();
  if (queries.cols() != d || keys_values.cols() != d) throw ShapeError("attention: width mismatch");
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
  const Index dh = d / heads;
  const Index t = queries.rows(), l = keys_values.rows();
  if (mask_term && (mask_term->rows() != t || mask_term->cols() != l)) {
    throw ShapeError("attention: mask term shape mismatch");
  }
  if (additive_bias != nullptr && (additive_bias->rows() != t || additive_bias->cols() != l)) {
    throw ShapeError("attention: bias shape mismatch");
  }
  ag::Var q = ag::matmul(queries, tape.parameter(params.wq));
  ag::Var k = ag::matmul(keys_values, tape.parameter(params.wk));
  ag::Var v = ag::matmul(keys_values, tape.parameter(params.wv));
  std::optional<ag::Var> bias;
  if (additive_bias != nullptr) bias = tape.constant(*additive_bias);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ag::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ag::Var qh = heads == 1 ? q : ag::slice_cols(q, h * dh, dh);
    ag::Var kh = heads == 1 ? k : ag::slice_cols(k, h * dh, dh);
    ag::Var vh = heads == 1 ? v : ag::slice_cols(v, h * dh, dh);
    ag::Var scores = ag::matmul_nt(qh, kh);
    if (mask_term) scores = ag::add(scores, *mask_term);
    scores = ag::scale(scores, inv);
    if (bias) scores = ag::add(scores, *bias);
    ag::Var p = ag::softmax_rows(scores);
    if (head_weights != nullptr) head_weights->push_back(p.value());
    outs.push_back(ag::matmul(p, vh));
  }
  ag::Var cat = heads == 1 ? outs[0] : ag::concat_cols(outs);
  return ag::matmul(cat, tape.parameter(params.wo));
}

namespace {

void check_mask_extent(const LearnableMask& mask, Index text_len, Index visual_len) {
  if (text_len > mask.logits.value.rows() || visual_len > mask.logits.value.cols()) {
    throw LengthExceeded("mask: sequence " + std::to_string(text_len) + "x" +
                         std::to_string(visual_len) + " exceeds mask " +
                         std::to_string(mask.logits.value.rows()) + "x" +
                         std::to_string(mask.logits.value.cols()));
  }
}

}  // namespace

ag::Var mask_term(ag::Tape& tape, LearnableMask& mask, Index text_len, Index visual_len) {
  check_mask_extent(mask, text_len, visual_len);
  ag::Var block = ag::slice_block(tape.parameter(mask.logits), text_len, visual_len);
  return ag::scale(ag::sigmoid(block), mask.scale);
}

ag::Var mask_loss(ag::Tape& tape, LearnableMask& mask, Index text_len, Index visual_len) {
  check_mask_extent(mask, text_len, visual_len);
  ag::Var block = ag::slice_block(tape.parameter(mask.logits), text_len, visual_len);
  ag::Var open = ag::sum_all(ag::sigmoid(block));
  Matrix total(1, 1);
  total(0, 0) = static_cast<double>(text_len * visual_len);
  return ag::sub(tape.constant(std::move(total)), open);
}

double mask_loss(const LearnableMask& mask, Index text_len, Index visual_len) {
  check_mask_extent(mask, text_len, visual_len);
  double s = 0.0;
  const Matrix& m = mask.logits.value;
  for (Index i = 0; i < text_len; ++i) {
    for (Index j = 0; j < visual_len; ++j) s += 1.0 - 1.0 / (1.0 + std::exp(-m(i, j)));
  }
  return s;
}

namespace {

ag::Var feed_forward(ag::Var x, FeedForwardParams& p) {
  ag::Tape& t = *x.tape();
  ag::Var h = ag::relu(ag::add_row(ag::matmul(x, t.parameter(p.w1)), t.parameter(p.b1)));
  return ag::add_row(ag::matmul(h, t.parameter(p.w2)), t.parameter(p.b2));
}

ag::Var norm(ag::Var x, LayerNormParams& p) {
  ag::Tape& t = *x.tape();
  return ag::layer_norm(x, t.parameter(p.gain), t.parameter(p.bias));
}

ag::Var drop(ag::Var x, const TransformerConfig& cfg, const PassOptions& opts) {
  if (!opts.training || cfg.dropout <= 0.0) return x;
  if (opts.rng == nullptr) throw ConfigError("dropout requires an rng in training mode");
  return ag::dropout(x, cfg.dropout, *opts.rng);
}

Matrix head_average(const std::vector<Matrix>& heads) {
  Matrix avg = heads[0];
  for (size_t h = 1; h < heads.size(); ++h) avg += heads[h];
  return avg / static_cast<double>(heads.size());
}

}  // namespace

ag::Var encode(ag::Var visual, TransformerParams& params, const PassOptions& opts) {
  const TransformerConfig& cfg = params.config;
  if (visual.cols() != cfg.width) throw ShapeError("encode: feature width mismatch");
  if (visual.rows() > cfg.max_visual) throw LengthExceeded("encode: too many visual tokens");
  ag::Tape& tape = *visual.tape();
  ag::Var x = ag::add(visual, tape.constant(sinusoidal_positions(visual.rows(), cfg.width)));
  x = drop(x, cfg, opts);
  for (EncoderLayer& layer : params.encoder) {
    ag::Var a = multi_head_attention(x, x, layer.self_attn, cfg.heads, std::nullopt, nullptr, nullptr);
    x = norm(ag::add(x, drop(a, cfg, opts)), layer.norm1);
    x = norm(ag::add(x, drop(feed_forward(x, layer.ffn), cfg, opts)), layer.norm2);
  }
  return x;
}

ag::Var decode(ag::Var memory, ag::Var text, std::span<const bool> text_valid,
               TransformerParams& params, const PassOptions& opts) {
  const TransformerConfig& cfg = params.config;
  const Index t = text.rows(), l = memory.rows();
  if (text.cols() != cfg.width || memory.cols() != cfg.width) {
    throw ShapeError("decode: feature width mismatch");
  }
  if (t > cfg.max_text) throw LengthExceeded("decode: text longer than max_text");
  if (l > cfg.max_visual) throw LengthExceeded("decode: too many visual tokens");
  if (!text_valid.empty() && static_cast<Index>(text_valid.size()) != t) {
    throw ShapeError("decode: validity flags must match text length");
  }
  ag::Tape& tape = *text.tape();
  Matrix causal = Matrix::Zero(t, t);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (Index i = 0; i < t; ++i) {
    for (Index j = 0; j < t; ++j) {
      const bool pad = !text_valid.empty() && !text_valid[static_cast<size_t>(j)] && j != i;
      if (j > i || pad) causal(i, j) = neg_inf;
    }
  }
  ag::Var y = ag::add(text, tape.constant(sinusoidal_positions(t, cfg.width)));
  y = drop(y, cfg, opts);
  for (size_t li = 0; li < params.decoder.size(); ++li) {
    DecoderLayer& layer = params.decoder[li];
    ag::Var s = multi_head_attention(y, y, layer.self_attn, cfg.heads, std::nullopt, &causal, nullptr);
    y = norm(ag::add(y, drop(s, cfg, opts)), layer.norm1);
    std::optional<ag::Var> mt;
    if (opts.mask_enabled) mt = mask_term(tape, layer.mask, t, l);
    std::vector<Matrix> heads;
    const bool want = opts.cross_weights != nullptr ||
                      (opts.final_layer_head_weights != nullptr && li + 1 == params.decoder.size());
    ag::Var c = multi_head_attention(y, memory, layer.cross_attn, cfg.heads, mt, nullptr,
                                     want ? &heads : nullptr);
    if (opts.cross_weights != nullptr) opts.cross_weights->push_back(head_average(heads));
    if (opts.final_layer_head_weights != nullptr && li + 1 == params.decoder.size()) {
      *opts.final_layer_head_weights = heads;
    }
    y = norm(ag::add(y, drop(c, cfg, opts)), layer.norm2);
    y = norm(ag::add(y, drop(feed_forward(y, layer.ffn), cfg, opts)), layer.norm3);
  }
  return y;
}

ag::Var output_logits(ag::Var hidden, TransformerParams& params) {
  ag::Tape& t = *hidden.tape();
  return ag::add_row(ag::matmul(hidden, t.parameter(params.head_w)), t.parameter(params.head_b));
}

namespace {

Matrix softmax_rows_value(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

TransformerParams& unconst(const TransformerParams& p) {
  // Gradient-free tapes copy parameter values and never write back.
  return const_cast<TransformerParams&>(p);
}

}  // namespace

DecoderOutput forward(const Matrix& visual, const Matrix& text_prefix, const TransformerParams& params,
                      bool mask_enabled) {
  ag::Tape tape(false);
  TransformerParams& p = unconst(params);
  DecoderOutput out;
  PassOptions opts;
  opts.mask_enabled = mask_enabled;
  opts.cross_weights = &out.cross_weights;
  ag::Var memory = encode(tape.constant(visual), p, opts);
  ag::Var hidden = decode(memory, tape.constant(text_prefix), {}, p, opts);
  out.hidden = hidden.value();
  out.distributions = softmax_rows_value(output_logits(hidden, p).value());
  return out;
}

AttentionResult masked_cross_attention(const Matrix& queries, const Matrix& keys,
                                       const Matrix& values, const AttentionParams& params,
                                       int heads, const LearnableMask* mask) {
  if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
    throw ShapeError("masked_cross_attention: keys and values must share a shape");
  }
  const Index d = params.wq.value.rows();
  if (queries.cols() != d || keys.cols() != d) throw ShapeError("masked_cross_attention: width mismatch");
  if (heads <= 0 || d % heads != 0) throw ShapeError("masked_cross_attention: bad head count");
  ag::Tape tape(false);
  auto& p = const_cast<AttentionParams&>(params);
  std::optional<ag::Var> mt;
  if (mask != nullptr) {
    mt = mask_term(tape, const_cast<LearnableMask&>(*mask), queries.rows(), keys.rows());
  }
  // keys and values may differ here, so project them separately.
  ag::Var q = ag::matmul(tape.constant(queries), tape.parameter(p.wq));
  ag::Var k = ag::matmul(tape.constant(keys), tape.parameter(p.wk));
  ag::Var v = ag::matmul(tape.constant(values), tape.parameter(p.wv));
  const Index dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionResult r;
  std::vector<ag::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ag::Var scores = ag::matmul_nt(ag::slice_cols(q, h * dh, dh), ag::slice_cols(k, h * dh, dh));
    if (mt) scores = ag::add(scores, *mt);
    ag::Var w = ag::softmax_rows(ag::scale(scores, inv));
    r.head_weights.push_back(w.value());
    outs.push_back(ag::matmul(w, ag::slice_cols(v, h * dh, dh)));
  }
  r.output = ag::matmul(ag::concat_cols(outs), tape.parameter(p.wo)).value();
  r.weights = head_average(r.head_weights);
  return r;
}

double cross_entropy_loss(const Matrix& distributions, std::span<const int> targets, int pad_id) {
  if (static_cast<Index>(targets.size()) != distributions.rows()) {
    throw ShapeError("cross_entropy_loss: one target per distribution row required");
  }
  double loss = 0.0;
  for (size_t t = 0; t < targets.size(); ++t) {
    const int id = targets[t];
    if (id == pad_id) continue;
    if (id < 0 || id >= distributions.cols()) throw IndexError("cross_entropy_loss: target id");
    loss -= std::log(distributions(static_cast<Index>(t), id));
  }
  return loss;
}

namespace {

// Log-probabilities of the next token after the given prefix.
Eigen::RowVectorXd next_log_probs(ag::Var memory, const std::vector<int>& prefix,
                                  const Matrix& text_table, TransformerParams& params,
                                  bool mask_enabled) {
  ag::Tape& tape = *memory.tape();
  std::vector<ag::Var> rows;
  Matrix text(static_cast<Index>(prefix.size()), text_table.cols());
  for (size_t i = 0; i < prefix.size(); ++i) text.row(static_cast<Index>(i)) = text_table.row(prefix[i]);
  PassOptions opts;
  opts.mask_enabled = mask_enabled;
  ag::Var hidden = decode(memory, tape.constant(std::move(text)), {}, params, opts);
  Matrix last = hidden.value().bottomRows(1);
  Eigen::RowVectorXd z = last * params.head_w.value;
  z += params.head_b.value.row(0);
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  return (z.array() - lse).matrix();
}

Index argmax_lowest(const Eigen::RowVectorXd& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  double normalized() const {
    return log_prob / static_cast<double>(std::max<size_t>(1, tokens.size() - 1));
  }
};

}  // namespace

std::vector<int> generate(const Matrix& visual, const Matrix& text_table,
                          const TransformerParams& params, const GenerateOptions& opts) {
  TransformerParams& p = unconst(params);
  const int max_len = std::min(opts.max_len, p.config.max_text + 1);
  if (max_len < 2) throw ConfigError("generate: max_len must allow BOS and EOS");
  ag::Tape enc_tape(false);
  PassOptions eo;
  eo.mask_enabled = opts.mask_enabled;
  ag::Var memory = encode(enc_tape.constant(visual), p, eo);
  const Matrix memory_value = memory.value();

  auto step = [&](const std::vector<int>& prefix) {
    ag::Tape t(false);
    ag::Var mem = t.constant(memory_value);
    return next_log_probs(mem, prefix, text_table, p, opts.mask_enabled);
  };

  if (opts.strategy == DecodeStrategy::kGreedy) {
    std::vector<int> seq{opts.bos_id};
    while (static_cast<int>(seq.size()) < max_len) {
      const int next = static_cast<int>(argmax_lowest(step(seq)));
      seq.push_back(next);
      if (next == opts.eos_id) break;
    }
    return seq;
  }

  const int width = std::max(1, opts.beam_width);
  std::vector<Hypothesis> live{Hypothesis{{opts.bos_id}, 0.0}};
  std::vector<Hypothesis> finished;
  while (!live.empty()) {
    std::vector<Hypothesis> candidates;
    for (const Hypothesis& h : live) {
      const Eigen::RowVectorXd lp = step(h.tokens);
      std::vector<Index> order(static_cast<size_t>(lp.size()));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return lp(a) > lp(b); });
      for (int k = 0; k < width && k < lp.size(); ++k) {
        Hypothesis c = h;
        c.tokens.push_back(static_cast<int>(order[static_cast<size_t>(k)]));
        c.log_prob += lp(order[static_cast<size_t>(k)]);
        candidates.push_back(std::move(c));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [](const Hypothesis& a, const Hypothesis& b) {
      return a.normalized() > b.normalized();
    });
    live.clear();
    for (size_t i = 0; i < candidates.size() && static_cast<int>(i) < width; ++i) {
      Hypothesis& c = candidates[i];
      if (c.tokens.back() == opts.eos_id || static_cast<int>(c.tokens.size()) >= max_len) {
        finished.push_back(std::move(c));
      } else {
        live.push_back(std::move(c));
      }
    }
    if (static_cast<int>(finished.size()) >= width) break;
  }
  if (finished.empty()) finished = std::move(live);
  std::stable_sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.normalized() > b.normalized();
  });
  return finished.front().tokens;
}

}  // namespace uar::tir
