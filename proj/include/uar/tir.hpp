#pragma once

// Encoder-decoder Transformer whose text-to-image (cross) attention carries
// a learnable logit mask, plus the language-modeling and mask losses and
// autoregressive decoding.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "uar/autograd.hpp"

namespace uar::tir {

struct TransformerConfig {
  int layers = 3;
  int width = 32;
  int heads = 4;
  int ffn_width = 128;
  double dropout = 0.1;
  int max_text = 64;
  int max_visual = 392;
  double mask_scale = 1000.0;  // k

  void validate() const;
  int head_dim() const { return width / heads; }
};

struct LearnableMask {
  ag::Parameter logits;  // max_text x max_visual
  double scale = 1000.0;
};

struct AttentionParams {
  ag::Parameter wq, wk, wv, wo;
};

struct LayerNormParams {
  ag::Parameter gain, bias;
};

struct FeedForwardParams {
  ag::Parameter w1, b1, w2, b2;
};

struct EncoderLayer {
  AttentionParams self_attn;
  LayerNormParams norm1;
  FeedForwardParams ffn;
  LayerNormParams norm2;
};

struct DecoderLayer {
  AttentionParams self_attn;
  LayerNormParams norm1;
  AttentionParams cross_attn;
  LearnableMask mask;  // shared by every head of this layer's cross-attention
  LayerNormParams norm2;
  FeedForwardParams ffn;
  LayerNormParams norm3;
};

struct TransformerParams {
  TransformerConfig config;
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  ag::Parameter head_w;  // width x |V_R|
  ag::Parameter head_b;

  static TransformerParams initialize(const TransformerConfig& config, int vocab_size,
                                      std::mt19937_64& rng);
  int vocab_size() const { return static_cast<int>(head_w.value.cols()); }
};

// Fixed sinusoidal encodings for positions [0, rows).
Matrix sinusoidal_positions(Index rows, Index width);

// Options controlling one forward pass on a tape.
struct PassOptions {
  bool mask_enabled = true;
  bool training = false;          // enables dropout
  std::mt19937_64* rng = nullptr;  // dropout randomness
  // Collect head-averaged cross-attention weights per decoder layer.
  std::vector<Matrix>* cross_weights = nullptr;
  // When set, receives every head's weights for the final decoder layer.
  std::vector<Matrix>* final_layer_head_weights = nullptr;
};

// Multi-head attention. mask_term (T x L, already k*sigmoid(M)) is added to
// every head's raw scores before the 1/sqrt(d_head) scaling; additive_bias
// (constant, e.g. causal -inf) is added after.
ag::Var multi_head_attention(ag::Var queries, ag::Var keys_values, AttentionParams& params,
                             int heads, std::optional<ag::Var> mask_term,
                             const Matrix* additive_bias, std::vector<Matrix>* head_weights);

// k * sigmoid(M[:T, :L]) on the tape; throws LengthExceeded past the mask size.
ag::Var mask_term(ag::Tape& tape, LearnableMask& mask, Index text_len, Index visual_len);
// sum over the active block of (1 - sigmoid(M_ij))
ag::Var mask_loss(ag::Tape& tape, LearnableMask& mask, Index text_len, Index visual_len);
double mask_loss(const LearnableMask& mask, Index text_len, Index visual_len);

// Self-attention encoder over visual features (positional encodings added here).
ag::Var encode(ag::Var visual, TransformerParams& params, const PassOptions& opts);
// Causal decoder; returns hidden states (T x width). text_valid marks non-PAD positions.
ag::Var decode(ag::Var memory, ag::Var text, std::span<const bool> text_valid,
               TransformerParams& params, const PassOptions& opts);
ag::Var output_logits(ag::Var hidden, TransformerParams& params);

struct DecoderOutput {
  Matrix hidden;                      // T x width
  Matrix distributions;               // T x |V_R|
  std::vector<Matrix> cross_weights;  // per decoder layer, head-averaged T x L
};

// Value-level forward: visual features F^(I) and the text-feature prefix F^(R)_{<t}.
DecoderOutput forward(const Matrix& visual, const Matrix& text_prefix, const TransformerParams& params,
                      bool mask_enabled);

struct AttentionResult {
  Matrix output;   // T x width
  Matrix weights;  // head-averaged T x L
  std::vector<Matrix> head_weights;
};

// Single cross-attention block with the learnable mask (or without it when
// mask is null).
AttentionResult masked_cross_attention(const Matrix& queries, const Matrix& keys,
                                       const Matrix& values, const AttentionParams& params,
                                       int heads, const LearnableMask* mask);

// -sum_t log p(target_t); rows whose target equals pad_id are skipped.
double cross_entropy_loss(const Matrix& distributions, std::span<const int> targets, int pad_id = 0);

enum class DecodeStrategy { kGreedy, kBeam };

struct GenerateOptions {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  int beam_width = 3;
  int max_len = 64;  // total tokens including BOS/EOS
  bool mask_enabled = true;
  int bos_id = 1;
  int eos_id = 2;
};

// Decodes from BOS; text_table holds the per-word decoder input features
// (the aligner is row-wise, so its output for every vocabulary entry can be
// precomputed once).
std::vector<int> generate(const Matrix& visual, const Matrix& text_table,
                          const TransformerParams& params, const GenerateOptions& opts);

}  // namespace uar::tir
