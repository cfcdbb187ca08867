#pragma once

// The full model bundle: visual/text look-ups, the aligner and the
// mask-refined Transformer, plus batch losses and inference helpers.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "uar/autograd.hpp"
#include "uar/cra.hpp"
#include "uar/optim.hpp"
#include "uar/tir.hpp"

namespace uar {

struct ModelConfig {
  int width = 32;
  int heads = 4;
  int layers = 3;
  int ffn_width = 128;
  double dropout = 0.1;
  int max_text = 64;
  int max_visual = 392;
  double mask_scale = 1000.0;
  double margin = 0.2;
  int visual_vocab = 512;
  // Flattened patch size for the continuous (ablated) visual path.
  int patch_dim = 64;
  // use_lsu: discrete visual tokens + look-up; otherwise a linear patch embedding.
  bool use_lsu = true;
  // use_cra: aligner + triplet loss; otherwise F = E.
  bool use_cra = true;
  std::uint64_t basis_seed = 0;

  void validate() const;
  tir::TransformerConfig transformer() const;
};

// One training/evaluation example in model terms.
struct ModelSample {
  std::vector<int> visual_tokens;  // LSU path
  Matrix patches;                  // continuous path, L x patch_dim
  std::vector<int> text;           // BOS ... EOS
};

class UarModel {
 public:
  ModelConfig config;
  ag::Parameter visual_lookup;  // |V_I| x d
  ag::Parameter text_lookup;    // |V_R| x d
  ag::Parameter patch_w, patch_b;
  cra::CraParams cra;
  tir::TransformerParams transformer;
  // Whether inference uses the learnable mask (set once refinement training starts).
  bool mask_active = false;

  static UarModel initialize(const ModelConfig& config, int text_vocab, std::uint64_t seed);

  int text_vocab() const { return static_cast<int>(text_lookup.value.rows()); }
  std::vector<optim::NamedParameter> named_parameters();
  std::vector<ag::Parameter*> mask_parameters();
};

struct ForwardOptions {
  bool mask_enabled = false;
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

struct BatchLoss {
  ag::Var ce;      // batch mean of per-sample summed token losses
  ag::Var global;  // triplet loss; zero without the aligner or with one sample
  ag::Var mask;    // batch mean of per-sample mask loss summed over layers
};

BatchLoss batch_loss(ag::Tape& tape, UarModel& model, std::span<const ModelSample* const> batch,
                     const ForwardOptions& opts);

// Aligned features for every visual and text id. The aligner acts row-wise,
// so F for a sequence is a row gather from these tables.
struct FeatureTables {
  Matrix visual;
  Matrix text;
};

FeatureTables feature_tables(const UarModel& model);
Matrix visual_features(const UarModel& model, const FeatureTables& tables, const ModelSample& s);
Matrix text_features(const FeatureTables& tables, std::span<const int> ids);

// L2-normalized global features (mean over visual rows / content word rows).
Eigen::RowVectorXd global_image_feature(const UarModel& model, const FeatureTables& tables,
                                        const ModelSample& s);
Eigen::RowVectorXd global_report_feature(const FeatureTables& tables, std::span<const int> text);

std::vector<int> generate_report(const UarModel& model, const FeatureTables& tables,
                                 const ModelSample& s, const tir::GenerateOptions& opts);

// Teacher-forced pass over s.text; row t of the outputs belongs to predicting text[t+1].
tir::DecoderOutput teacher_forced(const UarModel& model, const FeatureTables& tables,
                                  const ModelSample& s);

}  // namespace uar
