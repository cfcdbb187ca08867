#pragma once

// Cross-modal representation aligner: a fixed orthonormal basis with
// trainable gain/bias, multi-head attention from embeddings onto the basis,
// dual-gate fusion, global pooling and the hard-negative triplet loss.

#include <cstdint>
#include <span>
#include <vector>

#include "uar/autograd.hpp"
#include "uar/lsu.hpp"

namespace uar::cra {

inline constexpr int kBasisRows = 2048;

class OrthonormalBasis {
 public:
  OrthonormalBasis() = default;
  const Matrix& matrix() const { return basis_; }
  Index rows() const { return basis_.rows(); }
  Index dim() const { return basis_.cols(); }
  // max |B^T B - I|
  double orthonormality_error() const;

  // Gram-Schmidt on a seeded standard-normal rows x dim matrix.
  static OrthonormalBasis from_seed(std::uint64_t seed, int dim, int rows = kBasisRows);
  // Wraps a stored matrix verbatim (checkpoint reload).
  static OrthonormalBasis from_matrix(Matrix m);

 private:
  friend OrthonormalBasis gram_schmidt(const Matrix& seed_matrix);
  Matrix basis_;
};

// Orthonormalizes the columns of seed_matrix (modified Gram-Schmidt with one
// re-orthogonalization pass). Throws DegenerateBasis when a column's residual
// norm drops below 1e-10.
OrthonormalBasis gram_schmidt(const Matrix& seed_matrix);

// gain (.) B + bias
Matrix scale_basis(const OrthonormalBasis& basis, const Matrix& gain, const Matrix& bias);

struct ScaledBasis {
  OrthonormalBasis basis;
  ag::Parameter gain;
  ag::Parameter bias;

  static ScaledBasis identity(OrthonormalBasis b);
  Matrix scaled() const { return scale_basis(basis, gain.value, bias.value); }
};

struct BasisAttentionParams {
  int heads = 1;
  ag::Parameter wq, wk, wv, wo;
};

// Input and forget gates each have their own (W_1, W_2).
struct DualGateParams {
  ag::Parameter input_w1, input_w2, forget_w1, forget_w2;
};

struct CraParams {
  ScaledBasis basis;
  BasisAttentionParams attention;
  DualGateParams gates;

  static CraParams initialize(int dim, int heads, std::uint64_t basis_seed, std::mt19937_64& rng);
};

struct FusedFeatureSequence {
  Modality modality = Modality::kImage;
  Matrix values;
};

struct GlobalFeature {
  Eigen::RowVectorXd values;
};

// ---- tape-level building blocks ------------------------------------------

// Projected keys/values of the scaled basis; shared by every query in a batch.
struct BasisKeys {
  std::vector<ag::Var> keys;    // per head: 2048 x d_head slice of B^ W_K
  std::vector<ag::Var> values;  // per head: 2048 x d_head slice of B^ W_V
};

ag::Var scaled_basis(ag::Tape& tape, ScaledBasis& basis);
BasisKeys project_basis(ag::Tape& tape, ag::Var scaled, BasisAttentionParams& params);
// Per head softmax((E W_Q)(B^ W_K)^T / sqrt(d_head)) (B^ W_V); heads
// concatenated and multiplied by W_O. weights, when given, receives each
// head's rows x 2048 attention matrix.
ag::Var basis_attention(ag::Var embeddings, const BasisKeys& keys, BasisAttentionParams& params,
                        std::vector<Matrix>* weights = nullptr);
// sigmoid(X W_1 + Y W_2)
ag::Var gate(ag::Var x, ag::Var y, ag::Var w1, ag::Var w2);
// G_I(E, F~) (.) tanh(E + F~) + G_F(E, F~) (.) E + F~
ag::Var dual_gate_fuse(ag::Var embeddings, ag::Var attended, DualGateParams& params);
// Full aligner on one embedding matrix.
ag::Var align(ag::Var embeddings, const BasisKeys& keys, CraParams& params);
// L2-normalized mean over rows.
ag::Var pool_global(ag::Var features);
// Batch mean of the two hinge terms; rows of image/report are paired features.
ag::Var triplet_loss(ag::Var image, ag::Var report, double margin);

// ---- value-level API -------------------------------------------------------

Matrix basis_attention(const EmbeddingSequence& e, const Matrix& scaled_basis,
                       const BasisAttentionParams& params, std::vector<Matrix>* weights = nullptr);
Matrix gate(const Matrix& x, const Matrix& y, const Matrix& w1, const Matrix& w2);
FusedFeatureSequence dual_gate_fuse(const EmbeddingSequence& e, const Matrix& attended,
                                    const DualGateParams& params);
FusedFeatureSequence align(const EmbeddingSequence& e, const CraParams& params);
GlobalFeature pool_global(const FusedFeatureSequence& f);

// Sequential-order dot product; used for every similarity so results are reproducible.
double dot(std::span<const double> a, std::span<const double> b);

struct TripletResult {
  double loss = 0.0;
  Matrix grad_image;   // d loss / d image rows
  Matrix grad_report;  // d loss / d report rows
  std::vector<int> hard_negative_report;  // per image anchor
  std::vector<int> hard_negative_image;   // per report anchor
  double min_abs_hinge_argument = 0.0;    // distance of the evaluation point from a kink
};

// Rows of image/report are unit-norm paired features; cosine = dot product.
TripletResult triplet_contrastive_loss(const Matrix& image, const Matrix& report, double margin);
double triplet_contrastive_loss(std::span<const std::pair<GlobalFeature, GlobalFeature>> batch,
                                double margin);

// Fraction of matched pairs whose cosine similarity, min-max normalized over
// the set, is strictly above 0.5. Zero when all similarities coincide.
double alignment_score(const Matrix& image, const Matrix& report);
double alignment_score_from_similarities(std::span<const double> sims);

}  // namespace uar::cra
