#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "uar/cra.hpp"
#include "uar/errors.hpp"

using namespace uar;

namespace {

Matrix random_matrix(Index r, Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix unit_rows(Matrix m) {
  for (Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

double seq_dot(const Matrix& a, Index i, const Matrix& b, Index j) {
  double s = 0.0;
  for (Index k = 0; k < a.cols(); ++k) s += a(i, k) * b(j, k);
  return s;
}

// Exhaustive search: the largest hinge over all negatives is the hard-negative hinge.
double brute_force_triplet(const Matrix& img, const Matrix& rep, double margin) {
  const Index n = img.rows();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double pos = seq_dot(img, i, rep, i);
    double h1 = -1e300, h2 = -1e300;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      h1 = std::max(h1, margin - pos + seq_dot(img, i, rep, j));
      h2 = std::max(h2, margin - pos + seq_dot(img, j, rep, i));
    }
    double li = 0.0;
    if (h1 > 0.0) li += h1;
    if (h2 > 0.0) li += h2;
    total += li;
  }
  return total / static_cast<double>(n);
}

struct Probe {
  ag::Parameter* p;
  Index i;
};

// Central differences on randomly chosen coordinates.
double fd_max_rel(std::vector<ag::Parameter*> params, const std::function<ag::Var(ag::Tape&)>& build,
                  int samples, std::uint64_t seed, double eps = 1e-5) {
  for (auto* p : params) p->zero_grad();
  {
    ag::Tape t;
    t.backward(build(t));
  }
  std::vector<Probe> all;
  for (auto* p : params) {
    for (Index i = 0; i < p->value.size(); ++i) all.push_back({p, i});
  }
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  if (static_cast<int>(all.size()) > samples) all.resize(static_cast<size_t>(samples));
  double worst = 0.0;
  for (const Probe& pr : all) {
    double& x = pr.p->value.data()[pr.i];
    const double keep = x;
    x = keep + eps;
    double fp, fm;
    {
      ag::Tape t(false);
      fp = build(t).value()(0, 0);
    }
    x = keep - eps;
    {
      ag::Tape t(false);
      fm = build(t).value()(0, 0);
    }
    x = keep;
    const double num = (fp - fm) / (2 * eps), ana = pr.p->grad.data()[pr.i];
    worst = std::max(worst, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-8}));
  }
  return worst;
}

}  // namespace

TEST(GramSchmidt, IdentityColumnsAreKept) {
  const Matrix seed = Matrix::Identity(2048, 2048).leftCols(8);
  const auto b = cra::gram_schmidt(seed);
  EXPECT_LT((b.matrix() - seed).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GramSchmidt, UniformSeedIsOrthonormal) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Matrix seed(2048, 8);
  for (Index i = 0; i < seed.size(); ++i) seed.data()[i] = u(rng);
  const auto b = cra::gram_schmidt(seed);
  EXPECT_LE(b.orthonormality_error(), 1e-6);
  const Matrix g = b.matrix().transpose() * b.matrix();
  EXPECT_LE((g - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-6);
  // Same span: the seed is reproduced by projecting onto the basis.
  const Matrix proj = b.matrix() * (b.matrix().transpose() * seed);
  EXPECT_LT((proj - seed).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(GramSchmidt, RepeatedColumnIsDegenerate) {
  Matrix seed = random_matrix(2048, 4, 5);
  seed.col(2) = seed.col(1);
  EXPECT_THROW(cra::gram_schmidt(seed), DegenerateBasis);
}

TEST(GramSchmidt, SeededConstructionIsReproducible) {
  const auto a = cra::OrthonormalBasis::from_seed(11, 16);
  const auto b = cra::OrthonormalBasis::from_seed(11, 16);
  EXPECT_EQ(a.matrix(), b.matrix());
  EXPECT_EQ(a.rows(), 2048);
  EXPECT_LE(a.orthonormality_error(), 1e-6);
}

TEST(ScaleBasis, ElementwiseExamples) {
  const auto b = cra::OrthonormalBasis::from_seed(1, 4);
  EXPECT_EQ(cra::scale_basis(b, Matrix::Ones(2048, 4), Matrix::Zero(2048, 4)), b.matrix());
  const Matrix c = cra::scale_basis(b, Matrix::Zero(2048, 4), Matrix::Constant(2048, 4, 0.3));
  EXPECT_EQ(c, Matrix::Constant(2048, 4, 0.3));
  const Matrix s = cra::scale_basis(cra::OrthonormalBasis::from_matrix(Matrix::Constant(1, 1, 0.5)),
                                    Matrix::Constant(1, 1, 2.0), Matrix::Constant(1, 1, 0.1));
  EXPECT_NEAR(s(0, 0), 1.1, 1e-15);
  EXPECT_THROW(cra::scale_basis(b, Matrix::Ones(2048, 3), Matrix::Zero(2048, 4)), ShapeError);
}

TEST(BasisAttention, ZeroQueryProjectionAveragesValues) {
  std::mt19937_64 rng(2);
  auto p = cra::CraParams::initialize(8, 2, 3, rng);
  p.attention.wq.value.setZero();
  p.attention.wo.value = Matrix::Identity(8, 8);
  const Matrix basis = p.basis.scaled();
  EmbeddingSequence e{Modality::kImage, random_matrix(3, 8, 4)};
  std::vector<Matrix> weights;
  const Matrix out = cra::basis_attention(e, basis, p.attention, &weights);
  const Eigen::RowVectorXd mean = (basis * p.attention.wv.value).colwise().mean();
  for (Index r = 0; r < 3; ++r) EXPECT_LT((out.row(r) - mean).cwiseAbs().maxCoeff(), 1e-12);
  ASSERT_EQ(weights.size(), 2u);
  for (const Matrix& w : weights) {
    EXPECT_EQ(w.cols(), 2048);
    for (Index r = 0; r < w.rows(); ++r) EXPECT_NEAR(w.row(r).sum(), 1.0, 1e-9);
  }
}

TEST(BasisAttention, TwoKeyHandComputation) {
  cra::BasisAttentionParams p;
  p.heads = 1;
  p.wq = ag::Parameter(Matrix::Constant(1, 1, 1.0));
  p.wk = ag::Parameter(Matrix::Constant(1, 1, 2.0));
  p.wv = ag::Parameter(Matrix::Constant(1, 1, 3.0));
  p.wo = ag::Parameter(Matrix::Constant(1, 1, 1.0));
  Matrix basis(2, 1);
  basis << 0.5, -1.0;
  EmbeddingSequence e{Modality::kText, Matrix::Constant(1, 1, 0.8)};
  // logits 0.8*2*0.5 = 0.8 and 0.8*2*(-1) = -1.6 (d_head = 1); values 1.5 and -3.
  const double w0 = std::exp(0.8) / (std::exp(0.8) + std::exp(-1.6));
  const double expect = w0 * 1.5 + (1 - w0) * -3.0;
  EXPECT_NEAR(cra::basis_attention(e, basis, p)(0, 0), expect, 1e-12);
}

TEST(BasisAttention, ModalityAgnostic) {
  std::mt19937_64 rng(7);
  const auto p = cra::CraParams::initialize(8, 2, 1, rng);
  const Matrix x = random_matrix(4, 8, 9);
  const auto fi = cra::align({Modality::kImage, x}, p);
  const auto fr = cra::align({Modality::kText, x}, p);
  EXPECT_EQ(fi.values, fr.values);
  EXPECT_EQ(fi.modality, Modality::kImage);
  EXPECT_EQ(fr.modality, Modality::kText);
  EXPECT_EQ(fi.values.rows(), 4);
}

TEST(Gate, Examples) {
  const Matrix z = Matrix::Zero(2, 3);
  const Matrix w = random_matrix(3, 3, 1);
  EXPECT_EQ(cra::gate(z, z, w, w), Matrix::Constant(2, 3, 0.5));
  const Matrix g = cra::gate(Matrix::Ones(1, 1), Matrix::Zero(1, 1), Matrix::Constant(1, 1, std::log(3.0)),
                             Matrix::Zero(1, 1));
  EXPECT_NEAR(g(0, 0), 0.75, 1e-15);
  double prev = 0.0;
  for (double x : {1.0, 5.0, 10.0, 20.0}) {
    const double v = cra::gate(Matrix::Constant(1, 1, x), Matrix::Zero(1, 1), Matrix::Ones(1, 1), Matrix::Zero(1, 1))(0, 0);
    EXPECT_GT(v, prev);
    EXPECT_LE(v, 1.0);
    prev = v;
  }
  EXPECT_THROW(cra::gate(Matrix::Zero(2, 3), Matrix::Zero(2, 2), w, w), ShapeError);
}

TEST(Gate, StrictlyInsideUnitIntervalOnModerateInputs) {
  const Matrix x = random_matrix(20, 6, 2, 3.0), y = random_matrix(20, 6, 3, 3.0);
  const Matrix g = cra::gate(x, y, random_matrix(6, 6, 4), random_matrix(6, 6, 5));
  EXPECT_GT(g.minCoeff(), 0.0);
  EXPECT_LT(g.maxCoeff(), 1.0);
}

TEST(DualGate, ScalarExamples) {
  cra::DualGateParams p;
  for (ag::Parameter* w : {&p.input_w1, &p.input_w2, &p.forget_w1, &p.forget_w2}) *w = ag::Parameter(Matrix::Zero(1, 1));
  auto run = [&](double e, double f) {
    return cra::dual_gate_fuse({Modality::kImage, Matrix::Constant(1, 1, e)}, Matrix::Constant(1, 1, f), p).values(0, 0);
  };
  EXPECT_EQ(run(0.0, 0.0), 0.0);
  // 0.5 tanh(2) + 0.5 + 1
  EXPECT_NEAR(run(1.0, 1.0), 1.98201379, 1e-8);
  for (double f : {-2.0, -0.3, 0.7, 3.0}) EXPECT_NEAR(run(0.0, f), 0.5 * std::tanh(f) + f, 1e-15);
  EXPECT_THROW(cra::dual_gate_fuse({Modality::kImage, Matrix::Zero(2, 1)}, Matrix::Zero(1, 1), p), ShapeError);
}

TEST(PoolGlobal, Examples) {
  Eigen::RowVectorXd v(3);
  v << 3.0, 0.0, 4.0;
  Matrix same(2, 3);
  same << v, v;
  const auto g = cra::pool_global({Modality::kImage, same});
  EXPECT_LT((g.values - v / 5.0).cwiseAbs().maxCoeff(), 1e-15);
  Matrix opposite(2, 3);
  opposite << v, -v;
  EXPECT_THROW(cra::pool_global({Modality::kImage, opposite}), ZeroNorm);
  Matrix two(2, 2);
  two << 1.0, 0.0, 0.0, 3.0;  // mean (0.5, 1.5), norm sqrt(2.5)
  const auto h = cra::pool_global({Modality::kText, two});
  EXPECT_NEAR(h.values(0), 0.5 / std::sqrt(2.5), 1e-15);
  EXPECT_NEAR(h.values(1), 1.5 / std::sqrt(2.5), 1e-15);
  EXPECT_NEAR(h.values.norm(), 1.0, 1e-12);
}

TEST(Triplet, IdenticalFeaturesGiveTwiceTheMargin) {
  Matrix f = Matrix::Zero(5, 4);
  f.col(1).setOnes();
  EXPECT_NEAR(cra::triplet_contrastive_loss(f, f, 0.2).loss, 0.4, 1e-9);
}

TEST(Triplet, SeparatedPairsGiveZero) {
  Matrix img(2, 2), rep(2, 2);
  img << 1, 0, -1, 0;
  rep << 1, 0, -1, 0;
  EXPECT_EQ(cra::triplet_contrastive_loss(img, rep, 0.5).loss, 0.0);
}

TEST(Triplet, TooSmallBatch) {
  EXPECT_THROW(cra::triplet_contrastive_loss(Matrix::Ones(1, 3), Matrix::Ones(1, 3), 0.2), BatchTooSmall);
}

TEST(Triplet, MatchesBruteForceOracleBitExactly) {
  for (int b = 0; b < 100; ++b) {
    const Index n = 2 + b % 7;
    const Matrix img = unit_rows(random_matrix(n, 6, 1000 + static_cast<std::uint64_t>(b)));
    const Matrix rep = unit_rows(random_matrix(n, 6, 5000 + static_cast<std::uint64_t>(b)));
    const double loss = cra::triplet_contrastive_loss(img, rep, 0.2).loss;
    EXPECT_EQ(loss, brute_force_triplet(img, rep, 0.2)) << "batch " << b;
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 2 * (0.2 + 2));
  }
}

TEST(Triplet, HardNegativeIsMostSimilar) {
  const Matrix img = unit_rows(random_matrix(8, 5, 77));
  const Matrix rep = unit_rows(random_matrix(8, 5, 78));
  const auto r = cra::triplet_contrastive_loss(img, rep, 0.2);
  for (Index i = 0; i < 8; ++i) {
    const int hn = r.hard_negative_report[static_cast<size_t>(i)];
    EXPECT_NE(hn, i);
    for (Index j = 0; j < 8; ++j) {
      if (j != i) EXPECT_GE(seq_dot(img, i, rep, hn), seq_dot(img, i, rep, j));
    }
  }
}

TEST(Triplet, GradientMatchesFiniteDifferences) {
  const Matrix img = unit_rows(random_matrix(6, 5, 91));
  const Matrix rep = unit_rows(random_matrix(6, 5, 92));
  const auto r = cra::triplet_contrastive_loss(img, rep, 0.2);
  ASSERT_GT(r.min_abs_hinge_argument, 1e-3);
  const double eps = 1e-6;
  for (int which = 0; which < 2; ++which) {
    const Matrix& grad = which == 0 ? r.grad_image : r.grad_report;
    for (Index i = 0; i < img.size(); ++i) {
      Matrix a = img, b = rep;
      Matrix& m = which == 0 ? a : b;
      m.data()[i] += eps;
      const double fp = cra::triplet_contrastive_loss(a, b, 0.2).loss;
      m.data()[i] -= 2 * eps;
      const double fm = cra::triplet_contrastive_loss(a, b, 0.2).loss;
      EXPECT_NEAR((fp - fm) / (2 * eps), grad.data()[i], 1e-6);
    }
  }
}

TEST(Triplet, TapeVersionAgrees) {
  const Matrix img = unit_rows(random_matrix(7, 4, 31));
  const Matrix rep = unit_rows(random_matrix(7, 4, 32));
  ag::Parameter pi(img), pr(rep);
  pi.zero_grad();
  pr.zero_grad();
  ag::Tape t;
  const ag::Var loss = cra::triplet_loss(t.parameter(pi), t.parameter(pr), 0.2);
  t.backward(loss);
  const auto ref = cra::triplet_contrastive_loss(img, rep, 0.2);
  EXPECT_NEAR(loss.value()(0, 0), ref.loss, 1e-14);
  EXPECT_LT((pi.grad - ref.grad_image).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((pr.grad - ref.grad_report).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(CraForward, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  auto p = cra::CraParams::initialize(8, 2, 4, rng);
  // Move gain/bias off their initial values so their gradients are generic.
  p.basis.gain.value += random_matrix(2048, 8, 13, 0.1);
  p.basis.bias.value += random_matrix(2048, 8, 14, 0.1);
  ag::Parameter img_emb(random_matrix(4 * 5, 8, 15)), txt_emb(random_matrix(4 * 3, 8, 16));
  auto build = [&](ag::Tape& t) {
    const auto keys = cra::project_basis(t, cra::scaled_basis(t, p.basis), p.attention);
    const ag::Var fi = cra::align(t.parameter(img_emb), keys, p);
    const ag::Var fr = cra::align(t.parameter(txt_emb), keys, p);
    std::vector<ag::Var> gi, gr;
    for (int s = 0; s < 4; ++s) {
      gi.push_back(cra::pool_global(ag::gather_rows(fi, std::vector<int>{5 * s, 5 * s + 1, 5 * s + 2, 5 * s + 3, 5 * s + 4})));
      gr.push_back(cra::pool_global(ag::gather_rows(fr, std::vector<int>{3 * s, 3 * s + 1, 3 * s + 2})));
    }
    // Smooth readout plus the triplet term (checked off-kink below).
    return ag::add(cra::triplet_loss(ag::concat_rows(gi), ag::concat_rows(gr), 0.2),
                   ag::scale(ag::sum_all(ag::hadamard(fi, fi)), 0.01));
  };
  {
    ag::Tape t(false);
    const auto keys = cra::project_basis(t, cra::scaled_basis(t, p.basis), p.attention);
    Matrix gi(4, 8), gr(4, 8);
    const Matrix fi = cra::align(t.parameter(img_emb), keys, p).value();
    const Matrix fr = cra::align(t.parameter(txt_emb), keys, p).value();
    for (int s = 0; s < 4; ++s) {
      gi.row(s) = fi.middleRows(5 * s, 5).colwise().mean().normalized();
      gr.row(s) = fr.middleRows(3 * s, 3).colwise().mean().normalized();
    }
    ASSERT_GT(cra::triplet_contrastive_loss(gi, gr, 0.2).min_abs_hinge_argument, 1e-3);
  }
  std::vector<ag::Parameter*> params{&p.basis.gain,       &p.basis.bias,       &p.attention.wq,    &p.attention.wk,
                                     &p.attention.wv,     &p.attention.wo,     &p.gates.input_w1,  &p.gates.input_w2,
                                     &p.gates.forget_w1,  &p.gates.forget_w2,  &img_emb,           &txt_emb};
  EXPECT_LE(fd_max_rel(params, build, 300, 17, 1e-3), 1e-4);
}

TEST(AlignmentScore, Examples) {
  const std::vector<double> a{0.9, 0.5, 0.1};
  EXPECT_NEAR(cra::alignment_score_from_similarities(a), 1.0 / 3.0, 1e-15);
  const std::vector<double> b{0.4, 0.4, 0.4};
  EXPECT_EQ(cra::alignment_score_from_similarities(b), 0.0);
  const std::vector<double> c{1.0, -1.0};
  EXPECT_EQ(cra::alignment_score_from_similarities(c), 0.5);
  const std::vector<double> d{0.3};
  EXPECT_THROW(cra::alignment_score_from_similarities(d), BatchTooSmall);
}

TEST(AlignmentScore, FromFeaturesUsesCosine) {
  Matrix img(3, 2), rep(3, 2);
  img << 1, 0, 1, 0, 1, 0;
  rep << 2, 0, 0, 5, -1, 1;  // cosines 1, 0, -1/sqrt(2)
  // normalized: 1, 0.707/1.707 = 0.414, 0 -> one above 0.5
  EXPECT_NEAR(cra::alignment_score(img, rep), 1.0 / 3.0, 1e-15);
}

TEST(AlignmentScore, NormalizationPreservesOrdering) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> s(30);
  for (double& v : s) v = u(rng);
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  const double mn = *lo, mx = *hi;
  for (size_t i = 0; i < s.size(); ++i) {
    for (size_t j = 0; j < s.size(); ++j) {
      if (s[i] < s[j]) EXPECT_LT((s[i] - mn) / (mx - mn), (s[j] - mn) / (mx - mn));
    }
  }
  size_t above = 0;
  for (double v : s) above += (v - mn) / (mx - mn) > 0.5;
  EXPECT_DOUBLE_EQ(cra::alignment_score_from_similarities(s), static_cast<double>(above) / 30.0);
}
