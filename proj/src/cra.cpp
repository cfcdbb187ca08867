#include "uar/cra.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "uar/errors.hpp"

namespace uar::cra {

double OrthonormalBasis::orthonormality_error() const {
  const Matrix gram = basis_.transpose() * basis_;
  return (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
}

OrthonormalBasis OrthonormalBasis::from_seed(std::uint64_t seed, int dim, int rows) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(rows, dim);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return gram_schmidt(m);
}

OrthonormalBasis OrthonormalBasis::from_matrix(Matrix m) {
  OrthonormalBasis b;
  b.basis_ = std::move(m);
  return b;
}

OrthonormalBasis gram_schmidt(const Matrix& seed_matrix) {
  const Index n = seed_matrix.rows(), d = seed_matrix.cols();
  if (d > n) throw ShapeError("gram_schmidt: more columns than rows");
  Eigen::MatrixXd q = seed_matrix;  // column-major for column sweeps
  for (Index j = 0; j < d; ++j) {
    auto col = q.col(j);
    // Two projection sweeps keep the result orthonormal to machine precision.
    for (int pass = 0; pass < 2; ++pass) {
      for (Index i = 0; i < j; ++i) col -= q.col(i).dot(col) * q.col(i);
    }
    const double norm = col.norm();
    if (norm < 1e-10) {
      throw DegenerateBasis("gram_schmidt: column " + std::to_string(j) +
                            " is linearly dependent on earlier columns");
    }
    col /= norm;
  }
  OrthonormalBasis b;
  b.basis_ = q;
  return b;
}

Matrix scale_basis(const OrthonormalBasis& basis, const Matrix& gain, const Matrix& bias) {
  const Matrix& b = basis.matrix();
  if (gain.rows() != b.rows() || gain.cols() != b.cols() || bias.rows() != b.rows() ||
      bias.cols() != b.cols()) {
    throw ShapeError("scale_basis: gain/bias must match the basis shape");
  }
  return gain.cwiseProduct(b) + bias;
}

ScaledBasis ScaledBasis::identity(OrthonormalBasis b) {
  ScaledBasis s;
  s.gain = ag::Parameter(Matrix::Ones(b.rows(), b.dim()));
  s.bias = ag::Parameter(Matrix::Zero(b.rows(), b.dim()));
  s.basis = std::move(b);
  return s;
}

CraParams CraParams::initialize(int dim, int heads, std::uint64_t basis_seed, std::mt19937_64& rng) {
  if (heads <= 0 || dim % heads != 0) throw ConfigError("cra: width must be divisible by heads");
  CraParams p;
  p.basis = ScaledBasis::identity(OrthonormalBasis::from_seed(basis_seed, dim));
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  auto mat = [&](void) {
    Matrix m(dim, dim);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return ag::Parameter(std::move(m));
  };
  p.attention.heads = heads;
  p.attention.wq = mat();
  p.attention.wk = mat();
  p.attention.wv = mat();
  p.attention.wo = mat();
  p.gates.input_w1 = mat();
  p.gates.input_w2 = mat();
  p.gates.forget_w1 = mat();
  p.gates.forget_w2 = mat();
  return p;
}

// ---- tape-level -----------------------------------------------------------

ag::Var scaled_basis(ag::Tape& tape, ScaledBasis& basis) {
  ag::Var b = tape.constant(basis.basis.matrix());
  return ag::add(ag::hadamard(tape.parameter(basis.gain), b), tape.parameter(basis.bias));
}

BasisKeys project_basis(ag::Tape& tape, ag::Var scaled, BasisAttentionParams& params) {
  const Index d = scaled.cols();
  if (params.heads <= 0 || d % params.heads != 0) {
    throw ShapeError("basis_attention: width not divisible by head count");
  }
  ag::Var k = ag::matmul(scaled, tape.parameter(params.wk));
  ag::Var v = ag::matmul(scaled, tape.parameter(params.wv));
  const Index dh = d / params.heads;
  BasisKeys out;
  for (int h = 0; h < params.heads; ++h) {
    out.keys.push_back(params.heads == 1 ? k : ag::slice_cols(k, h * dh, dh));
    out.values.push_back(params.heads == 1 ? v : ag::slice_cols(v, h * dh, dh));
  }
  return out;
}

ag::Var basis_attention(ag::Var embeddings, const BasisKeys& keys, BasisAttentionParams& params,
                        std::vector<Matrix>* weights) {
  ag::Tape& tape = *embeddings.tape();
  const Index d = params.wq.value.rows();
  if (embeddings.cols() != d) throw ShapeError("basis_attention: embedding width mismatch");
  const int heads = params.heads;
  const Index dh = d / heads;
  ag::Var q = ag::matmul(embeddings, tape.parameter(params.wq));
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ag::Var> outs;
  for (int h = 0; h < heads; ++h) {
    ag::Var qh = heads == 1 ? q : ag::slice_cols(q, h * dh, dh);
    ag::Var p = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, keys.keys[static_cast<size_t>(h)]), inv));
    if (weights != nullptr) weights->push_back(p.value());
    outs.push_back(ag::matmul(p, keys.values[static_cast<size_t>(h)]));
  }
  ag::Var cat = heads == 1 ? outs[0] : ag::concat_cols(outs);
  return ag::matmul(cat, tape.parameter(params.wo));
}

ag::Var gate(ag::Var x, ag::Var y, ag::Var w1, ag::Var w2) {
  return ag::sigmoid(ag::add(ag::matmul(x, w1), ag::matmul(y, w2)));
}

ag::Var dual_gate_fuse(ag::Var embeddings, ag::Var attended, DualGateParams& params) {
  ag::Tape& tape = *embeddings.tape();
  if (embeddings.rows() != attended.rows() || embeddings.cols() != attended.cols()) {
    throw ShapeError("dual_gate_fuse: E and F~ must share a shape");
  }
  ag::Var gi = gate(embeddings, attended, tape.parameter(params.input_w1),
                    tape.parameter(params.input_w2));
  ag::Var gf = gate(embeddings, attended, tape.parameter(params.forget_w1),
                    tape.parameter(params.forget_w2));
  ag::Var a = ag::hadamard(gi, ag::tanh(ag::add(embeddings, attended)));
  ag::Var b = ag::hadamard(gf, embeddings);
  return ag::add(ag::add(a, b), attended);
}

ag::Var align(ag::Var embeddings, const BasisKeys& keys, CraParams& params) {
  ag::Var attended = basis_attention(embeddings, keys, params.attention);
  return dual_gate_fuse(embeddings, attended, params.gates);
}

ag::Var pool_global(ag::Var features) {
  if (features.rows() == 0) throw ShapeError("pool_global: empty feature sequence");
  return ag::l2_normalize_rows(ag::mean_rows(features), 1e-12);
}

ag::Var triplet_loss(ag::Var image, ag::Var report, double margin) {
  ag::Tape& tape = *image.tape();
  TripletResult r = triplet_contrastive_loss(image.value(), report.value(), margin);
  Matrix out(1, 1);
  out(0, 0) = r.loss;
  const int ii = image.id(), ir = report.id();
  return tape.record(std::move(out), {image, report},
                     [ii, ir, gi = std::move(r.grad_image), gr = std::move(r.grad_report)](
                         ag::Tape& t, int self) {
                       const double g = t.grad(self)(0, 0);
                       t.accumulate(ii, gi * g);
                       t.accumulate(ir, gr * g);
                     });
}

// ---- value-level ----------------------------------------------------------

namespace {

// Value-level wrappers run the tape functions on a gradient-free tape, which
// only copies parameter values and never writes back.
template <typename T>
T& unconst(const T& v) {
  return const_cast<T&>(v);
}

}  // namespace

Matrix basis_attention(const EmbeddingSequence& e, const Matrix& scaled_basis,
                       const BasisAttentionParams& params, std::vector<Matrix>* weights) {
  if (e.values.cols() != params.wq.value.rows() || scaled_basis.cols() != params.wk.value.rows()) {
    throw ShapeError("basis_attention: width mismatch");
  }
  ag::Tape tape(false);
  BasisKeys keys = project_basis(tape, tape.constant(scaled_basis), unconst(params));
  return basis_attention(tape.constant(e.values), keys, unconst(params), weights).value();
}

Matrix gate(const Matrix& x, const Matrix& y, const Matrix& w1, const Matrix& w2) {
  if (x.rows() != y.rows() || x.cols() != w1.rows() || y.cols() != w2.rows() ||
      w1.cols() != w2.cols()) {
    throw ShapeError("gate: operands are not conformable");
  }
  ag::Tape tape(false);
  return gate(tape.constant(x), tape.constant(y), tape.constant(w1), tape.constant(w2)).value();
}

FusedFeatureSequence dual_gate_fuse(const EmbeddingSequence& e, const Matrix& attended,
                                    const DualGateParams& params) {
  ag::Tape tape(false);
  ag::Var f = dual_gate_fuse(tape.constant(e.values), tape.constant(attended), unconst(params));
  return FusedFeatureSequence{e.modality, f.value()};
}

FusedFeatureSequence align(const EmbeddingSequence& e, const CraParams& params) {
  ag::Tape tape(false);
  CraParams& p = unconst(params);
  BasisKeys keys = project_basis(tape, scaled_basis(tape, p.basis), p.attention);
  ag::Var f = align(tape.constant(e.values), keys, p);
  return FusedFeatureSequence{e.modality, f.value()};
}

GlobalFeature pool_global(const FusedFeatureSequence& f) {
  ag::Tape tape(false);
  ag::Var g = pool_global(tape.constant(f.values));
  return GlobalFeature{g.value().row(0)};
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

namespace {

std::span<const double> row_span(const Matrix& m, Index r) {
  return {m.data() + r * m.cols(), static_cast<size_t>(m.cols())};
}

}  // namespace

TripletResult triplet_contrastive_loss(const Matrix& image, const Matrix& report, double margin) {
  const Index n = image.rows();
  if (report.rows() != n || report.cols() != image.cols()) {
    throw ShapeError("triplet loss: image/report feature shapes differ");
  }
  if (n < 2) throw BatchTooSmall("triplet loss needs at least two pairs");
  // sim(i, j) = <image_i, report_j>
  Matrix sim(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) sim(i, j) = dot(row_span(image, i), row_span(report, j));
  }
  TripletResult r;
  r.grad_image = Matrix::Zero(n, image.cols());
  r.grad_report = Matrix::Zero(n, image.cols());
  r.hard_negative_report.resize(static_cast<size_t>(n));
  r.hard_negative_image.resize(static_cast<size_t>(n));
  r.min_abs_hinge_argument = std::numeric_limits<double>::infinity();
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    Index neg_r = -1, neg_i = -1;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (neg_r < 0 || sim(i, j) > sim(i, neg_r)) neg_r = j;
      if (neg_i < 0 || sim(j, i) > sim(neg_i, i)) neg_i = j;
    }
    r.hard_negative_report[static_cast<size_t>(i)] = static_cast<int>(neg_r);
    r.hard_negative_image[static_cast<size_t>(i)] = static_cast<int>(neg_i);
    const double h1 = margin - sim(i, i) + sim(i, neg_r);
    const double h2 = margin - sim(i, i) + sim(neg_i, i);
    r.min_abs_hinge_argument = std::min({r.min_abs_hinge_argument, std::abs(h1), std::abs(h2)});
    double li = 0.0;
    if (h1 > 0.0) {
      li += h1;
      r.grad_image.row(i) += inv_n * (report.row(neg_r) - report.row(i));
      r.grad_report.row(i) -= inv_n * image.row(i);
      r.grad_report.row(neg_r) += inv_n * image.row(i);
    }
    if (h2 > 0.0) {
      li += h2;
      r.grad_image.row(i) -= inv_n * report.row(i);
      r.grad_report.row(i) += inv_n * (image.row(neg_i) - image.row(i));
      r.grad_image.row(neg_i) += inv_n * report.row(i);
    }
    total += li;
  }
  r.loss = total / static_cast<double>(n);
  return r;
}

double triplet_contrastive_loss(std::span<const std::pair<GlobalFeature, GlobalFeature>> batch,
                                double margin) {
  if (batch.size() < 2) throw BatchTooSmall("triplet loss needs at least two pairs");
  const Index d = batch[0].first.values.size();
  Matrix gi(static_cast<Index>(batch.size()), d), gr(static_cast<Index>(batch.size()), d);
  for (size_t i = 0; i < batch.size(); ++i) {
    gi.row(static_cast<Index>(i)) = batch[i].first.values;
    gr.row(static_cast<Index>(i)) = batch[i].second.values;
  }
  return triplet_contrastive_loss(gi, gr, margin).loss;
}

double alignment_score_from_similarities(std::span<const double> sims) {
  if (sims.size() < 2) throw BatchTooSmall("alignment score needs at least two pairs");
  const auto [lo, hi] = std::minmax_element(sims.begin(), sims.end());
  const double mn = *lo, mx = *hi;
  if (!(mx > mn)) return 0.0;
  size_t above = 0;
  for (double s : sims) {
    if ((s - mn) / (mx - mn) > 0.5) ++above;
  }
  return static_cast<double>(above) / static_cast<double>(sims.size());
}

double alignment_score(const Matrix& image, const Matrix& report) {
  if (image.rows() != report.rows() || image.cols() != report.cols()) {
    throw ShapeError("alignment score: feature shapes differ");
  }
  std::vector<double> sims;
  for (Index i = 0; i < image.rows(); ++i) {
    const double ni = image.row(i).norm(), nr = report.row(i).norm();
    if (ni < 1e-12 || nr < 1e-12) throw ZeroNorm("alignment score: zero feature");
    sims.push_back(dot(row_span(image, i), row_span(report, i)) / (ni * nr));
  }
  return alignment_score_from_similarities(sims);
}

}  // namespace uar::cra
