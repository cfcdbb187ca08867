#include "uar/autograd.hpp"

#include <cmath>
#include <string>

#include "uar/errors.hpp"

namespace uar::ag {

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, nullptr, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::parameter(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, {}, grad_enabled_, &p, {}});
  const int id = static_cast<int>(nodes_.size()) - 1;
  bound_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::record(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  bool needs = false;
  if (grad_enabled_) {
    for (const Var& p : parents) {
      if (p.tape() != this) throw ShapeError("autograd: operand recorded on a different tape");
      needs = needs || nodes_[static_cast<size_t>(p.id())].needs_grad;
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, nullptr, needs ? std::move(fn) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward: root must be 1x1");
  std::pair<Var, Matrix> seed{root, Matrix::Ones(1, 1)};
  backward(std::span<const std::pair<Var, Matrix>>(&seed, 1));
}

void Tape::backward(std::span<const std::pair<Var, Matrix>> seeds) {
  if (!grad_enabled_) throw Error("backward on a tape recorded without gradients");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  int max_id = -1;
  for (const auto& [var, g] : seeds) {
    if (g.rows() != var.rows() || g.cols() != var.cols()) {
      throw ShapeError("backward: seed shape mismatch");
    }
    accumulate(var.id(), g);
    max_id = std::max(max_id, var.id());
  }
  run_backward(max_id);
}

void Tape::run_backward(int max_id) {
  for (int id = max_id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    } else if (n.backward) {
      n.backward(*this, id);
    }
  }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimension mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value() * b.value().transpose();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tape& t = *a.tape();
  Matrix out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tape& t = *a.tape();
  Matrix out = a.value() - b.value();
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, -t.grad(self));
  });
}

Var hadamard(Var a, Var b) {
  require_same_shape(a, b, "hadamard");
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return t.record(std::move(out), {a, b}, [ia, ib](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape();
  Matrix out = a.value() * s;
  const int ia = a.id();
  return t.record(std::move(out), {a},
                  [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Tape& t = *a.tape();
  Matrix out = a.value().rowwise() + row.value().row(0);
  const int ia = a.id(), ir = row.id();
  return t.record(std::move(out), {a, row}, [ia, ir](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var linear_combination(std::span<const Var> vars, std::span<const double> coefs) {
  if (vars.empty() || vars.size() != coefs.size()) {
    throw ShapeError("linear_combination: need matching non-empty operands");
  }
  Tape& t = *vars[0].tape();
  Matrix out = Matrix::Zero(vars[0].rows(), vars[0].cols());
  for (size_t i = 0; i < vars.size(); ++i) {
    require_same_shape(vars[0], vars[i], "linear_combination");
    out += coefs[i] * vars[i].value();
  }
  std::vector<int> ids;
  for (const Var& v : vars) ids.push_back(v.id());
  std::vector<double> cs(coefs.begin(), coefs.end());
  return t.record(std::move(out), vars, [ids, cs](Tape& t, int self) {
    for (size_t i = 0; i < ids.size(); ++i) {
      if (cs[i] != 0.0) t.accumulate(ids[i], t.grad(self) * cs[i]);
    }
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var tanh(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().array().tanh().matrix();
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    t.accumulate(ia, t.grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var relu(Var a) {
  Tape& t = *a.tape();
  Matrix out = a.value().cwiseMax(0.0);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& x = t.value(ia);
    t.accumulate(ia, (x.array() > 0.0).select(t.grad(self), 0.0));
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix dx = y.cwiseProduct((g.colwise() - dot));
    t.accumulate(ia, dx);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm: gain/bias shape mismatch");
  }
  Tape& t = *x.tape();
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.record(std::move(out), {x, gain, bias},
                  [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                   int self) {
                    const Matrix& g = t.grad(self);
                    if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                    if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                    if (t.needs_grad(ix)) {
                      Matrix dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
                      Eigen::VectorXd m1 = dxhat.rowwise().mean();
                      Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                      Matrix dx = dxhat;
                      dx.colwise() -= m1;
                      dx -= (xhat.array().colwise() * m2.array()).matrix();
                      dx = (dx.array().colwise() * inv_std.array()).matrix();
                      t.accumulate(ix, dx);
                    }
                  });
}

Var gather_rows(Var table, std::span<const int> rows) {
  Tape& t = *table.tape();
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(rows.size()), tv.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(rows[i]) + " outside [0, " +
                       std::to_string(tv.rows()) + ")");
    }
    out.row(static_cast<Index>(i)) = tv.row(rows[i]);
  }
  const int it = table.id();
  std::vector<int> idx(rows.begin(), rows.end());
  return t.record(std::move(out), {table}, [it, idx = std::move(idx)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix dt = Matrix::Zero(t.value(it).rows(), t.value(it).cols());
    for (size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += g.row(static_cast<Index>(i));
    t.accumulate(it, dt);
  });
}

Var slice_cols(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: range");
  Tape& t = *a.tape();
  Matrix out = a.value().middleCols(start, count);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, start, count](Tape& t, int self) {
    Matrix d = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    d.middleCols(start, count) = t.grad(self);
    t.accumulate(ia, d);
  });
}

Var slice_block(Var a, Index rows, Index cols) {
  if (rows < 0 || cols < 0 || rows > a.rows() || cols > a.cols()) {
    throw ShapeError("slice_block: range");
  }
  Tape& t = *a.tape();
  Matrix out = a.value().topLeftCorner(rows, cols);
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, rows, cols](Tape& t, int self) {
    Matrix d = Matrix::Zero(t.value(ia).rows(), t.value(ia).cols());
    d.topLeftCorner(rows, cols) = t.grad(self);
    t.accumulate(ia, d);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = *parts[0].tape();
  Index total = 0;
  for (const Var& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix out(parts[0].rows(), total);
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.cols();
  }
  return t.record(std::move(out), parts, [spans = std::move(spans)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (const auto& [id, o] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, g.middleCols(o, t.value(id).cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = *parts[0].tape();
  Index total = 0;
  for (const Var& p : parts) {
    if (p.cols() != parts[0].cols()) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, parts[0].cols());
  std::vector<std::pair<int, Index>> spans;
  Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    spans.emplace_back(p.id(), off);
    off += p.rows();
  }
  return t.record(std::move(out), parts, [spans = std::move(spans)](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    for (const auto& [id, o] : spans) {
      if (t.needs_grad(id)) t.accumulate(id, g.middleRows(o, t.value(id).rows()));
    }
  });
}

Var mean_rows(Var a) {
  if (a.rows() == 0) throw ShapeError("mean_rows: empty input");
  Tape& t = *a.tape();
  Matrix out = a.value().colwise().mean();
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& t, int self) {
    const Index n = t.value(ia).rows();
    Matrix d = t.grad(self).replicate(n, 1) / static_cast<double>(n);
    t.accumulate(ia, d);
  });
}

Var l2_normalize_rows(Var a, double min_norm) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Eigen::VectorXd norms = x.rowwise().norm();
  for (Index r = 0; r < x.rows(); ++r) {
    if (!(norms(r) >= min_norm)) throw ZeroNorm("l2_normalize: row norm below threshold");
  }
  Matrix out = (x.array().colwise() / norms.array()).matrix();
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia, norms = std::move(norms)](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
    Matrix d = g - (y.array().colwise() * dot.array()).matrix();
    d = (d.array().colwise() / norms.array()).matrix();
    t.accumulate(ia, d);
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return t.record(std::move(out), {a}, [ia](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    t.accumulate(ia, Matrix::Constant(t.value(ia).rows(), t.value(ia).cols(), g));
  });
}

Var cross_entropy_sum(Var logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) {
    throw ShapeError("cross_entropy: one target per logit row required");
  }
  Tape& t = *logits.tape();
  Matrix probs(z.rows(), z.cols());
  double loss = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp().matrix();
    const double s = probs.row(r).sum();
    probs.row(r) /= s;
    const int tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0) continue;
    if (tgt >= z.cols()) throw IndexError("cross_entropy: target outside vocabulary");
    loss -= (z(r, tgt) - m) - std::log(s);
  }
  Matrix out(1, 1);
  out(0, 0) = loss;
  const int il = logits.id();
  std::vector<int> tg(targets.begin(), targets.end());
  return t.record(std::move(out), {logits},
                  [il, tg = std::move(tg), probs = std::move(probs)](Tape& t, int self) {
                    const double g = t.grad(self)(0, 0);
                    Matrix d = probs;
                    for (Index r = 0; r < d.rows(); ++r) {
                      const int tgt = tg[static_cast<size_t>(r)];
                      if (tgt < 0) {
                        d.row(r).setZero();
                      } else {
                        d(r, tgt) -= 1.0;
                      }
                    }
                    t.accumulate(il, d * g);
                  });
}

Var dropout(Var a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  Tape& t = *a.tape();
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(a.rows(), a.cols());
  const double inv = 1.0 / (1.0 - rate);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? inv : 0.0;
  Var m = t.constant(std::move(mask));
  return hadamard(a, m);
}

}  // namespace uar::ag
