#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. A Tape records every intermediate value together with a closure
// that pushes the node's gradient to its parents; backward() replays the
// closures in reverse creation order.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace uar {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

}  // namespace uar

namespace uar::ag {

struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Index size() const { return value.size(); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr && id_ >= 0; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  // With gradients disabled the tape only stores values (inference mode).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  // Leaf bound to p (one per tape); backward() adds its gradient into p.grad.
  Var parameter(Parameter& p);
  Var record(Matrix value, std::span<const Var> parents, BackwardFn fn);
  Var record(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  const Matrix& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Matrix& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
  bool has_grad(int id) const { return nodes_[static_cast<size_t>(id)].grad.size() > 0; }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(root)/d(root) = 1 for a 1x1 root.
  void backward(Var root);
  // Seeds arbitrary upstream gradients on several outputs at once.
  void backward(std::span<const std::pair<Var, Matrix>> seeds);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  void run_backward(int max_id);

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> bound_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

// ---- primitive operations -------------------------------------------------

Var matmul(Var a, Var b);
// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
// Adds a 1xC row vector to every row of a.
Var add_row(Var a, Var row);
// Sum of coefficient * var over equally shaped inputs.
Var linear_combination(std::span<const Var> vars, std::span<const double> coefs);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);

Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

Var gather_rows(Var table, std::span<const int> rows);
Var slice_cols(Var a, Index start, Index count);
Var slice_block(Var a, Index rows, Index cols);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);

Var mean_rows(Var a);
// Each row divided by its Euclidean norm; throws ZeroNorm below min_norm.
Var l2_normalize_rows(Var a, double min_norm = 1e-12);
Var sum_all(Var a);
// Sum over rows with target >= 0 of -log softmax(logits_row)[target].
Var cross_entropy_sum(Var logits, std::span<const int> targets);
// Multiplies by an inverted-dropout keep mask drawn from rng.
Var dropout(Var a, double rate, std::mt19937_64& rng);

}  // namespace uar::ag
