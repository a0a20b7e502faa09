#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "castling/tensor.hpp"

namespace castling {

// A trainable value. Parameters live outside any tape; tape leaves bind to
// them and backward() accumulates (+=) into grad, so one parameter can feed
// several graphs (or several samples on one graph) and collect all of it.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool requires_grad = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// Cheap handle into a tape. Vars are only valid for the tape that minted them.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
};

// Reverse-mode tape. record() appends one node per op in execution order,
// which is already a topological order of the DAG, so backward() is a single
// reverse sweep with no explicit sort. Nodes whose subtree contains no
// gradient-requiring parameter are skipped during the sweep.
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Var leaf(Tensor value);               // constant input
  Var param(Parameter& p);              // leaf bound to a parameter

  Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse execution order,
  // then flushes leaf gradients into their bound parameters. loss must be a
  // scalar (1 element); anything else is a contract violation.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  Tensor& grad_of(std::size_t id); // lazily allocates zeros
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

private:
  struct Node {
    Tensor value;
    Tensor grad;                   // empty until touched
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* bound = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;

  friend struct Var;
};

// ---- differentiable ops ------------------------------------------------------
// Each op validates shapes on the forward pass and registers the exact
// adjoint. Gradients follow the usual matrix calculus identities, e.g.
// C = A B  =>  dA += dC B^T, dB += A^T dC.

Var op_add(Var a, Var b);
Var op_sub(Var a, Var b);
Var op_mul(Var a, Var b); // elementwise
Var op_scale(Var a, double s);
Var op_add_scalar(Var a, double c);
Var op_matmul(Var a, Var b);
Var op_transpose(Var a);
Var op_relu(Var a);
Var op_tanh(Var a);
Var op_softmax_rows(Var a);
Var op_l2_normalize_rows(Var a, double eps = 1e-12);
Var op_dwconv1d(Var x, Var kernel);
Var op_dwconv2d(Var x, Var kernel);
Var op_avg_pool_tokens(Var x, std::size_t stride);
Var op_colsum(Var x);                  // m x n -> 1 x n
Var op_mean_rows(Var x);               // m x n -> 1 x n
Var op_sum_all(Var x);                 // -> 1 x 1
Var op_mean_all(Var x);                // -> 1 x 1
Var op_slice_cols(Var x, std::size_t c0, std::size_t c1); // [c0, c1)
Var op_concat_cols(const std::vector<Var>& xs);
Var op_concat_rows(const std::vector<Var>& xs);
Var op_reshape(Var x, Shape shape);
Var op_add_rowvec(Var x, Var row);     // broadcast 1 x n over rows
Var op_div_rowwise(Var x, Var denom);  // denom is m x 1, caller guards zeros

// Hard threshold keep: y = x where x > eps else 0. The gradient is
// straight-through on survivors only: entries killed in the forward pass get
// zero gradient, surviving entries pass their gradient unchanged.
Var op_threshold_keep(Var x, double eps);

// Mean cross entropy over rows of logits against integer labels; fused with
// log-softmax for stability. labels.size() must equal logits rows.
Var op_cross_entropy(Var logits, const std::vector<std::size_t>& labels);

// Row-wise layer norm with learned gain/bias (both 1 x n). Biased variance.
Var op_layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);

} // namespace castling
