#pragma once

#include <string>
#include <vector>

#include "ptsm/rng.hpp"
#include "ptsm/tensor.hpp"

namespace ptsm {

enum class Mode { Train, Eval };

enum class OpKind {
  Leaf,
  Constant,
  Add,
  Subtract,
  Multiply,
  Divide,
  Scale,
  Shift,
  ClampMin,
  ClampMax,
  Sigmoid,
  Elu,
  Relu,
  Log,
  Exp,
  Abs,
  Sqrt,
  Reshape,
  Transpose,
  ConcatCols,
  Matmul,
  Conv1d,
  Softmax,
  Sum,
  Mean,
  SumAxis,
  MeanAxis,
  L1Norm,
  L2Norm,
  FrobeniusNorm,
  Trace,
  BatchCov,
  BatchCrossCov,
  BatchNorm,
  Dropout,
  AdaptiveAvgPool,
};

const char* op_name(OpKind k);

/// Names of every differentiable primitive the tape supports. All model and
/// loss computations compose only these.
std::vector<std::string> primitive_set();

/// Handle to a node on a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Running statistics owned by a batch-norm layer. Train-mode forward updates
/// them; eval-mode forward reads them and is deterministic.
struct BnState {
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  explicit BnState(i64 features = 0)
      : running_mean({std::max<i64>(features, 1)}), running_var({std::max<i64>(features, 1)}, 1.0) {}
};

/// Reverse-mode differentiation tape. Building an op records the node and
/// computes its value immediately; backward() walks the recorded graph once in
/// reverse creation order, which is a topological order by construction.
class Tape {
 public:
  explicit Tape(Rng rng = Rng(0)) : rng_(rng) {}

  Var leaf(const Tensor& value);
  Var constant(const Tensor& value);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);
  Var shift(Var a, double c);
  Var clamp_min(Var a, double c);
  Var clamp_max(Var a, double c);
  Var sigmoid(Var a);
  Var elu(Var a);
  Var relu(Var a);
  Var log(Var a);
  Var exp(Var a);
  Var abs(Var a);
  Var sqrt(Var a);

  Var reshape(Var a, Shape s);
  Var transpose(Var a);
  Var concat_cols(Var a, Var b);
  Var matmul(Var a, Var b);

  Var sum(Var a);
  Var mean(Var a);
  Var sum_axis(Var a, i64 axis, bool keepdim = false);
  Var mean_axis(Var a, i64 axis, bool keepdim = false);
  Var l1_norm(Var a);
  Var l2_norm(Var a);
  Var frobenius_norm(Var a);
  Var trace(Var a);

  Var batch_cov(Var x);
  Var batch_cross_cov(Var x, Var y);

  Var softmax_rows(Var a);
  Var conv1d(Var x, Var w, Var b, i64 pad);
  Var batch_norm(Var x, Var gamma, Var beta, BnState& state, Mode mode);
  Var dropout(Var a, double rate, Mode mode);
  Var adaptive_avg_pool(Var a, i64 t_out);

  const Tensor& value(Var v) const;
  const Shape& shape(Var v) const { return value(v).shape(); }
  size_t size() const { return nodes_.size(); }
  Rng& rng() { return rng_; }

  /// Reverse pass from a scalar root. Every node reachable from the leaves
  /// gets a gradient; leaves not on a path to the root keep a zero gradient.
  void backward(Var root);
  /// Gradient of the given node after backward(); zero tensor if untouched.
  Tensor grad(Var v) const;
  void clear_grads();

 private:
  struct Node {
    OpKind op;
    int a = -1, b = -1, c = -1;
    Tensor value;
    Tensor aux;    // op-specific cache: dropout mask, bn invstd, conv patches
    Tensor aux2;   // bn normalized input
    double d0 = 0.0;
    i64 i0 = 0, i1 = 0;
  };

  int push(Node n);
  const Node& node(Var v) const;
  void accumulate(int id, const Tensor& g);
  void accumulate_move(int id, Tensor&& g);
  void backprop_node(int id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  Rng rng_;
};

}  // namespace ptsm
