#pragma once

#include <map>
#include <string>
#include <vector>

#include "trinet/tensor.hpp"

namespace trinet {

// Reverse-mode differentiation over a retained DAG of dense ops.
//
// Nodes are appended in topological order (inputs must exist before use).
// Leaves are named Input/Param nodes whose values are bound at evaluation
// time, so one graph can be re-evaluated against fresh data or updated
// parameters. Second-order support is provided by grad_wrt(), which expands
// the reverse pass of a scalar output into ordinary graph nodes; the L2
// gradient-norm penalty is built on top of that expansion.

enum class Op {
  Input,
  Param,
  Const,
  Dense,         // (x[B,i], W[i,o], b[o]) -> [B,o]
  MatMul,        // (A[B,i], W[i,o]) -> [B,o]
  MatMulBT,      // (U[B,o], W[i,o]) -> U W^T : [B,i]
  MatMulTA,      // (X[B,i], U[B,o]) -> X^T U : [i,o]
  RowSum,        // [B,o] -> [B]
  ColSum,        // [B,o] -> [o]
  BroadcastCol,  // ([B], cols=a) -> [B,cols]
  BroadcastRow,  // ([o], rows=a) -> [rows,o]
  BroadcastTo,   // (scalar) -> attr shape
  Add,
  Sub,
  Mul,
  Div,
  Scale,      // a * x
  AddScalar,  // x + a
  Neg,
  Relu,
  LeakyRelu,  // slope a
  Sigmoid,
  Tanh,
  StepMix,  // x > 0 ? a : b   (piecewise-constant; zero derivative)
  Softmax,
  LogSoftmax,
  Sum,   // -> scalar
  Mean,  // -> scalar
  Square,
  Sqrt,
  ConcatCols,  // (A[B,i], C[B,j]) -> [B,i+j]
  SliceCols,   // (X[B,n], from=a, to=b) -> [B,b-a]
};

const char* op_name(Op op);

struct Node {
  Op op;
  Shape shape;
  std::vector<int> in;
  double a = 0.0;  // scalar attribute (scale, slope, addend, slice from, ...)
  double b = 0.0;
  Shape target;      // BroadcastTo
  std::string name;  // leaves
  Tensor value;      // Const payload
  bool requires_grad = false;
};

using TensorMap = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, Tensor>;

class Graph {
 public:
  int input(const std::string& name, Shape shape);
  int param(const std::string& name, Shape shape);
  int constant(Tensor t);
  int scalar_const(double x) { return constant(Tensor::scalar(x)); }

  int dense(int x, int W, int b);
  int matmul(int A, int W);
  int matmul_bt(int U, int W);
  int matmul_ta(int X, int U);
  int row_sum(int x);
  int col_sum(int x);
  int broadcast_col(int v, std::size_t cols);
  int broadcast_row(int v, std::size_t rows);
  int broadcast_to(int s, Shape shape);
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int div(int a, int b);
  int scale(int x, double k);
  int add_scalar(int x, double k);
  int neg(int x);
  int relu(int x);
  int leaky_relu(int x, double slope = 0.2);
  int sigmoid(int x);
  int tanh_(int x);
  int step_mix(int x, double hi, double lo);
  int softmax(int x);
  int log_softmax(int x);
  int sum(int x);
  int mean(int x);
  int square(int x);
  int sqrt_(int x);
  int concat_cols(int a, int b);
  int slice_cols(int x, std::size_t from, std::size_t to);

  // Symbolic reverse pass: appends nodes computing d(scalar_out)/d(wrt).
  // Returns a node of wrt's shape. Zero constant if out does not depend on wrt.
  int grad_wrt(int scalar_out, int wrt);

  // Per-row L2 norm of d(sum of rowwise outputs)/dx: [B] node. x must be [B,d].
  int grad_l2_norm_rows(int scalar_out, int x);

  void mark_output(const std::string& name, int id);
  const std::map<std::string, int>& outputs() const { return outputs_; }

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  int emit(Node n);
  int vjp_node(int id, int input_slot, int upstream);

  std::vector<Node> nodes_;
  std::map<std::string, int> outputs_;
  std::map<std::string, int> leaves_;
};

// Per-graph evaluation state. Holds the value of every node.
struct Evaluation {
  std::vector<Tensor> vals;
  bool evaluated = false;

  const Tensor& value(int id) const { return vals[static_cast<std::size_t>(id)]; }
};

// Binds every Input/Param leaf by name, runs all nodes in order, checks
// finiteness. Throws on unbound leaves, shape mismatches, non-finite values.
Evaluation forward_eval(const Graph& g, const TensorMap& bindings);

// Named outputs of an evaluated graph.
TensorMap output_values(const Graph& g, const Evaluation& ev);

// Reverse pass from a scalar loss node. Returns gradients keyed by Param
// leaf name, for every requires_grad leaf the loss depends on.
GradMap backward(const Graph& g, const Evaluation& ev, int loss);

}  // namespace trinet
