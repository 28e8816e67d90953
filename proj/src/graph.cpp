#include "trinet/graph.hpp"

#include <algorithm>
#include <cmath>

namespace trinet {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Const: return "const";
    case Op::Dense: return "dense";
    case Op::MatMul: return "matmul";
    case Op::MatMulBT: return "matmul_bt";
    case Op::MatMulTA: return "matmul_ta";
    case Op::RowSum: return "row_sum";
    case Op::ColSum: return "col_sum";
    case Op::BroadcastCol: return "broadcast_col";
    case Op::BroadcastRow: return "broadcast_row";
    case Op::BroadcastTo: return "broadcast_to";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::Neg: return "neg";
    case Op::Relu: return "relu";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::Sigmoid: return "sigmoid";
    case Op::Tanh: return "tanh";
    case Op::StepMix: return "step_mix";
    case Op::Softmax: return "softmax";
    case Op::LogSoftmax: return "log_softmax";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
  }
  return "?";
}

namespace {

bool bcast_scalar(const Shape& s) { return shape_size(s) == 1; }

Shape binary_shape(const Shape& a, const Shape& b, const char* what) {
  if (a == b) return a;
  if (bcast_scalar(a)) return b;
  if (bcast_scalar(b)) return a;
  detail::fail(what, ": incompatible shapes ", shape_str(a), " vs ", shape_str(b));
}

void require_rank2(const Node& n, int id, const char* what) {
  TRI_CHECK(n.shape.size() == 2, what, ": node ", id, " must be rank-2, got ",
            shape_str(n.shape));
}

}  // namespace

int Graph::emit(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::input(const std::string& name, Shape shape) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) {
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    TRI_CHECK(n.op == Op::Input && n.shape == shape, "leaf '", name,
              "' redeclared with different kind or shape");
    return it->second;
  }
  Node n;
  n.op = Op::Input;
  n.shape = std::move(shape);
  n.name = name;
  int id = emit(std::move(n));
  leaves_[name] = id;
  return id;
}

int Graph::param(const std::string& name, Shape shape) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) {
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    TRI_CHECK(n.op == Op::Param && n.shape == shape, "leaf '", name,
              "' redeclared with different kind or shape");
    return it->second;
  }
  Node n;
  n.op = Op::Param;
  n.shape = std::move(shape);
  n.name = name;
  n.requires_grad = true;
  int id = emit(std::move(n));
  leaves_[name] = id;
  return id;
}

int Graph::constant(Tensor t) {
  Node n;
  n.op = Op::Const;
  n.shape = t.shape;
  n.value = std::move(t);
  return emit(std::move(n));
}

int Graph::dense(int x, int W, int b) {
  const Node& nx = node(x);
  const Node& nW = node(W);
  const Node& nb = node(b);
  TRI_CHECK(nW.shape.size() == 2, "dense: weight must be rank-2, got ", shape_str(nW.shape));
  const std::size_t in = nW.shape[0], out = nW.shape[1];
  TRI_CHECK(nb.shape == Shape{out}, "dense: bias shape ", shape_str(nb.shape),
            " does not match weight columns ", out);
  Node n;
  n.op = Op::Dense;
  n.in = {x, W, b};
  if (nx.shape.size() == 2) {
    TRI_CHECK(nx.shape[1] == in, "dense: input width ", nx.shape[1],
              " does not match weight rows ", in);
    n.shape = {nx.shape[0], out};
  } else if (nx.shape.size() == 1) {
    TRI_CHECK(nx.shape[0] == in, "dense: input width ", nx.shape[0],
              " does not match weight rows ", in);
    n.shape = {out};
  } else {
    detail::fail("dense: input must be rank-1 or rank-2, got ", shape_str(nx.shape));
  }
  return emit(std::move(n));
}

int Graph::matmul(int A, int W) {
  require_rank2(node(A), A, "matmul");
  require_rank2(node(W), W, "matmul");
  TRI_CHECK(node(A).shape[1] == node(W).shape[0], "matmul: inner dims differ: ",
            shape_str(node(A).shape), " x ", shape_str(node(W).shape));
  Node n;
  n.op = Op::MatMul;
  n.in = {A, W};
  n.shape = {node(A).shape[0], node(W).shape[1]};
  return emit(std::move(n));
}

int Graph::matmul_bt(int U, int W) {
  require_rank2(node(U), U, "matmul_bt");
  require_rank2(node(W), W, "matmul_bt");
  TRI_CHECK(node(U).shape[1] == node(W).shape[1], "matmul_bt: column dims differ");
  Node n;
  n.op = Op::MatMulBT;
  n.in = {U, W};
  n.shape = {node(U).shape[0], node(W).shape[0]};
  return emit(std::move(n));
}

int Graph::matmul_ta(int X, int U) {
  require_rank2(node(X), X, "matmul_ta");
  require_rank2(node(U), U, "matmul_ta");
  TRI_CHECK(node(X).shape[0] == node(U).shape[0], "matmul_ta: row dims differ");
  Node n;
  n.op = Op::MatMulTA;
  n.in = {X, U};
  n.shape = {node(X).shape[1], node(U).shape[1]};
  return emit(std::move(n));
}

int Graph::row_sum(int x) {
  require_rank2(node(x), x, "row_sum");
  Node n;
  n.op = Op::RowSum;
  n.in = {x};
  n.shape = {node(x).shape[0]};
  return emit(std::move(n));
}

int Graph::col_sum(int x) {
  require_rank2(node(x), x, "col_sum");
  Node n;
  n.op = Op::ColSum;
  n.in = {x};
  n.shape = {node(x).shape[1]};
  return emit(std::move(n));
}

int Graph::broadcast_col(int v, std::size_t cols) {
  TRI_CHECK(node(v).shape.size() == 1, "broadcast_col: expects rank-1 input");
  Node n;
  n.op = Op::BroadcastCol;
  n.in = {v};
  n.a = static_cast<double>(cols);
  n.shape = {node(v).shape[0], cols};
  return emit(std::move(n));
}

int Graph::broadcast_row(int v, std::size_t rows) {
  TRI_CHECK(node(v).shape.size() == 1, "broadcast_row: expects rank-1 input");
  Node n;
  n.op = Op::BroadcastRow;
  n.in = {v};
  n.a = static_cast<double>(rows);
  n.shape = {rows, node(v).shape[0]};
  return emit(std::move(n));
}

int Graph::broadcast_to(int s, Shape shape) {
  TRI_CHECK(shape_size(node(s).shape) == 1, "broadcast_to: source must be scalar");
  Node n;
  n.op = Op::BroadcastTo;
  n.in = {s};
  n.target = shape;
  n.shape = std::move(shape);
  return emit(std::move(n));
}

#define TRI_BINARY(fn, OPK)                                      \
  int Graph::fn(int a, int b) {                                  \
    Node n;                                                      \
    n.op = Op::OPK;                                              \
    n.in = {a, b};                                               \
    n.shape = binary_shape(node(a).shape, node(b).shape, #fn);   \
    return emit(std::move(n));                                   \
  }

TRI_BINARY(add, Add)
TRI_BINARY(sub, Sub)
TRI_BINARY(mul, Mul)
TRI_BINARY(div, Div)
#undef TRI_BINARY

#define TRI_UNARY(fn, OPK)              \
  int Graph::fn(int x) {                \
    Node n;                             \
    n.op = Op::OPK;                     \
    n.in = {x};                         \
    n.shape = node(x).shape;            \
    return emit(std::move(n));          \
  }

TRI_UNARY(neg, Neg)
TRI_UNARY(relu, Relu)
TRI_UNARY(sigmoid, Sigmoid)
TRI_UNARY(tanh_, Tanh)
TRI_UNARY(square, Square)
TRI_UNARY(sqrt_, Sqrt)
#undef TRI_UNARY

int Graph::scale(int x, double k) {
  Node n;
  n.op = Op::Scale;
  n.in = {x};
  n.a = k;
  n.shape = node(x).shape;
  return emit(std::move(n));
}

int Graph::add_scalar(int x, double k) {
  Node n;
  n.op = Op::AddScalar;
  n.in = {x};
  n.a = k;
  n.shape = node(x).shape;
  return emit(std::move(n));
}

int Graph::leaky_relu(int x, double slope) {
  Node n;
  n.op = Op::LeakyRelu;
  n.in = {x};
  n.a = slope;
  n.shape = node(x).shape;
  return emit(std::move(n));
}

int Graph::step_mix(int x, double hi, double lo) {
  Node n;
  n.op = Op::StepMix;
  n.in = {x};
  n.a = hi;
  n.b = lo;
  n.shape = node(x).shape;
  return emit(std::move(n));
}

int Graph::softmax(int x) {
  TRI_CHECK(node(x).shape.size() >= 1 && node(x).shape.size() <= 2,
            "softmax: expects rank-1 or rank-2 input");
  Node n;
  n.op = Op::Softmax;
  n.in = {x};
  n.shape = node(x).shape;
  return emit(std::move(n));
}

int Graph::log_softmax(int x) {
  TRI_CHECK(node(x).shape.size() >= 1 && node(x).shape.size() <= 2,
            "log_softmax: expects rank-1 or rank-2 input");
  Node n;
  n.op = Op::LogSoftmax;
  n.in = {x};
  n.shape = node(x).shape;
  return emit(std::move(n));
}

int Graph::sum(int x) {
  Node n;
  n.op = Op::Sum;
  n.in = {x};
  n.shape = {};
  return emit(std::move(n));
}

int Graph::mean(int x) {
  Node n;
  n.op = Op::Mean;
  n.in = {x};
  n.shape = {};
  return emit(std::move(n));
}

int Graph::concat_cols(int a, int b) {
  require_rank2(node(a), a, "concat_cols");
  require_rank2(node(b), b, "concat_cols");
  TRI_CHECK(node(a).shape[0] == node(b).shape[0], "concat_cols: row counts differ");
  Node n;
  n.op = Op::ConcatCols;
  n.in = {a, b};
  n.shape = {node(a).shape[0], node(a).shape[1] + node(b).shape[1]};
  return emit(std::move(n));
}

int Graph::slice_cols(int x, std::size_t from, std::size_t to) {
  require_rank2(node(x), x, "slice_cols");
  TRI_CHECK(from < to && to <= node(x).shape[1], "slice_cols: bad range");
  Node n;
  n.op = Op::SliceCols;
  n.in = {x};
  n.a = static_cast<double>(from);
  n.b = static_cast<double>(to);
  n.shape = {node(x).shape[0], to - from};
  return emit(std::move(n));
}

void Graph::mark_output(const std::string& name, int id) {
  TRI_CHECK(id >= 0 && id < size(), "mark_output: bad node id ", id);
  outputs_[name] = id;
}

// ---------------------------------------------------------------------------
// Symbolic reverse pass (second-order support).

int Graph::vjp_node(int id, int slot, int upstream) {
  const Node n = nodes_[static_cast<std::size_t>(id)];  // copy: emits invalidate refs
  const int u = upstream;
  auto reduce_if_scalar = [&](int gid, const Shape& want) {
    if (bcast_scalar(want) && !bcast_scalar(node(gid).shape)) return sum(gid);
    return gid;
  };
  switch (n.op) {
    case Op::Dense: {
      // rank-2 path only; the expansion is used for batched critic graphs
      TRI_CHECK(n.shape.size() == 2,
                "second-order differentiation through rank-1 dense is not supported");
      if (slot == 0) return matmul_bt(u, n.in[1]);
      if (slot == 1) return matmul_ta(n.in[0], u);
      return col_sum(u);
    }
    case Op::MatMul:
      return slot == 0 ? matmul_bt(u, n.in[1]) : matmul_ta(n.in[0], u);
    case Op::Relu:
      return mul(u, step_mix(n.in[0], 1.0, 0.0));
    case Op::LeakyRelu:
      return mul(u, step_mix(n.in[0], 1.0, n.a));
    case Op::Sigmoid: {
      int y = id;
      return mul(u, mul(y, add_scalar(neg(y), 1.0)));
    }
    case Op::Tanh: {
      int y = id;
      return mul(u, add_scalar(neg(square(y)), 1.0));
    }
    case Op::Add:
      return reduce_if_scalar(u, n.in[slot] >= 0 ? node(n.in[slot]).shape : Shape{});
    case Op::Sub: {
      int g = slot == 0 ? u : neg(u);
      return reduce_if_scalar(g, node(n.in[slot]).shape);
    }
    case Op::Mul: {
      int other = n.in[slot == 0 ? 1 : 0];
      return reduce_if_scalar(mul(u, other), node(n.in[slot]).shape);
    }
    case Op::Div: {
      if (slot == 0) return reduce_if_scalar(div(u, n.in[1]), node(n.in[0]).shape);
      int g = neg(div(mul(u, n.in[0]), square(n.in[1])));
      return reduce_if_scalar(g, node(n.in[1]).shape);
    }
    case Op::Scale:
      return scale(u, n.a);
    case Op::AddScalar:
      return u;
    case Op::Neg:
      return neg(u);
    case Op::Square:
      return mul(u, scale(n.in[0], 2.0));
    case Op::Sqrt:
      return div(scale(u, 0.5), id);
    case Op::Sum:
      return broadcast_to(u, node(n.in[0]).shape);
    case Op::Mean:
      return scale(broadcast_to(u, node(n.in[0]).shape),
                   1.0 / static_cast<double>(shape_size(node(n.in[0]).shape)));
    case Op::RowSum:
      return broadcast_col(u, node(n.in[0]).shape[1]);
    case Op::ColSum:
      return broadcast_row(u, node(n.in[0]).shape[0]);
    case Op::BroadcastCol:
      return row_sum(u);
    case Op::BroadcastRow:
      return col_sum(u);
    case Op::BroadcastTo:
      return sum(u);
    case Op::ConcatCols: {
      std::size_t split = node(n.in[0]).shape[1];
      return slot == 0 ? slice_cols(u, 0, split) : slice_cols(u, split, n.shape[1]);
    }
    case Op::StepMix:
      return -1;  // piecewise constant
    default:
      detail::fail("second-order differentiation through ", op_name(n.op),
                   " is not supported");
  }
}

int Graph::grad_wrt(int scalar_out, int wrt) {
  TRI_CHECK(scalar_out >= 0 && scalar_out < size() && wrt >= 0 && wrt < size(),
            "grad_wrt: bad node id");
  TRI_CHECK(is_scalar_shape(node(scalar_out).shape),
            "grad_wrt: output must be scalar, got ", shape_str(node(scalar_out).shape));

  const int n0 = size();
  std::vector<char> depends(static_cast<std::size_t>(n0), 0);
  depends[static_cast<std::size_t>(wrt)] = 1;
  for (int id = wrt + 1; id < n0; ++id)
    for (int in : nodes_[static_cast<std::size_t>(id)].in)
      if (depends[static_cast<std::size_t>(in)]) {
        depends[static_cast<std::size_t>(id)] = 1;
        break;
      }
  if (!depends[static_cast<std::size_t>(scalar_out)])
    return constant(Tensor::zeros(node(wrt).shape));

  std::vector<int> gmap(static_cast<std::size_t>(n0), -1);
  gmap[static_cast<std::size_t>(scalar_out)] = scalar_const(1.0);
  for (int id = scalar_out; id >= wrt; --id) {
    int u = gmap[static_cast<std::size_t>(id)];
    if (u < 0 || !depends[static_cast<std::size_t>(id)]) continue;
    if (id == wrt) continue;
    const auto ins = nodes_[static_cast<std::size_t>(id)].in;
    for (std::size_t slot = 0; slot < ins.size(); ++slot) {
      int src = ins[slot];
      if (!depends[static_cast<std::size_t>(src)]) continue;
      int g = vjp_node(id, static_cast<int>(slot), u);
      if (g < 0) continue;
      int& dst = gmap[static_cast<std::size_t>(src)];
      dst = dst < 0 ? g : add(dst, g);
    }
  }
  int result = gmap[static_cast<std::size_t>(wrt)];
  return result < 0 ? constant(Tensor::zeros(node(wrt).shape)) : result;
}

int Graph::grad_l2_norm_rows(int scalar_out, int x) {
  TRI_CHECK(node(x).shape.size() == 2, "grad_l2_norm_rows: x must be [B,d]");
  int gx = grad_wrt(scalar_out, x);
  // tiny floor under the sqrt keeps the derivative finite at zero gradient
  return sqrt_(add_scalar(row_sum(square(gx)), 1e-12));
}

// ---------------------------------------------------------------------------
// Numeric evaluation.

namespace {

void softmax_rows(const Tensor& x, Tensor& out, bool log_form) {
  const std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
  const std::size_t cols = x.rank() == 2 ? x.shape[1] : x.shape[0];
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xi = x.v.data() + r * cols;
    double* oi = out.v.data() + r * cols;
    double m = xi[0];
    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, xi[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xi[c] - m);
    const double lse = m + std::log(s);
    for (std::size_t c = 0; c < cols; ++c)
      oi[c] = log_form ? xi[c] - lse : std::exp(xi[c] - lse);
  }
}

void eval_node(const Graph& g, int id, std::vector<Tensor>& vals) {
  const Node& n = g.node(id);
  auto in = [&](int slot) -> const Tensor& {
    return vals[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])];
  };
  Tensor out(n.shape);
  switch (n.op) {
    case Op::Input:
    case Op::Param:
      return;  // bound before evaluation
    case Op::Const:
      vals[static_cast<std::size_t>(id)] = n.value;
      return;
    case Op::Dense: {
      const Tensor& x = in(0);
      const Tensor& W = in(1);
      const Tensor& b = in(2);
      const std::size_t icnt = W.shape[0], ocnt = W.shape[1];
      const std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
      for (std::size_t r = 0; r < rows; ++r) {
        double* orow = out.v.data() + r * ocnt;
        for (std::size_t o = 0; o < ocnt; ++o) orow[o] = b.v[o];
        const double* xrow = x.v.data() + r * icnt;
        for (std::size_t i = 0; i < icnt; ++i) {
          const double xv = xrow[i];
          if (xv == 0.0) continue;
          const double* wrow = W.v.data() + i * ocnt;
          for (std::size_t o = 0; o < ocnt; ++o) orow[o] += xv * wrow[o];
        }
      }
      break;
    }
    case Op::MatMul: {
      const Tensor& A = in(0);
      const Tensor& W = in(1);
      const std::size_t rows = A.shape[0], icnt = A.shape[1], ocnt = W.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        double* orow = out.v.data() + r * ocnt;
        const double* arow = A.v.data() + r * icnt;
        for (std::size_t i = 0; i < icnt; ++i) {
          const double av = arow[i];
          if (av == 0.0) continue;
          const double* wrow = W.v.data() + i * ocnt;
          for (std::size_t o = 0; o < ocnt; ++o) orow[o] += av * wrow[o];
        }
      }
      break;
    }
    case Op::MatMulBT: {
      const Tensor& U = in(0);
      const Tensor& W = in(1);
      const std::size_t rows = U.shape[0], ocnt = U.shape[1], icnt = W.shape[0];
      for (std::size_t r = 0; r < rows; ++r) {
        const double* urow = U.v.data() + r * ocnt;
        double* orow = out.v.data() + r * icnt;
        for (std::size_t i = 0; i < icnt; ++i) {
          const double* wrow = W.v.data() + i * ocnt;
          double acc = 0.0;
          for (std::size_t o = 0; o < ocnt; ++o) acc += urow[o] * wrow[o];
          orow[i] = acc;
        }
      }
      break;
    }
    case Op::MatMulTA: {
      const Tensor& X = in(0);
      const Tensor& U = in(1);
      const std::size_t rows = X.shape[0], icnt = X.shape[1], ocnt = U.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xrow = X.v.data() + r * icnt;
        const double* urow = U.v.data() + r * ocnt;
        for (std::size_t i = 0; i < icnt; ++i) {
          const double xv = xrow[i];
          if (xv == 0.0) continue;
          double* orow = out.v.data() + i * ocnt;
          for (std::size_t o = 0; o < ocnt; ++o) orow[o] += xv * urow[o];
        }
      }
      break;
    }
    case Op::RowSum: {
      const Tensor& x = in(0);
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* xrow = x.v.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc += xrow[c];
        out.v[r] = acc;
      }
      break;
    }
    case Op::ColSum: {
      const Tensor& x = in(0);
      const std::size_t rows = x.shape[0], cols = x.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xrow = x.v.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) out.v[c] += xrow[c];
      }
      break;
    }
    case Op::BroadcastCol: {
      const Tensor& v = in(0);
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.v[r * cols + c] = v.v[r];
      break;
    }
    case Op::BroadcastRow: {
      const Tensor& v = in(0);
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out.v[r * cols + c] = v.v[c];
      break;
    }
    case Op::BroadcastTo: {
      const double s = in(0).v[0];
      std::fill(out.v.begin(), out.v.end(), s);
      break;
    }
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Div: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const bool sa = a.size() == 1 && a.size() != out.size();
      const bool sb = b.size() == 1 && b.size() != out.size();
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double av = sa ? a.v[0] : a.v[i];
        const double bv = sb ? b.v[0] : b.v[i];
        switch (n.op) {
          case Op::Add: out.v[i] = av + bv; break;
          case Op::Sub: out.v[i] = av - bv; break;
          case Op::Mul: out.v[i] = av * bv; break;
          default: out.v[i] = av / bv; break;
        }
      }
      break;
    }
    case Op::Scale:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = n.a * in(0).v[i];
      break;
    case Op::AddScalar:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = in(0).v[i] + n.a;
      break;
    case Op::Neg:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = -in(0).v[i];
      break;
    case Op::Relu:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = std::max(0.0, in(0).v[i]);
      break;
    case Op::LeakyRelu:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = in(0).v[i];
        out.v[i] = x > 0.0 ? x : n.a * x;
      }
      break;
    case Op::Sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] = 1.0 / (1.0 + std::exp(-in(0).v[i]));
      break;
    case Op::Tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = std::tanh(in(0).v[i]);
      break;
    case Op::StepMix:
      for (std::size_t i = 0; i < out.size(); ++i)
        out.v[i] = in(0).v[i] > 0.0 ? n.a : n.b;
      break;
    case Op::Softmax:
      softmax_rows(in(0), out, false);
      break;
    case Op::LogSoftmax:
      softmax_rows(in(0), out, true);
      break;
    case Op::Sum: {
      double acc = 0.0;
      for (double x : in(0).v) acc += x;
      out.v[0] = acc;
      break;
    }
    case Op::Mean: {
      double acc = 0.0;
      for (double x : in(0).v) acc += x;
      out.v[0] = acc / static_cast<double>(in(0).size());
      break;
    }
    case Op::Square:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = in(0).v[i] * in(0).v[i];
      break;
    case Op::Sqrt:
      for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = std::sqrt(in(0).v[i]);
      break;
    case Op::ConcatCols: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t rows = n.shape[0], ca = a.shape[1], cb = b.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(a.v.data() + r * ca, ca, out.v.data() + r * (ca + cb));
        std::copy_n(b.v.data() + r * cb, cb, out.v.data() + r * (ca + cb) + ca);
      }
      break;
    }
    case Op::SliceCols: {
      const Tensor& x = in(0);
      const std::size_t from = static_cast<std::size_t>(n.a);
      const std::size_t rows = n.shape[0], cols = n.shape[1], xc = x.shape[1];
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(x.v.data() + r * xc + from, cols, out.v.data() + r * cols);
      break;
    }
  }
  vals[static_cast<std::size_t>(id)] = std::move(out);
}

}  // namespace

Evaluation forward_eval(const Graph& g, const TensorMap& bindings) {
  Evaluation ev;
  ev.vals.resize(static_cast<std::size_t>(g.size()));
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.op == Op::Input || n.op == Op::Param) {
      auto it = bindings.find(n.name);
      TRI_CHECK(it != bindings.end(), "forward: leaf '", n.name, "' is not bound");
      TRI_CHECK(it->second.shape == n.shape, "forward: leaf '", n.name, "' bound with shape ",
                shape_str(it->second.shape), ", declared ", shape_str(n.shape));
      ev.vals[static_cast<std::size_t>(id)] = it->second;
      continue;
    }
    eval_node(g, id, ev.vals);
    if (!ev.vals[static_cast<std::size_t>(id)].all_finite())
      detail::fail("forward: non-finite value at node ", id, " (", op_name(n.op), ")");
  }
  ev.evaluated = true;
  return ev;
}

TensorMap output_values(const Graph& g, const Evaluation& ev) {
  TRI_CHECK(ev.evaluated, "output_values: graph not evaluated");
  TensorMap out;
  for (const auto& [name, id] : g.outputs()) out[name] = ev.value(id);
  return out;
}

namespace {

// Accumulates the vector-Jacobian product of node `id` into its inputs' grads.
void accumulate_vjp(const Graph& g, int id, const Evaluation& ev,
                    std::vector<Tensor>& grads, const std::vector<char>& has_grad,
                    const std::vector<char>& needs) {
  const Node& n = g.node(id);
  const Tensor& u = grads[static_cast<std::size_t>(id)];
  auto val = [&](int slot) -> const Tensor& {
    return ev.value(n.in[static_cast<std::size_t>(slot)]);
  };
  auto gslot = [&](int slot) -> Tensor& {
    return grads[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])];
  };
  auto want = [&](int slot) {
    return needs[static_cast<std::size_t>(n.in[static_cast<std::size_t>(slot)])];
  };
  (void)has_grad;

  switch (n.op) {
    case Op::Input:
    case Op::Param:
    case Op::Const:
    case Op::StepMix:
      return;
    case Op::Dense: {
      const Tensor& x = val(0);
      const Tensor& W = val(1);
      const std::size_t icnt = W.shape[0], ocnt = W.shape[1];
      const std::size_t rows = x.rank() == 2 ? x.shape[0] : 1;
      if (want(0)) {
        Tensor& dx = gslot(0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* urow = u.v.data() + r * ocnt;
          double* drow = dx.v.data() + r * icnt;
          for (std::size_t i = 0; i < icnt; ++i) {
            const double* wrow = W.v.data() + i * ocnt;
            double acc = 0.0;
            for (std::size_t o = 0; o < ocnt; ++o) acc += urow[o] * wrow[o];
            drow[i] += acc;
          }
        }
      }
      if (want(1)) {
        Tensor& dW = gslot(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xrow = x.v.data() + r * icnt;
          const double* urow = u.v.data() + r * ocnt;
          for (std::size_t i = 0; i < icnt; ++i) {
            const double xv = xrow[i];
            if (xv == 0.0) continue;
            double* wrow = dW.v.data() + i * ocnt;
            for (std::size_t o = 0; o < ocnt; ++o) wrow[o] += xv * urow[o];
          }
        }
      }
      if (want(2)) {
        Tensor& db = gslot(2);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* urow = u.v.data() + r * ocnt;
          for (std::size_t o = 0; o < ocnt; ++o) db.v[o] += urow[o];
        }
      }
      return;
    }
    case Op::MatMul: {
      const Tensor& A = val(0);
      const Tensor& W = val(1);
      const std::size_t rows = A.shape[0], icnt = A.shape[1], ocnt = W.shape[1];
      if (want(0)) {
        Tensor& dA = gslot(0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < icnt; ++i) {
            const double* wrow = W.v.data() + i * ocnt;
            const double* urow = u.v.data() + r * ocnt;
            double acc = 0.0;
            for (std::size_t o = 0; o < ocnt; ++o) acc += urow[o] * wrow[o];
            dA.v[r * icnt + i] += acc;
          }
      }
      if (want(1)) {
        Tensor& dW = gslot(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* arow = A.v.data() + r * icnt;
          const double* urow = u.v.data() + r * ocnt;
          for (std::size_t i = 0; i < icnt; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* wrow = dW.v.data() + i * ocnt;
            for (std::size_t o = 0; o < ocnt; ++o) wrow[o] += av * urow[o];
          }
        }
      }
      return;
    }
    case Op::MatMulBT: {
      // out = U W^T ; u is [B,i]
      const Tensor& U = val(0);
      const Tensor& W = val(1);
      const std::size_t rows = U.shape[0], ocnt = U.shape[1], icnt = W.shape[0];
      if (want(0)) {
        Tensor& dU = gslot(0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < icnt; ++i) {
            const double uv = u.v[r * icnt + i];
            if (uv == 0.0) continue;
            const double* wrow = W.v.data() + i * ocnt;
            double* drow = dU.v.data() + r * ocnt;
            for (std::size_t o = 0; o < ocnt; ++o) drow[o] += uv * wrow[o];
          }
      }
      if (want(1)) {
        Tensor& dW = gslot(1);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < icnt; ++i) {
            const double uv = u.v[r * icnt + i];
            if (uv == 0.0) continue;
            const double* urow = U.v.data() + r * ocnt;
            double* wrow = dW.v.data() + i * ocnt;
            for (std::size_t o = 0; o < ocnt; ++o) wrow[o] += uv * urow[o];
          }
      }
      return;
    }
    case Op::MatMulTA: {
      // out = X^T U [i,o]
      const Tensor& X = val(0);
      const Tensor& U = val(1);
      const std::size_t rows = X.shape[0], icnt = X.shape[1], ocnt = U.shape[1];
      if (want(0)) {
        Tensor& dX = gslot(0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t i = 0; i < icnt; ++i) {
            const double* urow = U.v.data() + r * ocnt;
            const double* grow = u.v.data() + i * ocnt;
            double acc = 0.0;
            for (std::size_t o = 0; o < ocnt; ++o) acc += grow[o] * urow[o];
            dX.v[r * icnt + i] += acc;
          }
      }
      if (want(1)) {
        Tensor& dU = gslot(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xrow = X.v.data() + r * icnt;
          double* drow = dU.v.data() + r * ocnt;
          for (std::size_t i = 0; i < icnt; ++i) {
            const double xv = xrow[i];
            if (xv == 0.0) continue;
            const double* grow = u.v.data() + i * ocnt;
            for (std::size_t o = 0; o < ocnt; ++o) drow[o] += xv * grow[o];
          }
        }
      }
      return;
    }
    case Op::RowSum: {
      if (!want(0)) return;
      Tensor& dx = gslot(0);
      const std::size_t rows = n.shape[0], cols = val(0).shape[1];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dx.v[r * cols + c] += u.v[r];
      return;
    }
    case Op::ColSum: {
      if (!want(0)) return;
      Tensor& dx = gslot(0);
      const std::size_t rows = val(0).shape[0], cols = n.shape[0];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dx.v[r * cols + c] += u.v[c];
      return;
    }
    case Op::BroadcastCol: {
      if (!want(0)) return;
      Tensor& dv = gslot(0);
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < cols; ++c) acc += u.v[r * cols + c];
        dv.v[r] += acc;
      }
      return;
    }
    case Op::BroadcastRow: {
      if (!want(0)) return;
      Tensor& dv = gslot(0);
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dv.v[c] += u.v[r * cols + c];
      return;
    }
    case Op::BroadcastTo: {
      if (!want(0)) return;
      double acc = 0.0;
      for (double x : u.v) acc += x;
      gslot(0).v[0] += acc;
      return;
    }
    case Op::Add:
    case Op::Sub: {
      const double sign1 = n.op == Op::Sub ? -1.0 : 1.0;
      for (int slot = 0; slot < 2; ++slot) {
        if (!want(slot)) continue;
        const double sgn = slot == 0 ? 1.0 : sign1;
        Tensor& d = gslot(slot);
        if (d.size() == u.size()) {
          for (std::size_t i = 0; i < u.size(); ++i) d.v[i] += sgn * u.v[i];
        } else {
          double acc = 0.0;
          for (double x : u.v) acc += x;
          d.v[0] += sgn * acc;
        }
      }
      return;
    }
    case Op::Mul:
    case Op::Div: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const bool sa = a.size() == 1 && a.size() != u.size();
      const bool sb = b.size() == 1 && b.size() != u.size();
      for (std::size_t i = 0; i < u.size(); ++i) {
        const double av = sa ? a.v[0] : a.v[i];
        const double bv = sb ? b.v[0] : b.v[i];
        const double uv = u.v[i];
        if (want(0)) {
          const double da = n.op == Op::Mul ? uv * bv : uv / bv;
          gslot(0).v[sa ? 0 : i] += da;
        }
        if (want(1)) {
          const double db = n.op == Op::Mul ? uv * av : -uv * av / (bv * bv);
          gslot(1).v[sb ? 0 : i] += db;
        }
      }
      return;
    }
    case Op::Scale:
      if (!want(0)) return;
      for (std::size_t i = 0; i < u.size(); ++i) gslot(0).v[i] += n.a * u.v[i];
      return;
    case Op::AddScalar:
      if (!want(0)) return;
      for (std::size_t i = 0; i < u.size(); ++i) gslot(0).v[i] += u.v[i];
      return;
    case Op::Neg:
      if (!want(0)) return;
      for (std::size_t i = 0; i < u.size(); ++i) gslot(0).v[i] -= u.v[i];
      return;
    case Op::Relu: {
      if (!want(0)) return;
      const Tensor& x = val(0);
      for (std::size_t i = 0; i < u.size(); ++i)
        if (x.v[i] > 0.0) gslot(0).v[i] += u.v[i];
      return;
    }
    case Op::LeakyRelu: {
      if (!want(0)) return;
      const Tensor& x = val(0);
      for (std::size_t i = 0; i < u.size(); ++i)
        gslot(0).v[i] += u.v[i] * (x.v[i] > 0.0 ? 1.0 : n.a);
      return;
    }
    case Op::Sigmoid: {
      if (!want(0)) return;
      const Tensor& y = ev.value(id);
      for (std::size_t i = 0; i < u.size(); ++i)
        gslot(0).v[i] += u.v[i] * y.v[i] * (1.0 - y.v[i]);
      return;
    }
    case Op::Tanh: {
      if (!want(0)) return;
      const Tensor& y = ev.value(id);
      for (std::size_t i = 0; i < u.size(); ++i)
        gslot(0).v[i] += u.v[i] * (1.0 - y.v[i] * y.v[i]);
      return;
    }
    case Op::Softmax: {
      if (!want(0)) return;
      const Tensor& p = ev.value(id);
      const std::size_t rows = p.rank() == 2 ? p.shape[0] : 1;
      const std::size_t cols = p.rank() == 2 ? p.shape[1] : p.shape[0];
      Tensor& dx = gslot(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* pr = p.v.data() + r * cols;
        const double* ur = u.v.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += ur[c] * pr[c];
        double* dr = dx.v.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dr[c] += pr[c] * (ur[c] - dot);
      }
      return;
    }
    case Op::LogSoftmax: {
      if (!want(0)) return;
      const Tensor& lp = ev.value(id);
      const std::size_t rows = lp.rank() == 2 ? lp.shape[0] : 1;
      const std::size_t cols = lp.rank() == 2 ? lp.shape[1] : lp.shape[0];
      Tensor& dx = gslot(0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* lr = lp.v.data() + r * cols;
        const double* ur = u.v.data() + r * cols;
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += ur[c];
        double* dr = dx.v.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dr[c] += ur[c] - std::exp(lr[c]) * s;
      }
      return;
    }
    case Op::Sum:
      if (!want(0)) return;
      for (auto& d : gslot(0).v) d += u.v[0];
      return;
    case Op::Mean: {
      if (!want(0)) return;
      const double k = u.v[0] / static_cast<double>(val(0).size());
      for (auto& d : gslot(0).v) d += k;
      return;
    }
    case Op::Square: {
      if (!want(0)) return;
      const Tensor& x = val(0);
      for (std::size_t i = 0; i < u.size(); ++i) gslot(0).v[i] += 2.0 * x.v[i] * u.v[i];
      return;
    }
    case Op::Sqrt: {
      if (!want(0)) return;
      const Tensor& y = ev.value(id);
      for (std::size_t i = 0; i < u.size(); ++i)
        gslot(0).v[i] += 0.5 * u.v[i] / y.v[i];
      return;
    }
    case Op::ConcatCols: {
      const std::size_t rows = n.shape[0];
      const std::size_t ca = val(0).shape[1], cb = val(1).shape[1];
      for (std::size_t r = 0; r < rows; ++r) {
        if (want(0)) {
          double* d = gslot(0).v.data() + r * ca;
          const double* s = u.v.data() + r * (ca + cb);
          for (std::size_t c = 0; c < ca; ++c) d[c] += s[c];
        }
        if (want(1)) {
          double* d = gslot(1).v.data() + r * cb;
          const double* s = u.v.data() + r * (ca + cb) + ca;
          for (std::size_t c = 0; c < cb; ++c) d[c] += s[c];
        }
      }
      return;
    }
    case Op::SliceCols: {
      if (!want(0)) return;
      const std::size_t from = static_cast<std::size_t>(n.a);
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      const std::size_t xc = val(0).shape[1];
      Tensor& dx = gslot(0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dx.v[r * xc + from + c] += u.v[r * cols + c];
      return;
    }
  }
}

}  // namespace

GradMap backward(const Graph& g, const Evaluation& ev, int loss) {
  TRI_CHECK(ev.evaluated, "backward: graph not evaluated");
  TRI_CHECK(loss >= 0 && loss < g.size(), "backward: bad loss node id ", loss);
  TRI_CHECK(is_scalar_shape(g.node(loss).shape), "backward: loss must be scalar, got ",
            shape_str(g.node(loss).shape));

  // nodes that (transitively) touch a requires_grad leaf
  std::vector<char> needs(static_cast<std::size_t>(g.size()), 0);
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (n.requires_grad) {
      needs[static_cast<std::size_t>(id)] = 1;
      continue;
    }
    for (int in : n.in)
      if (needs[static_cast<std::size_t>(in)]) {
        needs[static_cast<std::size_t>(id)] = 1;
        break;
      }
  }

  std::vector<Tensor> grads(static_cast<std::size_t>(g.size()));
  std::vector<char> has(static_cast<std::size_t>(g.size()), 0);
  grads[static_cast<std::size_t>(loss)] = Tensor::scalar(1.0);
  has[static_cast<std::size_t>(loss)] = 1;

  for (int id = loss; id >= 0; --id) {
    if (!has[static_cast<std::size_t>(id)] || !needs[static_cast<std::size_t>(id)]) continue;
    const Node& n = g.node(id);
    for (int in : n.in) {
      const std::size_t s = static_cast<std::size_t>(in);
      if (needs[s] && !has[s]) {
        grads[s] = Tensor::zeros(g.node(in).shape);
        has[s] = 1;
      }
    }
    accumulate_vjp(g, id, ev, grads, has, needs);
  }

  GradMap out;
  for (int id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    if (!n.requires_grad) continue;
    out[n.name] = has[static_cast<std::size_t>(id)]
                      ? std::move(grads[static_cast<std::size_t>(id)])
                      : Tensor::zeros(n.shape);
  }
  return out;
}

}  // namespace trinet
