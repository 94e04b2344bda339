#pragma once

#include <cassert>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace dsarf {

using NodeId = int;

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Mul,
  AddScalar,
  MulScalar,
  MatMul,     // C = A B
  MatMulBT,   // C = A B^T
  AddRowVec,  // C = A + broadcast(b), b is 1 x cols
  Tanh,
  Sigmoid,
  Relu,
  Exp,
  LogClamp,  // log(max(x, floor))
  SoftmaxRows,
  Sum,     // full reduction to 1x1
  RowSum,  // rows x 1
  SliceRows,
  ConcatRows,
  ConcatCols,
  Reshape,
};

/// Define-by-run reverse-mode tape. Values are computed eagerly when an op
/// is recorded; backward() walks the record once in reverse creation order
/// (creation order is a topological order by construction).
class Tape {
 public:
  struct Node {
    Op op;
    int a = -1, b = -1;
    int rows = 0, cols = 0;
    double scalar = 0.0;  // AddScalar / MulScalar / LogClamp floor
    int r0 = 0;           // SliceRows offset
    std::vector<int> srcs;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;  // leaves only
  };

  bool check_finite = true;

  NodeId leaf(const Tensor& t, bool requires_grad = false) {
    if (t.ndim() > 2) throw shape_error("tape leaf must be rank <= 2, got " + shape_str(t));
    Node n;
    n.op = Op::Leaf;
    n.rows = static_cast<int>(t.rows());
    n.cols = static_cast<int>(t.cols());
    n.val = t.v;
    n.requires_grad = requires_grad;
    return push(std::move(n), "leaf");
  }

  /// Leaf built from a row subset of `t`; backward scatters into the full
  /// shape of `t` (rows not selected get zero gradient).
  NodeId leaf_rows(const Tensor& t, std::span<const int> rows_sel, bool requires_grad = false) {
    if (t.ndim() > 2) throw shape_error("tape leaf must be rank <= 2");
    const int c = static_cast<int>(t.cols());
    Node n;
    n.op = Op::Leaf;
    n.rows = static_cast<int>(rows_sel.size());
    n.cols = c;
    n.val.resize(rows_sel.size() * static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < rows_sel.size(); ++i)
      std::copy_n(t.v.data() + static_cast<std::size_t>(rows_sel[i]) * c, c,
                  n.val.data() + i * c);
    n.requires_grad = requires_grad;
    NodeId id = push(std::move(n), "leaf");
    gathered_[id] = {static_cast<int>(t.rows()), std::vector<int>(rows_sel.begin(), rows_sel.end())};
    return id;
  }

  NodeId scalar_const(double x) { return leaf(Tensor::scalar(x), false); }

  NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

  NodeId add_scalar(NodeId a, double c) {
    Node n = unary_like(Op::AddScalar, a);
    n.scalar = c;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = nodes_[a].val[i] + c;
    return push(std::move(n), "add_scalar");
  }
  NodeId mul_scalar(NodeId a, double c) {
    Node n = unary_like(Op::MulScalar, a);
    n.scalar = c;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = nodes_[a].val[i] * c;
    return push(std::move(n), "mul_scalar");
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Node& A = nodes_[a];
    const Node& B = nodes_[b];
    if (A.cols != B.rows)
      throw shape_error("matmul: " + dims(A) + " x " + dims(B));
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.rows = A.rows;
    n.cols = B.cols;
    n.val.assign(static_cast<std::size_t>(n.rows) * n.cols, 0.0);
    gemm_nn(A.val.data(), B.val.data(), n.val.data(), A.rows, A.cols, B.cols);
    return push(std::move(n), "matmul");
  }

  /// C = A B^T with B given untransposed (rows(B) = cols(C)).
  NodeId matmul_bt(NodeId a, NodeId b) {
    const Node& A = nodes_[a];
    const Node& B = nodes_[b];
    if (A.cols != B.cols) throw shape_error("matmul_bt: " + dims(A) + " x " + dims(B) + "^T");
    Node n;
    n.op = Op::MatMulBT;
    n.a = a;
    n.b = b;
    n.rows = A.rows;
    n.cols = B.rows;
    n.val.assign(static_cast<std::size_t>(n.rows) * n.cols, 0.0);
    gemm_nt(A.val.data(), B.val.data(), n.val.data(), A.rows, A.cols, B.rows);
    return push(std::move(n), "matmul_bt");
  }

  NodeId add_rowvec(NodeId a, NodeId b) {
    const Node& A = nodes_[a];
    const Node& B = nodes_[b];
    if (B.rows != 1 || B.cols != A.cols)
      throw shape_error("add_rowvec: " + dims(A) + " + " + dims(B));
    Node n;
    n.op = Op::AddRowVec;
    n.a = a;
    n.b = b;
    n.rows = A.rows;
    n.cols = A.cols;
    n.val.resize(A.val.size());
    for (int i = 0; i < A.rows; ++i)
      for (int j = 0; j < A.cols; ++j)
        n.val[static_cast<std::size_t>(i) * A.cols + j] =
            A.val[static_cast<std::size_t>(i) * A.cols + j] + B.val[j];
    return push(std::move(n), "add_rowvec");
  }

  NodeId tanh(NodeId a) {
    Node n = unary_like(Op::Tanh, a);
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::tanh(nodes_[a].val[i]);
    return push(std::move(n), "tanh");
  }
  NodeId sigmoid(NodeId a) {
    Node n = unary_like(Op::Sigmoid, a);
    for (std::size_t i = 0; i < n.val.size(); ++i)
      n.val[i] = 1.0 / (1.0 + std::exp(-nodes_[a].val[i]));
    return push(std::move(n), "sigmoid");
  }
  NodeId relu(NodeId a) {
    Node n = unary_like(Op::Relu, a);
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::max(0.0, nodes_[a].val[i]);
    return push(std::move(n), "relu");
  }
  NodeId exp(NodeId a) {
    Node n = unary_like(Op::Exp, a);
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::exp(nodes_[a].val[i]);
    return push(std::move(n), "exp");
  }
  NodeId log_clamp(NodeId a, double floor = kProbFloor) {
    Node n = unary_like(Op::LogClamp, a);
    n.scalar = floor;
    for (std::size_t i = 0; i < n.val.size(); ++i)
      n.val[i] = std::log(std::max(nodes_[a].val[i], floor));
    return push(std::move(n), "log_clamp");
  }

  NodeId softmax_rows(NodeId a) {
    const Node& A = nodes_[a];
    Node n = unary_like(Op::SoftmaxRows, a);
    for (int i = 0; i < A.rows; ++i) {
      const double* x = A.val.data() + static_cast<std::size_t>(i) * A.cols;
      double* y = n.val.data() + static_cast<std::size_t>(i) * A.cols;
      double m = x[0];
      for (int j = 1; j < A.cols; ++j) m = std::max(m, x[j]);
      double z = 0.0;
      for (int j = 0; j < A.cols; ++j) {
        y[j] = std::exp(x[j] - m);
        z += y[j];
      }
      for (int j = 0; j < A.cols; ++j) y[j] /= z;
    }
    return push(std::move(n), "softmax_rows");
  }

  NodeId sum(NodeId a) {
    Node n;
    n.op = Op::Sum;
    n.a = a;
    n.rows = 1;
    n.cols = 1;
    double s = 0.0;
    for (double x : nodes_[a].val) s += x;
    n.val = {s};
    return push(std::move(n), "sum");
  }

  NodeId row_sum(NodeId a) {
    const Node& A = nodes_[a];
    Node n;
    n.op = Op::RowSum;
    n.a = a;
    n.rows = A.rows;
    n.cols = 1;
    n.val.assign(A.rows, 0.0);
    for (int i = 0; i < A.rows; ++i) {
      double s = 0.0;
      const double* x = A.val.data() + static_cast<std::size_t>(i) * A.cols;
      for (int j = 0; j < A.cols; ++j) s += x[j];
      n.val[i] = s;
    }
    return push(std::move(n), "row_sum");
  }

  NodeId slice_rows(NodeId a, int r0, int nrows) {
    const Node& A = nodes_[a];
    if (r0 < 0 || r0 + nrows > A.rows) throw shape_error("slice_rows out of range");
    Node n;
    n.op = Op::SliceRows;
    n.a = a;
    n.r0 = r0;
    n.rows = nrows;
    n.cols = A.cols;
    n.val.assign(A.val.begin() + static_cast<std::size_t>(r0) * A.cols,
                 A.val.begin() + static_cast<std::size_t>(r0 + nrows) * A.cols);
    return push(std::move(n), "slice_rows");
  }

  NodeId concat_rows(std::span<const NodeId> parts) {
    if (parts.empty()) throw shape_error("concat_rows: empty");
    Node n;
    n.op = Op::ConcatRows;
    n.cols = nodes_[parts[0]].cols;
    for (NodeId p : parts) {
      if (nodes_[p].cols != n.cols) throw shape_error("concat_rows: column mismatch");
      n.rows += nodes_[p].rows;
      n.srcs.push_back(p);
    }
    n.val.reserve(static_cast<std::size_t>(n.rows) * n.cols);
    for (NodeId p : parts) n.val.insert(n.val.end(), nodes_[p].val.begin(), nodes_[p].val.end());
    return push(std::move(n), "concat_rows");
  }

  NodeId concat_cols(std::span<const NodeId> parts) {
    if (parts.empty()) throw shape_error("concat_cols: empty");
    Node n;
    n.op = Op::ConcatCols;
    n.rows = nodes_[parts[0]].rows;
    for (NodeId p : parts) {
      if (nodes_[p].rows != n.rows) throw shape_error("concat_cols: row mismatch");
      n.cols += nodes_[p].cols;
      n.srcs.push_back(p);
    }
    n.val.assign(static_cast<std::size_t>(n.rows) * n.cols, 0.0);
    int off = 0;
    for (NodeId p : parts) {
      const Node& P = nodes_[p];
      for (int i = 0; i < n.rows; ++i)
        std::copy_n(P.val.data() + static_cast<std::size_t>(i) * P.cols, P.cols,
                    n.val.data() + static_cast<std::size_t>(i) * n.cols + off);
      off += P.cols;
    }
    return push(std::move(n), "concat_cols");
  }

  NodeId reshape(NodeId a, int rows, int cols) {
    const Node& A = nodes_[a];
    if (rows * cols != A.rows * A.cols) throw shape_error("reshape: element count mismatch");
    Node n;
    n.op = Op::Reshape;
    n.a = a;
    n.rows = rows;
    n.cols = cols;
    n.val = A.val;
    return push(std::move(n), "reshape");
  }

  // ---- access ----

  const std::vector<double>& value(NodeId id) const { return nodes_[id].val; }
  double scalar_value(NodeId id) const { return nodes_[id].val[0]; }
  int rows(NodeId id) const { return nodes_[id].rows; }
  int cols(NodeId id) const { return nodes_[id].cols; }
  std::size_t size() const { return nodes_.size(); }

  Tensor value_tensor(NodeId id) const {
    const Node& n = nodes_[id];
    return Tensor({static_cast<std::size_t>(n.rows), static_cast<std::size_t>(n.cols)}, n.val);
  }

  /// Reverse pass from a scalar loss. Returns the gradient for every leaf
  /// created with requires_grad, keyed by leaf node id (gathered leaves are
  /// scattered back to their full parameter shape). The tape is cleared.
  std::vector<std::pair<NodeId, Tensor>> backward(NodeId loss) {
    backward_inplace(loss);
    std::vector<std::pair<NodeId, Tensor>> out;
    for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
      const Node& n = nodes_[id];
      if (n.op != Op::Leaf || !n.requires_grad) continue;
      out.emplace_back(id, leaf_grad(id));
    }
    clear();
    return out;
  }

  /// Same reverse pass but leaves the tape intact so individual leaf grads
  /// can be read out with leaf_grad(). Used by the trainer.
  void backward_inplace(NodeId loss) {
    Node& L = nodes_[loss];
    if (L.rows != 1 || L.cols != 1) throw shape_error("backward: loss must be a scalar node");
    for (auto& n : nodes_) n.grad.assign(n.val.size(), 0.0);
    L.grad[0] = 1.0;
    for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) propagate(id);
    if (check_finite) {
      for (const auto& n : nodes_)
        if (n.op == Op::Leaf && n.requires_grad)
          for (double g : n.grad)
            if (!std::isfinite(g)) throw numeric_error("NaN encountered during backward");
    }
  }

  /// Gradient of a leaf in the shape of the tensor it was created from.
  Tensor leaf_grad(NodeId id) const {
    const Node& n = nodes_[id];
    auto it = gathered_.find(id);
    if (it == gathered_.end())
      return Tensor({static_cast<std::size_t>(n.rows), static_cast<std::size_t>(n.cols)}, n.grad);
    const auto& [full_rows, sel] = it->second;
    Tensor g({static_cast<std::size_t>(full_rows), static_cast<std::size_t>(n.cols)});
    for (std::size_t i = 0; i < sel.size(); ++i)
      for (int j = 0; j < n.cols; ++j)
        g.v[static_cast<std::size_t>(sel[i]) * n.cols + j] +=
            n.grad[i * static_cast<std::size_t>(n.cols) + j];
    return g;
  }

  void clear() {
    nodes_.clear();
    gathered_.clear();
  }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<NodeId, std::pair<int, std::vector<int>>> gathered_;

  static std::string dims(const Node& n) {
    return "(" + std::to_string(n.rows) + "x" + std::to_string(n.cols) + ")";
  }

  Node unary_like(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.a = a;
    n.rows = nodes_[a].rows;
    n.cols = nodes_[a].cols;
    n.val.resize(nodes_[a].val.size());
    return n;
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    const Node& A = nodes_[a];
    const Node& B = nodes_[b];
    if (A.rows != B.rows || A.cols != B.cols)
      throw shape_error("elementwise op: " + dims(A) + " vs " + dims(B));
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = A.rows;
    n.cols = A.cols;
    n.val.resize(A.val.size());
    switch (op) {
      case Op::Add:
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] + B.val[i];
        break;
      case Op::Sub:
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] - B.val[i];
        break;
      case Op::Mul:
        for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = A.val[i] * B.val[i];
        break;
      default:
        throw error("bad binary op");
    }
    return push(std::move(n), "elementwise");
  }

  NodeId push(Node&& n, const char* what) {
    if (check_finite) {
      for (double x : n.val)
        if (!std::isfinite(x)) throw numeric_error(std::string("non-finite value from ") + what);
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  // C(m x p) += A(m x k) B(k x p)
  static void gemm_nn(const double* a, const double* b, double* c, int m, int k, int p) {
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<std::size_t>(i) * k;
      double* ci = c + static_cast<std::size_t>(i) * p;
      for (int kk = 0; kk < k; ++kk) {
        const double av = ai[kk];
        const double* bk = b + static_cast<std::size_t>(kk) * p;
        for (int j = 0; j < p; ++j) ci[j] += av * bk[j];
      }
    }
  }
  // C(m x p) += A(m x k) B(p x k)^T
  static void gemm_nt(const double* a, const double* b, double* c, int m, int k, int p) {
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<std::size_t>(i) * k;
      double* ci = c + static_cast<std::size_t>(i) * p;
      for (int j = 0; j < p; ++j) {
        const double* bj = b + static_cast<std::size_t>(j) * k;
        double s = 0.0;
        for (int kk = 0; kk < k; ++kk) s += ai[kk] * bj[kk];
        ci[j] += s;
      }
    }
  }
  // C(k x p) += A(m x k)^T B(m x p)
  static void gemm_tn(const double* a, const double* b, double* c, int m, int k, int p) {
    for (int i = 0; i < m; ++i) {
      const double* ai = a + static_cast<std::size_t>(i) * k;
      const double* bi = b + static_cast<std::size_t>(i) * p;
      for (int kk = 0; kk < k; ++kk) {
        const double av = ai[kk];
        double* ck = c + static_cast<std::size_t>(kk) * p;
        for (int j = 0; j < p; ++j) ck[j] += av * bi[j];
      }
    }
  }

  void propagate(NodeId id) {
    Node& n = nodes_[id];
    bool any = false;
    for (double g : n.grad)
      if (g != 0.0) {
        any = true;
        break;
      }
    if (!any) return;
    switch (n.op) {
      case Op::Leaf:
        break;
      case Op::Add: {
        accum(n.a, n.grad);
        accum(n.b, n.grad);
        break;
      }
      case Op::Sub: {
        accum(n.a, n.grad);
        Node& B = nodes_[n.b];
        for (std::size_t i = 0; i < n.grad.size(); ++i) B.grad[i] -= n.grad[i];
        break;
      }
      case Op::Mul: {
        Node& A = nodes_[n.a];
        Node& B = nodes_[n.b];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          A.grad[i] += n.grad[i] * B.val[i];
          B.grad[i] += n.grad[i] * A.val[i];
        }
        break;
      }
      case Op::AddScalar:
        accum(n.a, n.grad);
        break;
      case Op::MulScalar: {
        Node& A = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i) A.grad[i] += n.grad[i] * n.scalar;
        break;
      }
      case Op::MatMul: {
        Node& A = nodes_[n.a];
        Node& B = nodes_[n.b];
        // dA += dC B^T ; dB += A^T dC
        gemm_nt(n.grad.data(), B.val.data(), A.grad.data(), n.rows, n.cols, A.cols);
        gemm_tn(A.val.data(), n.grad.data(), B.grad.data(), A.rows, A.cols, n.cols);
        break;
      }
      case Op::MatMulBT: {
        Node& A = nodes_[n.a];
        Node& B = nodes_[n.b];
        // C = A B^T : dA += dC B ; dB += dC^T A
        gemm_nn(n.grad.data(), B.val.data(), A.grad.data(), n.rows, n.cols, A.cols);
        gemm_tn(n.grad.data(), A.val.data(), B.grad.data(), n.rows, n.cols, A.cols);
        break;
      }
      case Op::AddRowVec: {
        Node& A = nodes_[n.a];
        Node& B = nodes_[n.b];
        accum(n.a, n.grad);
        for (int i = 0; i < n.rows; ++i)
          for (int j = 0; j < n.cols; ++j)
            B.grad[j] += n.grad[static_cast<std::size_t>(i) * n.cols + j];
        (void)A;
        break;
      }
      case Op::Tanh: {
        Node& A = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          A.grad[i] += n.grad[i] * (1.0 - n.val[i] * n.val[i]);
        break;
      }
      case Op::Sigmoid: {
        Node& A = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          A.grad[i] += n.grad[i] * n.val[i] * (1.0 - n.val[i]);
        break;
      }
      case Op::Relu: {
        Node& A = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          if (A.val[i] > 0.0) A.grad[i] += n.grad[i];
        break;
      }
      case Op::Exp: {
        Node& A = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i) A.grad[i] += n.grad[i] * n.val[i];
        break;
      }
      case Op::LogClamp: {
        Node& A = nodes_[n.a];
        for (std::size_t i = 0; i < n.grad.size(); ++i)
          if (A.val[i] > n.scalar) A.grad[i] += n.grad[i] / A.val[i];
        break;
      }
      case Op::SoftmaxRows: {
        Node& A = nodes_[n.a];
        for (int i = 0; i < n.rows; ++i) {
          const double* y = n.val.data() + static_cast<std::size_t>(i) * n.cols;
          const double* gy = n.grad.data() + static_cast<std::size_t>(i) * n.cols;
          double* gx = A.grad.data() + static_cast<std::size_t>(i) * n.cols;
          double s = 0.0;
          for (int j = 0; j < n.cols; ++j) s += gy[j] * y[j];
          for (int j = 0; j < n.cols; ++j) gx[j] += y[j] * (gy[j] - s);
        }
        break;
      }
      case Op::Sum: {
        Node& A = nodes_[n.a];
        const double g = n.grad[0];
        for (auto& x : A.grad) x += g;
        break;
      }
      case Op::RowSum: {
        Node& A = nodes_[n.a];
        for (int i = 0; i < A.rows; ++i) {
          const double g = n.grad[i];
          double* gx = A.grad.data() + static_cast<std::size_t>(i) * A.cols;
          for (int j = 0; j < A.cols; ++j) gx[j] += g;
        }
        break;
      }
      case Op::SliceRows: {
        Node& A = nodes_[n.a];
        double* dst = A.grad.data() + static_cast<std::size_t>(n.r0) * A.cols;
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += n.grad[i];
        break;
      }
      case Op::ConcatRows: {
        std::size_t off = 0;
        for (NodeId p : n.srcs) {
          Node& P = nodes_[p];
          for (std::size_t i = 0; i < P.grad.size(); ++i) P.grad[i] += n.grad[off + i];
          off += P.grad.size();
        }
        break;
      }
      case Op::ConcatCols: {
        int off = 0;
        for (NodeId p : n.srcs) {
          Node& P = nodes_[p];
          for (int i = 0; i < n.rows; ++i)
            for (int j = 0; j < P.cols; ++j)
              P.grad[static_cast<std::size_t>(i) * P.cols + j] +=
                  n.grad[static_cast<std::size_t>(i) * n.cols + off + j];
          off += P.cols;
        }
        break;
      }
      case Op::Reshape: {
        accum(n.a, n.grad);
        break;
      }
    }
  }

  void accum(NodeId dst, const std::vector<double>& g) {
    Node& D = nodes_[dst];
    for (std::size_t i = 0; i < g.size(); ++i) D.grad[i] += g[i];
  }
};

}  // namespace dsarf
