#include "emask/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "emask/error.hpp"

namespace emask::nk {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}
ConstMatMap as_mat(const Tensor& t) {
  return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

Tensor mat(std::size_t r, std::size_t c) { return Tensor({r, c}); }

constexpr double kGeluC = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);
constexpr double kMaskedLogit = -1e9;

}  // namespace

void Parameter::zero_grad() {
  if (!grad.same_shape(value)) grad = Tensor(value.shape());
  else grad.fill(0.0);
}

const char* op_name(Op op) noexcept {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Leaf: return "leaf";
    case Op::Matmul: return "matmul";
    case Op::MatmulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::AddRow: return "add_row";
    case Op::MulRow: return "mul_row";
    case Op::Scale: return "scale";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::LayerNorm: return "layernorm";
    case Op::Gelu: return "gelu";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceRows: return "slice_rows";
    case Op::ConcatRows: return "concat_rows";
    case Op::GatherRows: return "gather_rows";
    case Op::Sum: return "sum";
    case Op::MaskedCrossEntropy: return "masked_cross_entropy";
  }
  return "?";
}

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Graph::any_requires(std::initializer_list<Var> vs) const {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return node(v).requires_grad; });
}

Var Graph::constant(Tensor t) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(t);
  return push(std::move(n));
}

Var Graph::param(Parameter& p) {
  Node n;
  n.op = Op::Leaf;
  n.param = &p;
  n.requires_grad = p.trainable || grad_all_;
  return push(std::move(n));
}

// Leaf nodes alias their parameter's storage instead of copying it.
#define VAL(id) (nodes_[id].param ? nodes_[id].param->value : nodes_[id].value)

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = VAL(a.id);
  const Tensor& B = VAL(b.id);
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_string(A.shape()) + " x " +
                         shape_string(B.shape()));
  }
  Node n;
  n.op = Op::Matmul;
  n.inputs = {a.id, b.id};
  n.value = mat(A.rows(), B.cols());
  as_mat(n.value).noalias() = as_mat(A) * as_mat(B);
  n.requires_grad = any_requires({a, b});
  return push(std::move(n));
}

Var Graph::matmul_nt(Var a, Var b) {
  const Tensor& A = VAL(a.id);
  const Tensor& B = VAL(b.id);
  if (A.cols() != B.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ: " + shape_string(A.shape()) +
                         " x " + shape_string(B.shape()) + "^T");
  }
  Node n;
  n.op = Op::MatmulNT;
  n.inputs = {a.id, b.id};
  n.value = mat(A.rows(), B.rows());
  as_mat(n.value).noalias() = as_mat(A) * as_mat(B).transpose();
  n.requires_grad = any_requires({a, b});
  return push(std::move(n));
}

Var Graph::add(Var a, Var b) {
  const Tensor& A = VAL(a.id);
  const Tensor& B = VAL(b.id);
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw DimensionError("add: shapes differ: " + shape_string(A.shape()) + " vs " +
                         shape_string(B.shape()));
  }
  Node n;
  n.op = Op::Add;
  n.inputs = {a.id, b.id};
  n.value = mat(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) n.value[i] = A[i] + B[i];
  n.requires_grad = any_requires({a, b});
  return push(std::move(n));
}

Var Graph::mul(Var a, Var b) {
  const Tensor& A = VAL(a.id);
  const Tensor& B = VAL(b.id);
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    throw DimensionError("mul: shapes differ: " + shape_string(A.shape()) + " vs " +
                         shape_string(B.shape()));
  }
  Node n;
  n.op = Op::Mul;
  n.inputs = {a.id, b.id};
  n.value = mat(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.size(); ++i) n.value[i] = A[i] * B[i];
  n.requires_grad = any_requires({a, b});
  return push(std::move(n));
}

Var Graph::add_row(Var x, Var row) {
  const Tensor& X = VAL(x.id);
  const Tensor& R = VAL(row.id);
  if (R.size() != X.cols()) {
    throw DimensionError("add_row: row " + shape_string(R.shape()) + " does not match columns of " +
                         shape_string(X.shape()));
  }
  Node n;
  n.op = Op::AddRow;
  n.inputs = {x.id, row.id};
  n.value = mat(X.rows(), X.cols());
  const std::size_t c = X.cols();
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) n.value[i * c + j] = X[i * c + j] + R[j];
  n.requires_grad = any_requires({x, row});
  return push(std::move(n));
}

Var Graph::mul_row(Var x, Var row) {
  const Tensor& X = VAL(x.id);
  const Tensor& R = VAL(row.id);
  if (R.size() != X.cols()) {
    throw DimensionError("mul_row: row " + shape_string(R.shape()) + " does not match columns of " +
                         shape_string(X.shape()));
  }
  Node n;
  n.op = Op::MulRow;
  n.inputs = {x.id, row.id};
  n.value = mat(X.rows(), X.cols());
  const std::size_t c = X.cols();
  for (std::size_t i = 0; i < X.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) n.value[i * c + j] = X[i * c + j] * R[j];
  n.requires_grad = any_requires({x, row});
  return push(std::move(n));
}

Var Graph::scale(Var x, double s) {
  const Tensor& X = VAL(x.id);
  Node n;
  n.op = Op::Scale;
  n.inputs = {x.id};
  n.scalar = s;
  n.value = mat(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) n.value[i] = X[i] * s;
  n.requires_grad = any_requires({x});
  return push(std::move(n));
}

Var Graph::softmax_rows(Var x) {
  const Tensor& X = VAL(x.id);
  Node n;
  n.op = Op::SoftmaxRows;
  n.inputs = {x.id};
  n.value = mat(X.rows(), X.cols());
  const std::size_t c = X.cols();
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const double* in = X.data() + i * c;
    double* out = n.value.data() + i * c;
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[j] = std::exp(in[j] - mx));
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < c; ++j) out[j] *= inv;
  }
  n.requires_grad = any_requires({x});
  return push(std::move(n));
}

Var Graph::layernorm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = VAL(x.id);
  const Tensor& G = VAL(gamma.id);
  const Tensor& B = VAL(beta.id);
  const std::size_t c = X.cols();
  if (G.size() != c || B.size() != c) {
    throw DimensionError("layernorm: affine params " + shape_string(G.shape()) + "/" +
                         shape_string(B.shape()) + " do not match " + shape_string(X.shape()));
  }
  Node n;
  n.op = Op::LayerNorm;
  n.inputs = {x.id, gamma.id, beta.id};
  n.scalar = eps;
  n.value = mat(X.rows(), c);
  n.saved = mat(X.rows(), 2);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const double* in = X.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += in[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(c);
    const double rstd = 1.0 / std::sqrt(var + eps);
    n.saved(i, 0) = mean;
    n.saved(i, 1) = rstd;
    double* out = n.value.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) out[j] = (in[j] - mean) * rstd * G[j] + B[j];
  }
  n.requires_grad = any_requires({x, gamma, beta});
  return push(std::move(n));
}

Var Graph::gelu(Var x) {
  const Tensor& X = VAL(x.id);
  Node n;
  n.op = Op::Gelu;
  n.inputs = {x.id};
  n.value = mat(X.rows(), X.cols());
  n.requires_grad = any_requires({x});
  if (n.requires_grad) n.saved = mat(X.rows(), X.cols());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double v = X[i];
    const double t = std::tanh(kSqrt2OverPi * (v + kGeluC * v * v * v));
    n.value[i] = 0.5 * v * (1.0 + t);
    if (n.requires_grad) n.saved[i] = t;
  }
  return push(std::move(n));
}

Var Graph::slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& X = VAL(x.id);
  if (start + count > X.cols()) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_string(X.shape()));
  }
  Node n;
  n.op = Op::SliceCols;
  n.inputs = {x.id};
  n.offset = start;
  n.count = count;
  n.value = mat(X.rows(), count);
  for (std::size_t i = 0; i < X.rows(); ++i)
    std::copy_n(X.data() + i * X.cols() + start, count, n.value.data() + i * count);
  n.requires_grad = any_requires({x});
  return push(std::move(n));
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = VAL(parts[0].id).rows();
  std::size_t c = 0;
  Node n;
  n.op = Op::ConcatCols;
  for (Var p : parts) {
    const Tensor& P = VAL(p.id);
    if (P.rows() != r) {
      throw DimensionError("concat_cols: row counts differ: " + shape_string(P.shape()) + " vs " +
                           std::to_string(r) + " rows");
    }
    c += P.cols();
    n.inputs.push_back(p.id);
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.value = mat(r, c);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = VAL(p.id);
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(P.data() + i * P.cols(), P.cols(), n.value.data() + i * c + off);
    off += P.cols();
  }
  return push(std::move(n));
}

Var Graph::slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& X = VAL(x.id);
  if (start + count > X.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of " + shape_string(X.shape()));
  }
  Node n;
  n.op = Op::SliceRows;
  n.inputs = {x.id};
  n.offset = start;
  n.count = count;
  n.value = mat(count, X.cols());
  std::copy_n(X.data() + start * X.cols(), count * X.cols(), n.value.data());
  n.requires_grad = any_requires({x});
  return push(std::move(n));
}

Var Graph::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = VAL(parts[0].id).cols();
  std::size_t r = 0;
  Node n;
  n.op = Op::ConcatRows;
  for (Var p : parts) {
    const Tensor& P = VAL(p.id);
    if (P.cols() != c) {
      throw DimensionError("concat_rows: column counts differ: " + shape_string(P.shape()) +
                           " vs " + std::to_string(c) + " cols");
    }
    r += P.rows();
    n.inputs.push_back(p.id);
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.value = mat(r, c);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& P = VAL(p.id);
    std::copy_n(P.data(), P.size(), n.value.data() + off);
    off += P.size();
  }
  return push(std::move(n));
}

Var Graph::gather_rows(Var table, std::vector<std::size_t> rows) {
  const Tensor& T = VAL(table.id);
  const std::size_t c = T.cols();
  for (std::size_t r : rows) {
    if (r >= T.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(r) + " out of " +
                           shape_string(T.shape()));
    }
  }
  Node n;
  n.op = Op::GatherRows;
  n.inputs = {table.id};
  n.value = mat(rows.size(), c);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(T.data() + rows[i] * c, c, n.value.data() + i * c);
  n.indices = std::move(rows);
  n.requires_grad = any_requires({table});
  return push(std::move(n));
}

Var Graph::sum(Var x) {
  const Tensor& X = VAL(x.id);
  Node n;
  n.op = Op::Sum;
  n.inputs = {x.id};
  double s = 0.0;
  for (double v : X.values()) s += v;
  n.value = Tensor::scalar(s);
  n.requires_grad = any_requires({x});
  return push(std::move(n));
}

Var Graph::masked_cross_entropy(Var logits, std::size_t label, std::vector<std::uint8_t> masked) {
  const Tensor& Z = VAL(logits.id);
  const std::size_t c = Z.size();
  if (Z.rows() != 1) throw DimensionError("masked_cross_entropy: expects one logit row, got " +
                                          shape_string(Z.shape()));
  if (masked.empty()) masked.assign(c, 0);
  if (masked.size() != c) throw DimensionError("masked_cross_entropy: mask length mismatch");
  if (label >= c) throw ContractError("masked_cross_entropy: label out of range");
  if (masked[label]) throw ContractError("masked_cross_entropy: label is a masked class");

  Node n;
  n.op = Op::MaskedCrossEntropy;
  n.inputs = {logits.id};
  n.count = label;
  n.saved = mat(1, c);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < c; ++j) {
    const double z = masked[j] ? kMaskedLogit : Z[j];
    n.saved[j] = z;
    mx = std::max(mx, z);
  }
  double total = 0.0;
  for (std::size_t j = 0; j < c; ++j) total += (n.saved[j] = std::exp(n.saved[j] - mx));
  const double log_z = std::log(total) + mx;
  const double z_label = Z[label];
  for (std::size_t j = 0; j < c; ++j) n.saved[j] /= total;
  n.value = Tensor::scalar(log_z - z_label);
  n.flags = std::move(masked);
  n.requires_grad = any_requires({logits});
  return push(std::move(n));
}

Tensor& Graph::grad_buffer(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Tensor& v = VAL(id);
    n.grad = Tensor(v.shape());
  }
  return n.grad;
}

void Graph::backward(Var loss, bool accumulate_params) {
  const Tensor& L = VAL(loss.id);
  if (L.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_string(L.shape()));
  }
  trace_.clear();
  for (auto& n : nodes_) n.grad = Tensor();
  if (node(loss).requires_grad) grad_buffer(loss.id)[0] = 1.0;

  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    trace_.push_back(id);
    if (n.grad.empty()) continue;  // not on the path to the loss
    backprop_node(id);
  }

  if (!accumulate_params) return;
  for (auto& n : nodes_) {
    if (n.op != Op::Leaf || !n.requires_grad) continue;
    Parameter& p = *n.param;
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
    if (n.grad.empty()) continue;
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += n.grad[i];
  }
}

void Graph::backprop_node(std::uint32_t id) {
  // Copy out what we need: grad_buffer() may reallocate other nodes' grads
  // but never this node's, and nodes_ itself is never resized here.
  Node& n = nodes_[id];
  const Tensor& G = n.grad;
  auto needs = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };

  switch (n.op) {
    case Op::Constant:
    case Op::Leaf:
      break;

    case Op::Matmul: {
      const Tensor& A = VAL(n.inputs[0]);
      const Tensor& B = VAL(n.inputs[1]);
      if (needs(0)) as_mat(grad_buffer(n.inputs[0])).noalias() += as_mat(G) * as_mat(B).transpose();
      if (needs(1)) as_mat(grad_buffer(n.inputs[1])).noalias() += as_mat(A).transpose() * as_mat(G);
      break;
    }
    case Op::MatmulNT: {
      const Tensor& A = VAL(n.inputs[0]);
      const Tensor& B = VAL(n.inputs[1]);
      if (needs(0)) as_mat(grad_buffer(n.inputs[0])).noalias() += as_mat(G) * as_mat(B);
      if (needs(1)) as_mat(grad_buffer(n.inputs[1])).noalias() += as_mat(G).transpose() * as_mat(A);
      break;
    }
    case Op::Add: {
      for (std::size_t k = 0; k < 2; ++k) {
        if (!needs(k)) continue;
        Tensor& d = grad_buffer(n.inputs[k]);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
      }
      break;
    }
    case Op::Mul: {
      const Tensor& A = VAL(n.inputs[0]);
      const Tensor& B = VAL(n.inputs[1]);
      if (needs(0)) {
        Tensor& d = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * B[i];
      }
      if (needs(1)) {
        Tensor& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * A[i];
      }
      break;
    }
    case Op::AddRow: {
      const std::size_t c = G.cols();
      if (needs(0)) {
        Tensor& d = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i];
      }
      if (needs(1)) {
        Tensor& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) d[j] += G[i * c + j];
      }
      break;
    }
    case Op::MulRow: {
      const Tensor& X = VAL(n.inputs[0]);
      const Tensor& R = VAL(n.inputs[1]);
      const std::size_t c = G.cols();
      if (needs(0)) {
        Tensor& d = grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += G[i * c + j] * R[j];
      }
      if (needs(1)) {
        Tensor& d = grad_buffer(n.inputs[1]);
        for (std::size_t i = 0; i < G.rows(); ++i)
          for (std::size_t j = 0; j < c; ++j) d[j] += G[i * c + j] * X[i * c + j];
      }
      break;
    }
    case Op::Scale: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < G.size(); ++i) d[i] += G[i] * n.scalar;
      break;
    }
    case Op::SoftmaxRows: {
      Tensor& d = grad_buffer(n.inputs[0]);
      const Tensor& Y = n.value;
      const std::size_t c = Y.cols();
      for (std::size_t i = 0; i < Y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += G[i * c + j] * Y[i * c + j];
        for (std::size_t j = 0; j < c; ++j) d[i * c + j] += Y[i * c + j] * (G[i * c + j] - dot);
      }
      break;
    }
    case Op::LayerNorm: {
      const Tensor& X = VAL(n.inputs[0]);
      const Tensor& Gm = VAL(n.inputs[1]);
      const std::size_t c = X.cols();
      const double inv_c = 1.0 / static_cast<double>(c);
      Tensor* dx = needs(0) ? &grad_buffer(n.inputs[0]) : nullptr;
      Tensor* dg = needs(1) ? &grad_buffer(n.inputs[1]) : nullptr;
      Tensor* db = needs(2) ? &grad_buffer(n.inputs[2]) : nullptr;
      for (std::size_t i = 0; i < X.rows(); ++i) {
        const double mean = n.saved(i, 0);
        const double rstd = n.saved(i, 1);
        double sum_dxhat = 0.0;
        double sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double xhat = (X[i * c + j] - mean) * rstd;
          const double g = G[i * c + j];
          if (dg) (*dg)[j] += g * xhat;
          if (db) (*db)[j] += g;
          const double dxhat = g * Gm[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
        }
        if (!dx) continue;
        for (std::size_t j = 0; j < c; ++j) {
          const double xhat = (X[i * c + j] - mean) * rstd;
          const double dxhat = G[i * c + j] * Gm[j];
          (*dx)[i * c + j] += rstd * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
        }
      }
      break;
    }
    case Op::Gelu: {
      const Tensor& X = VAL(n.inputs[0]);
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < X.size(); ++i) {
        const double v = X[i];
        const double t = n.saved[i];
        const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluC * v * v);
        d[i] += G[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
      }
      break;
    }
    case Op::SliceCols: {
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t src_c = d.cols();
      for (std::size_t i = 0; i < G.rows(); ++i)
        for (std::size_t j = 0; j < n.count; ++j) d[i * src_c + n.offset + j] += G[i * n.count + j];
      break;
    }
    case Op::ConcatCols: {
      const std::size_t c = G.cols();
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t pc = VAL(n.inputs[k]).cols();
        if (needs(k)) {
          Tensor& d = grad_buffer(n.inputs[k]);
          for (std::size_t i = 0; i < G.rows(); ++i)
            for (std::size_t j = 0; j < pc; ++j) d[i * pc + j] += G[i * c + off + j];
        }
        off += pc;
      }
      break;
    }
    case Op::SliceRows: {
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t base = n.offset * G.cols();
      for (std::size_t i = 0; i < G.size(); ++i) d[base + i] += G[i];
      break;
    }
    case Op::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t len = VAL(n.inputs[k]).size();
        if (needs(k)) {
          Tensor& d = grad_buffer(n.inputs[k]);
          for (std::size_t i = 0; i < len; ++i) d[i] += G[off + i];
        }
        off += len;
      }
      break;
    }
    case Op::GatherRows: {
      Tensor& d = grad_buffer(n.inputs[0]);
      const std::size_t c = G.cols();
      for (std::size_t i = 0; i < n.indices.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) d[n.indices[i] * c + j] += G[i * c + j];
      break;
    }
    case Op::Sum: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += G[0];
      break;
    }
    case Op::MaskedCrossEntropy: {
      Tensor& d = grad_buffer(n.inputs[0]);
      for (std::size_t j = 0; j < d.size(); ++j) {
        if (n.flags[j]) continue;
        const double target = j == n.count ? 1.0 : 0.0;
        d[j] += G[0] * (n.saved[j] - target);
      }
      break;
    }
  }
}

const Tensor& Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.param ? n.param->value : n.value;
}

#undef VAL

}  // namespace emask::nk
