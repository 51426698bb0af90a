#pragma once

// Tape-based reverse-mode differentiation over dense 2-D tensors.
//
// A Graph is built fresh for each forward pass. Nodes are appended in
// evaluation order, so the node vector is already a topological order and
// backward() simply walks it in reverse.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emask/tensor.hpp"

namespace emask::nk {

enum class ParamKind : std::uint8_t { Backbone, Ssf, Head };

/// A named trainable leaf. The value lives here across graphs; grads
/// accumulate here from every backward() until zero_grad().
struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::Backbone;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad();
  std::size_t size() const noexcept { return value.size(); }
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const noexcept { return id != UINT32_MAX; }
};

enum class Op : std::uint8_t {
  Constant,
  Leaf,
  Matmul,
  MatmulNT,
  Add,
  Mul,
  AddRow,
  MulRow,
  Scale,
  SoftmaxRows,
  LayerNorm,
  Gelu,
  SliceCols,
  ConcatCols,
  SliceRows,
  ConcatRows,
  GatherRows,
  Sum,
  MaskedCrossEntropy,
};

const char* op_name(Op op) noexcept;

struct Node {
  Op op = Op::Constant;
  std::vector<std::uint32_t> inputs;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  Parameter* param = nullptr;

  // Op attributes.
  std::size_t offset = 0;
  std::size_t count = 0;
  double scalar = 0.0;
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> flags;
  Tensor saved;  // layernorm: [mean, rstd] per row; gelu: tanh term; cross-entropy: probabilities
};

class Graph {
 public:
  /// When set, every parameter leaf is treated as requiring a gradient
  /// regardless of Parameter::trainable. Used for input-gradient analyses.
  explicit Graph(bool grad_through_frozen = false) : grad_all_(grad_through_frozen) {}

  Var constant(Tensor t);
  Var param(Parameter& p);

  Var matmul(Var a, Var b);
  /// a * b^T
  Var matmul_nt(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  /// x + row, row broadcast over every row of x.
  Var add_row(Var x, Var row);
  /// x * row (elementwise per column), row broadcast over every row of x.
  Var mul_row(Var x, Var row);
  Var scale(Var x, double s);
  Var softmax_rows(Var x);
  Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var gelu(Var x);
  Var slice_cols(Var x, std::size_t start, std::size_t count);
  Var concat_cols(std::span<const Var> parts);
  Var slice_rows(Var x, std::size_t start, std::size_t count);
  Var concat_rows(std::span<const Var> parts);
  Var gather_rows(Var table, std::vector<std::size_t> rows);
  Var sum(Var x);
  /// Cross-entropy of a single logit row against `label`. Columns with
  /// masked[c] != 0 are replaced by -1e9 before the log-softmax and receive
  /// exactly zero gradient.
  Var masked_cross_entropy(Var logits, std::size_t label, std::vector<std::uint8_t> masked);

  /// Reverse pass from a scalar node. Leaf gradients are accumulated into
  /// their Parameter::grad; leaves not on the path receive zeros. With
  /// `accumulate_params` false only node gradients are computed.
  void backward(Var loss, bool accumulate_params = true);

  const Tensor& value(Var v) const;
  /// Empty tensor when the node did not require a gradient.
  const Tensor& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  std::size_t size() const noexcept { return nodes_.size(); }
  std::span<const Node> nodes() const noexcept { return nodes_; }
  /// Node ids in the order the last backward() visited them.
  const std::vector<std::uint32_t>& backward_trace() const noexcept { return trace_; }

 private:
  Var push(Node n);
  Node& node(Var v) { return nodes_.at(v.id); }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  bool any_requires(std::initializer_list<Var> vs) const;
  void backprop_node(std::uint32_t id);
  Tensor& grad_buffer(std::uint32_t id);

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> trace_;
  bool grad_all_ = false;
};

}  // namespace emask::nk
