#pragma once

#include <array>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "mkdt/tensor.hpp"

namespace mkdt {

/// Gradients produced by one backward pass, keyed by leaf node id.
/// Every requested leaf is present; each gradient has the leaf's shape.
class GradientMap {
 public:
  const Tensor& at(const Tensor& leaf) const;
  bool contains(const Tensor& leaf) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Graph;
  const void* graph_tag_ = nullptr;  // guards against mixing maps across graphs
  std::unordered_map<int, Tensor> grads_;
};

/// Append-only tape of tensor operations. Parents always precede children,
/// so one reverse sweep over the node list is a reverse topological order.
///
/// A Graph is single-threaded; distinct graphs on distinct threads are safe.
/// backward() consumes the graph: node storage is released and any further
/// recording on it throws. Each training step rebuilds its own graph.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a differentiation leaf holding a copy of `t`'s value.
  Tensor input(const Tensor& t);

  /// Registers a non-differentiated value (gradients never flow into it).
  Tensor constant(const Tensor& t);

  /// Reverse-mode gradients of a scalar output with respect to `leaves`.
  /// Throws if the output is not scalar-valued, a leaf was not created by
  /// input() on this graph, or the graph was already consumed.
  GradientMap backward(const Tensor& output, std::span<const Tensor> leaves);
  GradientMap backward(const Tensor& output, std::initializer_list<Tensor> leaves);

  std::size_t node_count() const { return nodes_.size(); }
  bool spent() const { return spent_; }

  /// Tape opcode. Public so the op free functions can name it; user code has
  /// no reason to touch it.
  enum class Op {
    kLeaf,
    kConstant,
    kMatmul,
    kTranspose,
    kAdd,
    kSub,
    kScalarMul,   // by a plain double
    kScale,       // by a tracked one-entry tensor
    kMul,         // elementwise
    kTanh,
    kRelu,
    kSqrt,
    kReciprocal,
    kSum,
    kMean,
    kSqNorm,
    kTrace,
    kReshape,
    kSliceRows,
    kGatherRows,
    kConcatRows,
  };

 private:
  friend struct OpAccess;

  struct Node {
    Op op;
    std::vector<int> parents;
    Shape shape;
    std::vector<double> value;
    double scalar = 0.0;                // kScalarMul factor
    std::vector<std::size_t> indices;   // kSliceRows {begin,end}; kGatherRows rows
    bool needs_grad = false;
  };

  int add_node(Node n);
  const Node& node(int id) const { return nodes_[id]; }
  Tensor handle(int id) const;
  void check_live(const char* what) const;

  std::vector<Node> nodes_;
  bool spent_ = false;
};

// ---------------------------------------------------------------------------
// Forward operations.
//
// Each op computes the mathematical result; when an operand is tracked the op
// is recorded on that operand's graph and the result is tracked too. Mixing
// operands from two different graphs throws. Shape mismatches throw with the
// op name and both shapes.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scalar_mul(double c, const Tensor& a);
/// Product of a one-entry tensor (which may be tracked) with every entry of `a`.
Tensor scale(const Tensor& s, const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor tanh_op(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sqrt_op(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum of squared entries (squared Frobenius norm for matrices).
Tensor squared_frobenius_norm(const Tensor& a);
Tensor trace(const Tensor& a);
Tensor reshape(const Tensor& a, Shape s);
/// Rows [begin, end) of a rank>=1 tensor.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Arbitrary rows in the given order; duplicates allowed (gradients add up).
Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows);
/// Stack along the first axis; trailing extents must agree.
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_rows(std::initializer_list<Tensor> parts);

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

/// Builds a tracked scalar from a tracked leaf; used by finite_diff_check and
/// by tests that drive backward() on ad-hoc expressions.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

struct FiniteDiffReport {
  double max_rel_dev = 0.0;  // relative to the larger gradient's max magnitude
  double max_abs_dev = 0.0;
  std::size_t worst_index = 0;
  double tolerance = 0.0;
  bool passed = true;
  Tensor autodiff_grad;
  Tensor numeric_grad;
};

/// Compares the autodiff gradient of `fn` at `point` against central finite
/// differences with step `h`. Reports divergence, never throws on it.
FiniteDiffReport finite_diff_check(const ScalarFn& fn, const Tensor& point, double h, double tolerance);

/// Value of `fn` at `point` without keeping any graph.
double eval_scalar(const ScalarFn& fn, const Tensor& point);

}  // namespace mkdt
