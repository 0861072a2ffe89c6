#include "mkdt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace mkdt {

namespace {

[[noreturn]] void fail_shapes(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape) +
                              " and " + shape_str(b.shape));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank-" + std::to_string(rank) +
                                " tensor, got shape " + shape_str(a.shape));
  }
}

std::size_t row_width(const Shape& s) {
  std::size_t w = 1;
  for (std::size_t i = 1; i < s.size(); ++i) w *= s[i];
  return w;
}

// c (m x n) = a (m x k) * b (k x n); c must be zero-filled.
void matmul_into(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const double aik = a[i * k + l];
      if (aik == 0.0) continue;
      const double* brow = b + l * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

Tensor raw_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  matmul_into(a.data.data(), b.data.data(), out.data.data(), m, k, n);
  return out;
}

Tensor raw_transpose(const Tensor& a) {
  const std::size_t m = a.shape[0], n = a.shape[1];
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j * m + i] = a.data[i * n + j];
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// GradientMap
// ---------------------------------------------------------------------------

const Tensor& GradientMap::at(const Tensor& leaf) const {
  if (leaf.graph != graph_tag_) {
    throw std::logic_error("gradient map: tensor belongs to a different graph");
  }
  auto it = grads_.find(leaf.node);
  if (it == grads_.end()) {
    throw std::out_of_range(
        "gradient map: no entry for this tensor (was it listed as a leaf in backward()?)");
  }
  return it->second;
}

bool GradientMap::contains(const Tensor& leaf) const {
  return leaf.graph == graph_tag_ && grads_.count(leaf.node) > 0;
}

// ---------------------------------------------------------------------------
// Graph plumbing
// ---------------------------------------------------------------------------

void Graph::check_live(const char* what) const {
  if (spent_) {
    throw std::logic_error(std::string(what) +
                           ": graph was already consumed by backward(); build a fresh graph");
  }
}

int Graph::add_node(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Graph::handle(int id) const {
  Tensor t(nodes_[id].shape, nodes_[id].value);
  t.graph = const_cast<Graph*>(this);
  t.node = id;
  return t;
}

Tensor Graph::input(const Tensor& t) {
  check_live("input");
  Node n;
  n.op = Op::kLeaf;
  n.shape = t.shape;
  n.value = t.data;
  n.needs_grad = true;
  return handle(add_node(std::move(n)));
}

Tensor Graph::constant(const Tensor& t) {
  check_live("constant");
  Node n;
  n.op = Op::kConstant;
  n.shape = t.shape;
  n.value = t.data;
  n.needs_grad = false;
  return handle(add_node(std::move(n)));
}

// Shared helpers for the free-function ops. Kept out of the public header.
struct OpAccess {
  // The single graph the operands belong to, or nullptr if none is tracked.
  static Graph* common_graph(std::initializer_list<const Tensor*> ts) {
    Graph* g = nullptr;
    for (const Tensor* t : ts) {
      if (t->graph == nullptr) continue;
      if (g == nullptr) {
        g = t->graph;
      } else if (g != t->graph) {
        throw std::logic_error("op: operands belong to two different graphs");
      }
    }
    return g;
  }

  static int ensure_node(Graph& g, const Tensor& t) {
    if (t.graph == &g) return t.node;
    Graph::Node n;
    n.op = Graph::Op::kConstant;
    n.shape = t.shape;
    n.value = t.data;
    n.needs_grad = false;
    return g.add_node(std::move(n));
  }

  static Tensor record(Graph& g, Graph::Op op, std::initializer_list<const Tensor*> parents,
                       Tensor value, double scalar = 0.0, std::vector<std::size_t> indices = {}) {
    g.check_live("op");
    Graph::Node n;
    n.op = op;
    n.parents.reserve(parents.size());
    for (const Tensor* p : parents) n.parents.push_back(ensure_node(g, *p));
    n.shape = value.shape;
    n.value = std::move(value.data);
    n.scalar = scalar;
    n.indices = std::move(indices);
    for (int p : n.parents) {
      if (g.nodes_[p].needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
    return g.handle(g.add_node(std::move(n)));
  }

  static Tensor record_many(Graph& g, Graph::Op op, const std::vector<const Tensor*>& parents,
                            Tensor value) {
    g.check_live("op");
    Graph::Node n;
    n.op = op;
    n.parents.reserve(parents.size());
    for (const Tensor* p : parents) n.parents.push_back(ensure_node(g, *p));
    n.shape = value.shape;
    n.value = std::move(value.data);
    for (int p : n.parents) {
      if (g.nodes_[p].needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
    return g.handle(g.add_node(std::move(n)));
  }
};

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradientMap Graph::backward(const Tensor& output, std::span<const Tensor> leaves) {
  check_live("backward");
  if (output.graph != this) {
    throw std::logic_error("backward: output tensor is not tracked on this graph");
  }
  if (output.size() != 1) {
    throw std::invalid_argument("backward: output must hold a single value, got shape " +
                                shape_str(output.shape));
  }
  for (const Tensor& leaf : leaves) {
    if (leaf.graph != this || nodes_[leaf.node].op != Op::kLeaf) {
      throw std::logic_error("backward: leaf tensor was not created by input() on this graph");
    }
  }

  // One gradient buffer per node, allocated lazily; empty() means untouched.
  std::vector<std::vector<double>> grad(nodes_.size());
  auto buf = [&](int id) -> std::vector<double>& {
    if (grad[id].empty()) grad[id].assign(shape_numel(nodes_[id].shape), 0.0);
    return grad[id];
  };

  buf(output.node)[0] = 1.0;

  for (int id = output.node; id >= 0; --id) {
    const Node& nd = nodes_[id];
    if (grad[id].empty() || !nd.needs_grad) continue;
    const std::vector<double>& d = grad[id];
    const auto wants = [&](std::size_t slot) { return nodes_[nd.parents[slot]].needs_grad; };

    switch (nd.op) {
      case Op::kLeaf:
      case Op::kConstant:
        break;

      case Op::kMatmul: {
        const Node& a = nodes_[nd.parents[0]];
        const Node& b = nodes_[nd.parents[1]];
        const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
        if (wants(0)) {  // dA += dC * B^T
          std::vector<double>& da = buf(nd.parents[0]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double dij = d[i * n + j];
              if (dij == 0.0) continue;
              for (std::size_t l = 0; l < k; ++l) da[i * k + l] += dij * b.value[l * n + j];
            }
        }
        if (wants(1)) {  // dB += A^T * dC
          std::vector<double>& db = buf(nd.parents[1]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              const double ail = a.value[i * k + l];
              if (ail == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) db[l * n + j] += ail * d[i * n + j];
            }
        }
        break;
      }

      case Op::kTranspose: {
        if (!wants(0)) break;
        const std::size_t n = nd.shape[0], m = nd.shape[1];  // this node is n x m
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) da[j * n + i] += d[i * m + j];
        break;
      }

      case Op::kAdd: {
        if (wants(0)) {
          std::vector<double>& da = buf(nd.parents[0]);
          for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
        }
        if (wants(1)) {
          std::vector<double>& db = buf(nd.parents[1]);
          for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i];
        }
        break;
      }

      case Op::kSub: {
        if (wants(0)) {
          std::vector<double>& da = buf(nd.parents[0]);
          for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
        }
        if (wants(1)) {
          std::vector<double>& db = buf(nd.parents[1]);
          for (std::size_t i = 0; i < d.size(); ++i) db[i] -= d[i];
        }
        break;
      }

      case Op::kScalarMul: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += nd.scalar * d[i];
        break;
      }

      case Op::kScale: {
        const Node& s = nodes_[nd.parents[0]];
        const Node& a = nodes_[nd.parents[1]];
        if (wants(1)) {
          std::vector<double>& da = buf(nd.parents[1]);
          for (std::size_t i = 0; i < d.size(); ++i) da[i] += s.value[0] * d[i];
        }
        if (wants(0)) {
          double acc = 0.0;
          for (std::size_t i = 0; i < d.size(); ++i) acc += d[i] * a.value[i];
          buf(nd.parents[0])[0] += acc;
        }
        break;
      }

      case Op::kMul: {
        const Node& a = nodes_[nd.parents[0]];
        const Node& b = nodes_[nd.parents[1]];
        if (wants(0)) {
          std::vector<double>& da = buf(nd.parents[0]);
          for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * b.value[i];
        }
        if (wants(1)) {
          std::vector<double>& db = buf(nd.parents[1]);
          for (std::size_t i = 0; i < d.size(); ++i) db[i] += d[i] * a.value[i];
        }
        break;
      }

      case Op::kTanh: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * (1.0 - nd.value[i] * nd.value[i]);
        break;
      }

      case Op::kRelu: {
        if (!wants(0)) break;
        const Node& a = nodes_[nd.parents[0]];
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i)
          if (a.value[i] > 0.0) da[i] += d[i];
        break;
      }

      case Op::kSqrt: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i] * 0.5 / nd.value[i];
        break;
      }

      case Op::kReciprocal: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i) da[i] -= d[i] * nd.value[i] * nd.value[i];
        break;
      }

      case Op::kSum: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        for (double& v : da) v += d[0];
        break;
      }

      case Op::kMean: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        const double w = d[0] / static_cast<double>(da.size());
        for (double& v : da) v += w;
        break;
      }

      case Op::kSqNorm: {
        if (!wants(0)) break;
        const Node& a = nodes_[nd.parents[0]];
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += 2.0 * d[0] * a.value[i];
        break;
      }

      case Op::kTrace: {
        if (!wants(0)) break;
        const Node& a = nodes_[nd.parents[0]];
        const std::size_t n = a.shape[0];
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < n; ++i) da[i * n + i] += d[0];
        break;
      }

      case Op::kReshape: {
        if (!wants(0)) break;
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i) da[i] += d[i];
        break;
      }

      case Op::kSliceRows: {
        if (!wants(0)) break;
        const Node& a = nodes_[nd.parents[0]];
        const std::size_t w = row_width(a.shape);
        const std::size_t off = nd.indices[0] * w;
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t i = 0; i < d.size(); ++i) da[off + i] += d[i];
        break;
      }

      case Op::kGatherRows: {
        if (!wants(0)) break;
        const Node& a = nodes_[nd.parents[0]];
        const std::size_t w = row_width(a.shape);
        std::vector<double>& da = buf(nd.parents[0]);
        for (std::size_t r = 0; r < nd.indices.size(); ++r) {
          const std::size_t src = r * w, dst = nd.indices[r] * w;
          for (std::size_t j = 0; j < w; ++j) da[dst + j] += d[src + j];
        }
        break;
      }

      case Op::kConcatRows: {
        const std::size_t w = row_width(nd.shape);
        std::size_t off = 0;
        for (std::size_t slot = 0; slot < nd.parents.size(); ++slot) {
          const Node& p = nodes_[nd.parents[slot]];
          const std::size_t block = p.shape[0] * w;
          if (wants(slot)) {
            std::vector<double>& dp = buf(nd.parents[slot]);
            for (std::size_t i = 0; i < block; ++i) dp[i] += d[off + i];
          }
          off += block;
        }
        break;
      }
    }
  }

  GradientMap out;
  out.graph_tag_ = this;
  for (const Tensor& leaf : leaves) {
    const int id = leaf.node;
    Tensor g = grad[id].empty() ? Tensor::zeros(nodes_[id].shape)
                                : Tensor(nodes_[id].shape, std::move(grad[id]));
    out.grads_.emplace(id, std::move(g));
  }

  spent_ = true;
  nodes_.clear();
  nodes_.shrink_to_fit();
  return out;
}

GradientMap Graph::backward(const Tensor& output, std::initializer_list<Tensor> leaves) {
  return backward(output, std::span<const Tensor>(leaves.begin(), leaves.size()));
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape[1] != b.shape[0]) fail_shapes("matmul", a, b);
  Tensor out = raw_matmul(a, b);
  Graph* g = OpAccess::common_graph({&a, &b});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kMatmul, {&a, &b}, std::move(out));
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  Tensor out = raw_transpose(a);
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kTranspose, {&a}, std::move(out));
}

namespace {
Tensor elementwise_pair(const char* name, Graph::Op op, const Tensor& a, const Tensor& b,
                        double (*f)(double, double)) {
  if (!shapes_equal(a.shape, b.shape)) fail_shapes(name, a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
  Graph* g = OpAccess::common_graph({&a, &b});
  if (!g) return out;
  return OpAccess::record(*g, op, {&a, &b}, std::move(out));
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_pair("add", Graph::Op::kAdd, a, b, [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_pair("sub", Graph::Op::kSub, a, b, [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_pair("mul", Graph::Op::kMul, a, b, [](double x, double y) { return x * y; });
}

Tensor scalar_mul(double c, const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = c * a.data[i];
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kScalarMul, {&a}, std::move(out), c);
}

Tensor scale(const Tensor& s, const Tensor& a) {
  if (s.size() != 1) {
    throw std::invalid_argument("scale: scaling tensor must hold a single value, got shape " +
                                shape_str(s.shape));
  }
  Tensor out = Tensor::zeros(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = s.data[0] * a.data[i];
  Graph* g = OpAccess::common_graph({&s, &a});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kScale, {&s, &a}, std::move(out));
}

namespace {
Tensor elementwise_unary(Graph::Op op, const Tensor& a, double (*f)(double)) {
  Tensor out = Tensor::zeros(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i]);
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, op, {&a}, std::move(out));
}
}  // namespace

Tensor tanh_op(const Tensor& a) {
  return elementwise_unary(Graph::Op::kTanh, a, [](double x) { return std::tanh(x); });
}

Tensor relu(const Tensor& a) {
  return elementwise_unary(Graph::Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor sqrt_op(const Tensor& a) {
  for (double v : a.data) {
    if (v < 0.0) {
      throw std::domain_error("sqrt: negative entry " + std::to_string(v));
    }
  }
  return elementwise_unary(Graph::Op::kSqrt, a, [](double x) { return std::sqrt(x); });
}

Tensor reciprocal(const Tensor& a) {
  return elementwise_unary(Graph::Op::kReciprocal, a, [](double x) { return 1.0 / x; });
}

namespace {
Tensor reduce_all(Graph::Op op, const Tensor& a, double value) {
  Tensor out = Tensor::scalar(value);
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, op, {&a}, std::move(out));
}
}  // namespace

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return reduce_all(Graph::Op::kSum, a, acc);
}

Tensor mean(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return reduce_all(Graph::Op::kMean, a, acc / static_cast<double>(a.size()));
}

Tensor squared_frobenius_norm(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v * v;
  return reduce_all(Graph::Op::kSqNorm, a, acc);
}

Tensor trace(const Tensor& a) {
  require_rank("trace", a, 2);
  if (a.shape[0] != a.shape[1]) {
    throw std::invalid_argument("trace: matrix must be square, got shape " + shape_str(a.shape));
  }
  double acc = 0.0;
  const std::size_t n = a.shape[0];
  for (std::size_t i = 0; i < n; ++i) acc += a.data[i * n + i];
  return reduce_all(Graph::Op::kTrace, a, acc);
}

Tensor reshape(const Tensor& a, Shape s) {
  if (shape_numel(s) != a.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape) + " as " +
                                shape_str(s) + " (entry counts differ)");
  }
  Tensor out(s, a.data);
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kReshape, {&a}, std::move(out));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0) {
    throw std::invalid_argument("slice_rows: cannot slice a rank-0 tensor");
  }
  if (begin >= end || end > a.shape[0]) {
    throw std::invalid_argument("slice_rows: bad row range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for shape " + shape_str(a.shape));
  }
  const std::size_t w = row_width(a.shape);
  Shape s = a.shape;
  s[0] = end - begin;
  Tensor out = Tensor::zeros(s);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.data[begin * w + i];
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kSliceRows, {&a}, std::move(out), 0.0, {begin, end});
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  if (a.rank() == 0) {
    throw std::invalid_argument("gather_rows: cannot index a rank-0 tensor");
  }
  if (rows.empty()) {
    throw std::invalid_argument("gather_rows: empty row list");
  }
  for (std::size_t r : rows) {
    if (r >= a.shape[0]) {
      throw std::out_of_range("gather_rows: row " + std::to_string(r) + " out of range for shape " +
                              shape_str(a.shape));
    }
  }
  const std::size_t w = row_width(a.shape);
  Shape s = a.shape;
  s[0] = rows.size();
  Tensor out = Tensor::zeros(s);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t j = 0; j < w; ++j) out.data[r * w + j] = a.data[rows[r] * w + j];
  Graph* g = OpAccess::common_graph({&a});
  if (!g) return out;
  return OpAccess::record(*g, Graph::Op::kGatherRows, {&a}, std::move(out), 0.0, rows);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) {
    throw std::invalid_argument("concat_rows: no tensors given");
  }
  const Shape& head = parts[0].shape;
  if (head.empty()) {
    throw std::invalid_argument("concat_rows: cannot stack rank-0 tensors");
  }
  std::size_t total_rows = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != head.size() ||
        !std::equal(head.begin() + 1, head.end(), p.shape.begin() + 1)) {
      fail_shapes("concat_rows", parts[0], p);
    }
    total_rows += p.shape[0];
  }
  Shape s = head;
  s[0] = total_rows;
  Tensor out = Tensor::zeros(s);
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i) out.data[off + i] = p.data[i];
    off += p.size();
  }
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  Graph* g = nullptr;
  for (const Tensor& p : parts) {
    ptrs.push_back(&p);
    if (p.graph != nullptr) {
      if (g != nullptr && g != p.graph) {
        throw std::logic_error("concat_rows: operands belong to two different graphs");
      }
      g = p.graph;
    }
  }
  if (!g) return out;
  return OpAccess::record_many(*g, Graph::Op::kConcatRows, ptrs, std::move(out));
}

Tensor concat_rows(std::initializer_list<Tensor> parts) {
  return concat_rows(std::span<const Tensor>(parts.begin(), parts.size()));
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

double eval_scalar(const ScalarFn& fn, const Tensor& point) {
  Graph g;
  Tensor x = g.input(point);
  Tensor y = fn(g, x);
  if (y.size() != 1) {
    throw std::invalid_argument("eval_scalar: function result must hold a single value, got shape " +
                                shape_str(y.shape));
  }
  return y.item();
}

FiniteDiffReport finite_diff_check(const ScalarFn& fn, const Tensor& point, double h,
                                   double tolerance) {
  FiniteDiffReport report;
  report.tolerance = tolerance;

  {
    Graph g;
    Tensor x = g.input(point);
    Tensor y = fn(g, x);
    if (y.size() != 1) {
      throw std::invalid_argument(
          "finite_diff_check: function result must hold a single value, got shape " +
          shape_str(y.shape));
    }
    GradientMap grads = g.backward(y, {x});
    report.autodiff_grad = grads.at(x);
  }

  report.numeric_grad = Tensor::zeros(point.shape);
  Tensor probe = point.detached();
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe.data[i] = point.data[i] + h;
    const double fp = eval_scalar(fn, probe);
    probe.data[i] = point.data[i] - h;
    const double fm = eval_scalar(fn, probe);
    probe.data[i] = point.data[i];
    report.numeric_grad.data[i] = (fp - fm) / (2.0 * h);
  }

  double ref = 1e-12;
  for (double v : report.autodiff_grad.data) ref = std::max(ref, std::abs(v));
  for (double v : report.numeric_grad.data) ref = std::max(ref, std::abs(v));
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double dev = std::abs(report.autodiff_grad.data[i] - report.numeric_grad.data[i]);
    if (dev > report.max_abs_dev) {
      report.max_abs_dev = dev;
      report.worst_index = i;
    }
  }
  report.max_rel_dev = report.max_abs_dev / ref;
  report.passed = report.max_rel_dev <= tolerance;
  return report;
}

}  // namespace mkdt
