#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mkdt {

class Graph;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool shapes_equal(const Shape& a, const Shape& b);

/// Dense row-major tensor of 64-bit reals. Rank 0 is a scalar, rank 1 a
/// vector, rank 2 a matrix. A tensor optionally carries a handle into an
/// autodiff Graph; ops on tracked tensors are recorded on that graph.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  Graph* graph = nullptr;  // non-owning; set while tracked
  int node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d);

  static Tensor scalar(double v);
  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor identity(std::size_t n);
  static Tensor ones(Shape s) { return full(std::move(s), 1.0); }

  bool tracked() const { return graph != nullptr && node >= 0; }
  Tensor detached() const;

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double item() const;
  double& at(std::size_t i, std::size_t j);
  double at(std::size_t i, std::size_t j) const;

  /// True when every entry is finite.
  bool all_finite() const;
};

/// Exact equality of shape and data (graph handles ignored).
bool tensors_equal(const Tensor& a, const Tensor& b);

/// Largest absolute entry-wise difference; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mkdt
