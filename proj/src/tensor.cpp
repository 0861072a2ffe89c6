#include "mkdt/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace mkdt {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  }
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(Shape s) {
  std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape s, double v) {
  std::size_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(n, v));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::logic_error("Tensor::rows: rank-2 tensor required, got " + shape_str(shape));
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::logic_error("Tensor::cols: rank-2 tensor required, got " + shape_str(shape));
  return shape[1];
}

double Tensor::item() const {
  if (size() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(size()) + " entries");
  return data[0];
}

double& Tensor::at(std::size_t i, std::size_t j) {
  if (rank() != 2) throw std::logic_error("Tensor::at: rank-2 tensor required");
  return data[i * shape[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw std::logic_error("Tensor::at: rank-2 tensor required");
  return data[i * shape[1] + j];
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool tensors_equal(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("max_abs_diff: shape mismatch (" + shape_str(a.shape) + " vs " + shape_str(b.shape) +
                                ")");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace mkdt
