#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ehtune::nc {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 array. `grad` is empty until a backward pass (or
// the optimizer) allocates it; when present it has the same length as `data`.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<float> values);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, float value);

  std::size_t size() const noexcept { return data.size(); }
  int rank() const noexcept { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  bool has_grad() const noexcept { return !grad.empty(); }

  // Allocates the gradient buffer if needed and fills it with zeros.
  void zero_grad();

  std::span<const float> values() const noexcept { return data; }
};

// Bitwise comparison of shape and data (grad ignored).
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace ehtune::nc
