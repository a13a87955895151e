#include "ehtune/tensor.hpp"

#include <cstring>
#include <sstream>

#include "ehtune/error.hpp"

namespace ehtune {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Index: return "index error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Training: return "training error";
    case ErrorKind::Checkpoint: return "checkpoint error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

namespace nc {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) fail(ErrorKind::Shape, "non-positive dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (numel(shape) != data.size()) {
    fail(ErrorKind::Shape, "tensor of shape " + shape_str(shape) + " given " +
                               std::to_string(data.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0f); }

Tensor Tensor::full(Shape s, float value) {
  std::size_t n = numel(s);
  return Tensor(std::move(s), std::vector<float>(n, value));
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0f); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape || a.data.size() != b.data.size()) return false;
  return a.data.empty() ||
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace nc
}  // namespace ehtune
