#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ehtune/tensor.hpp"

namespace ehtune::nc {

class Graph;

// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  bool valid() const noexcept { return graph != nullptr && id >= 0; }
  const Shape& shape() const;
  std::span<const float> value() const;
  bool requires_grad() const;
  int rows() const { return shape().at(0); }
  int cols() const { return shape().at(1); }
};

// Define-by-run tape. Nodes are appended in creation order, so every input
// precedes its consumers; backward() walks the tape once in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Constant input (copied). Never receives a gradient.
  Var constant(const Tensor& t);
  Var constant(Shape shape, std::vector<float> values);

  // Leaf bound to an external tensor. The tensor must outlive the graph and
  // must not be modified until backward() has run. When `trainable`, its
  // gradient is accumulated into `t.grad` by backward().
  Var param(Tensor& t, bool trainable);
  // Frozen leaf bound to an external tensor.
  Var param(const Tensor& t);

  // Appends an op node. `inputs` decide whether the node needs a gradient.
  Var make(Shape shape, std::vector<float> value, std::initializer_list<Var> inputs,
           BackwardFn backward);

  const Shape& shape(int id) const { return nodes_.at(static_cast<std::size_t>(id)).shape; }
  std::span<const float> value(int id) const;
  bool requires_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).requires_grad; }

  // Gradient buffer of a node, allocated (zeroed) on first access.
  std::span<float> grad(int id);
  // Gradient if already allocated, else empty.
  std::span<const float> grad_if_any(int id) const;

  // Reverse pass from a scalar node. Populates `grad` on every trainable leaf.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<float> value;
    Tensor* leaf = nullptr;
    std::vector<float> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- ops -----------------------------------------------------------------
// Every op reads its inputs' values and writes a fresh output buffer.

Var matmul(Var a, Var b);                          // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);                       // [m,k] x [n,k]^T
Var linear(Var x, Var weight, std::optional<Var> bias);  // x W^T + b, W is [out,in]
Var add(Var a, Var b);
Var add_rowvec(Var a, Var v);                      // [m,n] + [n]
Var mul(Var a, Var b);
Var scale(Var a, float s);
Var sum(Var a);
Var gelu(Var a);
Var tanh(Var a);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias);         // over the last axis, eps = 1e-5
Var embedding(Var table, std::span<const int> ids);
Var gather_rows(Var x, std::span<const int> rows);

// Multi-head scaled dot-product attention over `batch` sequences of `seq`
// tokens. q, k, v are [batch*seq, d]. Optional prefix keys/values [L, d] are
// shared across the batch and prepended to every sequence's keys/values.
Var attention(Var q, Var k, Var v, std::optional<Var> prefix_k, std::optional<Var> prefix_v,
              int batch, int seq, int heads);

Var cross_entropy(Var logits, std::span<const int> labels);  // mean over rows
Var mse(Var pred, std::span<const float> targets);           // pred [b,1]

inline constexpr float kLayerNormEps = 1e-5f;

// tanh-approximate GELU:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
float gelu_scalar(float x);

}  // namespace ehtune::nc
