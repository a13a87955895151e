#include "ehtune/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "ehtune/error.hpp"

namespace ehtune::nc {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap cmap(std::span<const float> s, int rows, int cols) { return ConstMap(s.data(), rows, cols); }
MutMap mmap(std::span<float> s, int rows, int cols) { return MutMap(s.data(), rows, cols); }
Eigen::Map<const Eigen::RowVectorXf> rowvec(std::span<const float> s) {
  return Eigen::Map<const Eigen::RowVectorXf>(s.data(), static_cast<Eigen::Index>(s.size()));
}

// dst[j] += sum_i src[i, j], summed in row order.
void add_column_sums(std::span<float> dst, std::span<const float> src, int rows, int cols) {
  auto acc = mmap(dst, 1, cols);
  for (int r = 0; r < rows; ++r) {
    acc += cmap(src.subspan(static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)), 1, cols);
  }
}

void require_rank(Var v, int rank, const char* op) {
  if (static_cast<int>(v.shape().size()) != rank) {
    fail(ErrorKind::Shape, std::string(op) + ": expected rank " + std::to_string(rank) +
                               " input, got " + shape_str(v.shape()));
  }
}

void require_same_graph(Var a, Var b, const char* op) {
  if (a.graph != b.graph) fail(ErrorKind::Contract, std::string(op) + ": inputs from different graphs");
}

int last_dim(const Shape& s) { return s.back(); }

}  // namespace

// ---- Var ------------------------------------------------------------------

const Shape& Var::shape() const { return graph->shape(id); }
std::span<const float> Var::value() const { return graph->value(id); }
bool Var::requires_grad() const { return graph->requires_grad(id); }

// ---- Graph ----------------------------------------------------------------

Var Graph::constant(const Tensor& t) { return constant(t.shape, t.data); }

Var Graph::constant(Shape shape, std::vector<float> values) {
  if (numel(shape) != values.size()) {
    fail(ErrorKind::Shape, "constant of shape " + shape_str(shape) + " given " +
                               std::to_string(values.size()) + " values");
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(const Tensor& t) {
  numel(t.shape);
  Node n;
  n.shape = t.shape;
  // Never written: frozen leaves do not accumulate gradients.
  n.leaf = const_cast<Tensor*>(&t);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::param(Tensor& t, bool trainable) {
  numel(t.shape);
  Node n;
  n.shape = t.shape;
  n.leaf = &t;
  n.requires_grad = trainable;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::make(Shape shape, std::vector<float> value, std::initializer_list<Var> inputs,
                BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (Var in : inputs) {
    if (in.graph != this) fail(ErrorKind::Contract, "op input belongs to a different graph");
    n.requires_grad = n.requires_grad || requires_grad(in.id);
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

std::span<const float> Graph::value(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.leaf) return n.leaf->data;
  return n.value;
}

std::span<float> Graph::grad(int id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0f);
  return n.grad;
}

std::span<const float> Graph::grad_if_any(int id) const {
  return nodes_.at(static_cast<std::size_t>(id)).grad;
}

void Graph::backward(Var loss) {
  if (loss.graph != this) fail(ErrorKind::Contract, "backward: loss belongs to a different graph");
  if (numel(shape(loss.id)) != 1) {
    fail(ErrorKind::Contract, "backward: loss must be a scalar, got shape " + shape_str(shape(loss.id)));
  }
  if (backward_done_) fail(ErrorKind::Contract, "backward: graph already differentiated");
  backward_done_ = true;
  if (!requires_grad(loss.id)) return;
  grad(loss.id)[0] = 1.0f;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.leaf) {
      Tensor& t = *n.leaf;
      if (t.grad.size() != t.data.size()) t.grad.assign(t.data.size(), 0.0f);
      for (std::size_t j = 0; j < n.grad.size(); ++j) t.grad[j] += n.grad[j];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

// ---- ops ------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorKind::Shape, "matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()));
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  mmap(out, m, n).noalias() = cmap(a.value(), m, k) * cmap(b.value(), k, n);
  return a.graph->make({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int self) {
    auto dc = cmap(g.grad(self), m, n);
    if (g.requires_grad(a.id)) mmap(g.grad(a.id), m, k).noalias() += dc * cmap(g.value(b.id), k, n).transpose();
    if (g.requires_grad(b.id)) mmap(g.grad(b.id), k, n).noalias() += cmap(g.value(a.id), m, k).transpose() * dc;
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_graph(a, b, "matmul_nt");
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    fail(ErrorKind::Shape, "matmul_nt: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                               shape_str(b.shape()) + "^T");
  }
  std::vector<float> out(static_cast<std::size_t>(m) * n);
  mmap(out, m, n).noalias() = cmap(a.value(), m, k) * cmap(b.value(), n, k).transpose();
  return a.graph->make({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int self) {
    auto dc = cmap(g.grad(self), m, n);
    if (g.requires_grad(a.id)) mmap(g.grad(a.id), m, k).noalias() += dc * cmap(g.value(b.id), n, k);
    if (g.requires_grad(b.id)) mmap(g.grad(b.id), n, k).noalias() += dc.transpose() * cmap(g.value(a.id), m, k);
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  require_same_graph(x, weight, "linear");
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int m = x.rows(), in = x.cols(), out_dim = weight.rows();
  if (weight.cols() != in) {
    fail(ErrorKind::Shape, "linear: input " + shape_str(x.shape()) + " does not match weight " +
                               shape_str(weight.shape()));
  }
  if (bias) {
    require_same_graph(x, *bias, "linear");
    if (bias->shape() != Shape{out_dim}) {
      fail(ErrorKind::Shape, "linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                                 shape_str(weight.shape()));
    }
  }
  std::vector<float> out(static_cast<std::size_t>(m) * out_dim);
  auto y = mmap(out, m, out_dim);
  y.noalias() = cmap(x.value(), m, in) * cmap(weight.value(), out_dim, in).transpose();
  if (bias) y.rowwise() += rowvec(bias->value());
  Var b = bias.value_or(Var{});
  auto backward = [x, weight, b, m, in, out_dim](Graph& g, int self) {
    auto dy = cmap(g.grad(self), m, out_dim);
    if (g.requires_grad(x.id)) mmap(g.grad(x.id), m, in).noalias() += dy * cmap(g.value(weight.id), out_dim, in);
    if (g.requires_grad(weight.id))
      mmap(g.grad(weight.id), out_dim, in).noalias() += dy.transpose() * cmap(g.value(x.id), m, in);
    if (b.valid() && g.requires_grad(b.id)) add_column_sums(g.grad(b.id), g.grad(self), m, out_dim);
  };
  if (bias) return x.graph->make({m, out_dim}, std::move(out), {x, weight, *bias}, backward);
  return x.graph->make({m, out_dim}, std::move(out), {x, weight}, backward);
}

Var add(Var a, Var b) {
  require_same_graph(a, b, "add");
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Shape, "add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto av = a.value();
  auto bv = b.value();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.graph->make(a.shape(), std::move(out), {a, b}, [a, b](Graph& g, int self) {
    auto d = g.grad(self);
    for (Var in : {a, b}) {
      if (!g.requires_grad(in.id)) continue;
      auto gi = g.grad(in.id);
      for (std::size_t i = 0; i < d.size(); ++i) gi[i] += d[i];
    }
  });
}

Var add_rowvec(Var a, Var v) {
  require_same_graph(a, v, "add_rowvec");
  require_rank(a, 2, "add_rowvec");
  const int m = a.rows(), n = a.cols();
  if (v.shape() != Shape{n}) {
    fail(ErrorKind::Shape, "add_rowvec: vector " + shape_str(v.shape()) + " does not match " + shape_str(a.shape()));
  }
  std::vector<float> out(a.value().begin(), a.value().end());
  mmap(out, m, n).rowwise() += rowvec(v.value());
  return a.graph->make(a.shape(), std::move(out), {a, v}, [a, v, m, n](Graph& g, int self) {
    auto d = cmap(g.grad(self), m, n);
    if (g.requires_grad(a.id)) mmap(g.grad(a.id), m, n) += d;
    if (g.requires_grad(v.id)) add_column_sums(g.grad(v.id), g.grad(self), m, n);
  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b, "mul");
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Shape, "mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto av = a.value();
  auto bv = b.value();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.graph->make(a.shape(), std::move(out), {a, b}, [a, b](Graph& g, int self) {
    auto d = g.grad(self);
    auto av = g.value(a.id);
    auto bv = g.value(b.id);
    if (g.requires_grad(a.id)) {
      auto ga = g.grad(a.id);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * bv[i];
    }
    if (g.requires_grad(b.id)) {
      auto gb = g.grad(b.id);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * av[i];
    }
  });
}

Var scale(Var a, float s) {
  auto av = a.value();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.graph->make(a.shape(), std::move(out), {a}, [a, s](Graph& g, int self) {
    auto d = g.grad(self);
    auto ga = g.grad(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * s;
  });
}

Var sum(Var a) {
  double acc = 0.0;
  for (float x : a.value()) acc += x;
  return a.graph->make({1}, {static_cast<float>(acc)}, {a}, [a](Graph& g, int self) {
    const float d = g.grad(self)[0];
    for (float& x : g.grad(a.id)) x += d;
  });
}

namespace {

constexpr float kSqrt2OverPi = 0.7978845608028654f;
constexpr float kGeluCubic = 0.044715f;

using ArrMap = Eigen::Map<const Eigen::ArrayXf>;

ArrMap amap(std::span<const float> s) { return ArrMap(s.data(), static_cast<Eigen::Index>(s.size())); }
Eigen::Map<Eigen::ArrayXf> amap(std::span<float> s) {
  return Eigen::Map<Eigen::ArrayXf>(s.data(), static_cast<Eigen::Index>(s.size()));
}

}  // namespace

float gelu_scalar(float x) {
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + kGeluCubic * x * x * x)));
}

Var gelu(Var a) {
  const auto x = amap(a.value());
  std::vector<float> out(x.size());
  amap(std::span<float>(out)) = 0.5f * x * (1.0f + (kSqrt2OverPi * (x + kGeluCubic * x.cube())).tanh());
  return a.graph->make(a.shape(), std::move(out), {a}, [a](Graph& g, int self) {
    const auto d = amap(std::span<const float>(g.grad(self)));
    const auto x = amap(g.value(a.id));
    const Eigen::ArrayXf t = (kSqrt2OverPi * (x + kGeluCubic * x.cube())).tanh();
    const auto du = kSqrt2OverPi * (1.0f + 3.0f * kGeluCubic * x.square());
    amap(g.grad(a.id)) += d * (0.5f * (1.0f + t) + 0.5f * x * (1.0f - t.square()) * du);
  });
}

Var tanh(Var a) {
  std::vector<float> out(a.value().size());
  amap(std::span<float>(out)) = amap(a.value()).tanh();
  return a.graph->make(a.shape(), std::move(out), {a}, [a](Graph& g, int self) {
    const auto d = amap(std::span<const float>(g.grad(self)));
    const auto y = amap(g.value(self));
    amap(g.grad(a.id)) += d * (1.0f - y.square());
  });
}

namespace {

void softmax_row(const float* x, float* y, int n) {
  float mx = x[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    total += y[j];
  }
  const float inv = static_cast<float>(1.0 / total);
  for (int j = 0; j < n; ++j) y[j] *= inv;
}

// dx = y * (dy - <dy, y>) for one softmax row.
void softmax_row_backward(const float* y, const float* dy, float* dx, int n) {
  double dot = 0.0;
  for (int j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
  const float fdot = static_cast<float>(dot);
  for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - fdot);
}

}  // namespace

Var softmax_rows(Var x) {
  require_rank(x, 2, "softmax_rows");
  const int m = x.rows(), n = x.cols();
  auto xv = x.value();
  std::vector<float> out(xv.size());
  for (int i = 0; i < m; ++i) softmax_row(xv.data() + static_cast<std::size_t>(i) * n, out.data() + static_cast<std::size_t>(i) * n, n);
  return x.graph->make(x.shape(), std::move(out), {x}, [x, m, n](Graph& g, int self) {
    auto d = g.grad(self);
    auto y = g.value(self);
    auto gx = g.grad(x.id);
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * n;
      softmax_row_backward(y.data() + off, d.data() + off, gx.data() + off, n);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias) {
  require_same_graph(x, gain, "layer_norm");
  require_same_graph(x, bias, "layer_norm");
  const int d = last_dim(x.shape());
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    fail(ErrorKind::Shape, "layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                               " do not match input " + shape_str(x.shape()));
  }
  const int rows = static_cast<int>(x.value().size() / static_cast<std::size_t>(d));
  auto xv = x.value();
  auto gv = gain.value();
  auto bv = bias.value();
  std::vector<float> out(xv.size());
  // Saved per row: normalized values and inverse std.
  auto xhat = std::make_shared<std::vector<float>>(xv.size());
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const float* xr = xv.data() + static_cast<std::size_t>(r) * d;
    // Mean is taken relative to the first element so that a constant row
    // normalizes to exactly zero.
    const float pivot = xr[0];
    double shift = 0.0;
    for (int j = 0; j < d; ++j) shift += static_cast<double>(xr[j] - pivot);
    shift /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = static_cast<double>(xr[j] - pivot) - shift;
      var += c * c;
    }
    var /= d;
    const float istd = static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(kLayerNormEps)));
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    for (int j = 0; j < d; ++j) {
      const std::size_t idx = static_cast<std::size_t>(r) * d + j;
      const float c = static_cast<float>(static_cast<double>(xr[j] - pivot) - shift);
      (*xhat)[idx] = c * istd;
      out[idx] = gv[static_cast<std::size_t>(j)] * (*xhat)[idx] + bv[static_cast<std::size_t>(j)];
    }
  }
  return x.graph->make(x.shape(), std::move(out), {x, gain, bias},
                       [x, gain, bias, d, rows, xhat, inv_std](Graph& g, int self) {
    auto dy = g.grad(self);
    auto gv = g.value(gain.id);
    const bool need_x = g.requires_grad(x.id);
    const bool need_gain = g.requires_grad(gain.id);
    const bool need_bias = g.requires_grad(bias.id);
    std::vector<float> dxhat(static_cast<std::size_t>(d));
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * d;
      if (need_gain) {
        auto gg = g.grad(gain.id);
        for (int j = 0; j < d; ++j) gg[static_cast<std::size_t>(j)] += dy[off + j] * (*xhat)[off + j];
      }
      if (need_bias) {
        auto gb = g.grad(bias.id);
        for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += dy[off + j];
      }
      if (!need_x) continue;
      double mean_d = 0.0, mean_dx = 0.0;
      for (int j = 0; j < d; ++j) {
        dxhat[static_cast<std::size_t>(j)] = dy[off + j] * gv[static_cast<std::size_t>(j)];
        mean_d += dxhat[static_cast<std::size_t>(j)];
        mean_dx += static_cast<double>(dxhat[static_cast<std::size_t>(j)]) * (*xhat)[off + j];
      }
      mean_d /= d;
      mean_dx /= d;
      const float istd = (*inv_std)[static_cast<std::size_t>(r)];
      auto gx = g.grad(x.id);
      for (int j = 0; j < d; ++j) {
        gx[off + j] += istd * static_cast<float>(dxhat[static_cast<std::size_t>(j)] - mean_d -
                                                 (*xhat)[off + j] * mean_dx);
      }
    }
  });
}

Var embedding(Var table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const int vocab = table.rows(), d = table.cols();
  const int n = static_cast<int>(ids.size());
  if (n == 0) fail(ErrorKind::Shape, "embedding: empty id list");
  auto tv = table.value();
  std::vector<float> out(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= vocab) {
      fail(ErrorKind::Index, "embedding: id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d, out.data() + static_cast<std::size_t>(i) * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.graph->make({n, d}, std::move(out), {table}, [table, saved = std::move(saved), d](Graph& g, int self) {
    auto dy = g.grad(self);
    auto gt = g.grad(table.id);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      float* dst = gt.data() + static_cast<std::size_t>(saved[i]) * d;
      const float* src = dy.data() + i * static_cast<std::size_t>(d);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var gather_rows(Var x, std::span<const int> rows) {
  require_rank(x, 2, "gather_rows");
  const int m = x.rows(), d = x.cols();
  const int n = static_cast<int>(rows.size());
  if (n == 0) fail(ErrorKind::Shape, "gather_rows: empty row list");
  auto xv = x.value();
  std::vector<float> out(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const int r = rows[static_cast<std::size_t>(i)];
    if (r < 0 || r >= m) {
      fail(ErrorKind::Index, "gather_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(m) + ")");
    }
    std::copy_n(xv.data() + static_cast<std::size_t>(r) * d, d, out.data() + static_cast<std::size_t>(i) * d);
  }
  std::vector<int> saved(rows.begin(), rows.end());
  return x.graph->make({n, d}, std::move(out), {x}, [x, saved = std::move(saved), d](Graph& g, int self) {
    auto dy = g.grad(self);
    auto gx = g.grad(x.id);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      float* dst = gx.data() + static_cast<std::size_t>(saved[i]) * d;
      const float* src = dy.data() + i * static_cast<std::size_t>(d);
      for (int j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

Var attention(Var q, Var k, Var v, std::optional<Var> prefix_k, std::optional<Var> prefix_v, int batch,
              int seq, int heads) {
  require_same_graph(q, k, "attention");
  require_same_graph(q, v, "attention");
  require_rank(q, 2, "attention");
  const int d = q.cols();
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    fail(ErrorKind::Shape, "attention: q/k/v shapes differ");
  }
  if (batch < 1 || seq < 1 || q.rows() != batch * seq) {
    fail(ErrorKind::Shape, "attention: " + shape_str(q.shape()) + " is not " + std::to_string(batch) + "x" +
                               std::to_string(seq) + " rows");
  }
  if (heads < 1 || d % heads != 0) fail(ErrorKind::Shape, "attention: width not divisible by heads");
  if (prefix_k.has_value() != prefix_v.has_value()) fail(ErrorKind::Contract, "attention: prefix keys and values must come together");
  int plen = 0;
  if (prefix_k) {
    require_same_graph(q, *prefix_k, "attention");
    require_same_graph(q, *prefix_v, "attention");
    require_rank(*prefix_k, 2, "attention");
    if (prefix_k->cols() != d || prefix_v->shape() != prefix_k->shape()) {
      fail(ErrorKind::Shape, "attention: prefix shape " + shape_str(prefix_k->shape()) + " does not match width " + std::to_string(d));
    }
    plen = prefix_k->rows();
  }
  const int dh = d / heads;
  const int ctx = plen + seq;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

  auto qv = q.value();
  auto kv = k.value();
  auto vv = v.value();
  std::span<const float> pk = prefix_k ? prefix_k->value() : std::span<const float>{};
  std::span<const float> pv = prefix_v ? prefix_v->value() : std::span<const float>{};

  // probs[b][h] is a seq x ctx block.
  auto probs = std::make_shared<std::vector<float>>(static_cast<std::size_t>(batch) * heads * seq * ctx);
  std::vector<float> out(qv.size(), 0.0f);
  std::vector<float> keys(static_cast<std::size_t>(ctx) * dh), vals(static_cast<std::size_t>(ctx) * dh);
  std::vector<float> qh(static_cast<std::size_t>(seq) * dh);

  auto gather_head = [&](int b, int h) {
    for (int j = 0; j < plen; ++j) {
      std::copy_n(pk.data() + static_cast<std::size_t>(j) * d + h * dh, dh, keys.data() + static_cast<std::size_t>(j) * dh);
      std::copy_n(pv.data() + static_cast<std::size_t>(j) * d + h * dh, dh, vals.data() + static_cast<std::size_t>(j) * dh);
    }
    for (int t = 0; t < seq; ++t) {
      const std::size_t row = (static_cast<std::size_t>(b) * seq + t) * d + static_cast<std::size_t>(h) * dh;
      std::copy_n(kv.data() + row, dh, keys.data() + static_cast<std::size_t>(plen + t) * dh);
      std::copy_n(vv.data() + row, dh, vals.data() + static_cast<std::size_t>(plen + t) * dh);
      std::copy_n(qv.data() + row, dh, qh.data() + static_cast<std::size_t>(t) * dh);
    }
  };

  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      gather_head(b, h);
      float* p = probs->data() + (static_cast<std::size_t>(b) * heads + h) * seq * ctx;
      auto scores = mmap(std::span<float>(p, static_cast<std::size_t>(seq) * ctx), seq, ctx);
      scores.noalias() = cmap(qh, seq, dh) * cmap(keys, ctx, dh).transpose();
      scores *= inv_sqrt;
      for (int t = 0; t < seq; ++t) softmax_row(p + static_cast<std::size_t>(t) * ctx, p + static_cast<std::size_t>(t) * ctx, ctx);
      RowMat o = scores * cmap(vals, ctx, dh);
      for (int t = 0; t < seq; ++t) {
        std::copy_n(o.data() + static_cast<std::size_t>(t) * dh, dh,
                    out.data() + (static_cast<std::size_t>(b) * seq + t) * d + static_cast<std::size_t>(h) * dh);
      }
    }
  }

  Var pk_var = prefix_k.value_or(Var{});
  Var pv_var = prefix_v.value_or(Var{});
  auto backward = [q, k, v, pk_var, pv_var, batch, seq, heads, d, dh, plen, ctx, inv_sqrt, probs](Graph& g, int self) {
    auto dout = g.grad(self);
    auto qv = g.value(q.id);
    auto kv = g.value(k.id);
    auto vv = g.value(v.id);
    const bool has_prefix = pk_var.valid();
    std::span<const float> pk = has_prefix ? g.value(pk_var.id) : std::span<const float>{};
    std::span<const float> pv = has_prefix ? g.value(pv_var.id) : std::span<const float>{};
    const bool need_q = g.requires_grad(q.id), need_k = g.requires_grad(k.id), need_v = g.requires_grad(v.id);
    const bool need_pk = has_prefix && g.requires_grad(pk_var.id);
    const bool need_pv = has_prefix && g.requires_grad(pv_var.id);

    std::vector<float> keys(static_cast<std::size_t>(ctx) * dh), vals(static_cast<std::size_t>(ctx) * dh);
    std::vector<float> qh(static_cast<std::size_t>(seq) * dh), doh(static_cast<std::size_t>(seq) * dh);
    RowMat dp(seq, ctx), dkeys(ctx, dh), dvals(ctx, dh), dq(seq, dh);

    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        for (int j = 0; j < plen; ++j) {
          std::copy_n(pk.data() + static_cast<std::size_t>(j) * d + h * dh, dh, keys.data() + static_cast<std::size_t>(j) * dh);
          std::copy_n(pv.data() + static_cast<std::size_t>(j) * d + h * dh, dh, vals.data() + static_cast<std::size_t>(j) * dh);
        }
        for (int t = 0; t < seq; ++t) {
          const std::size_t row = (static_cast<std::size_t>(b) * seq + t) * d + static_cast<std::size_t>(h) * dh;
          std::copy_n(kv.data() + row, dh, keys.data() + static_cast<std::size_t>(plen + t) * dh);
          std::copy_n(vv.data() + row, dh, vals.data() + static_cast<std::size_t>(plen + t) * dh);
          std::copy_n(qv.data() + row, dh, qh.data() + static_cast<std::size_t>(t) * dh);
          std::copy_n(dout.data() + row, dh, doh.data() + static_cast<std::size_t>(t) * dh);
        }
        const float* p = probs->data() + (static_cast<std::size_t>(b) * heads + h) * seq * ctx;
        auto pm = cmap(std::span<const float>(p, static_cast<std::size_t>(seq) * ctx), seq, ctx);
        auto dom = cmap(doh, seq, dh);
        dvals.noalias() = pm.transpose() * dom;
        dp.noalias() = dom * cmap(vals, ctx, dh).transpose();
        // Softmax backward in place: ds = p * (dp - <dp, p>).
        for (int t = 0; t < seq; ++t) {
          double dot = 0.0;
          for (int j = 0; j < ctx; ++j) dot += static_cast<double>(dp(t, j)) * pm(t, j);
          const float fdot = static_cast<float>(dot);
          for (int j = 0; j < ctx; ++j) dp(t, j) = pm(t, j) * (dp(t, j) - fdot) * inv_sqrt;
        }
        dq.noalias() = dp * cmap(keys, ctx, dh);
        dkeys.noalias() = dp.transpose() * cmap(qh, seq, dh);

        if (need_pk || need_pv) {
          for (int j = 0; j < plen; ++j) {
            const std::size_t row = static_cast<std::size_t>(j) * d + static_cast<std::size_t>(h) * dh;
            if (need_pk) {
              auto gpk = g.grad(pk_var.id);
              for (int c = 0; c < dh; ++c) gpk[row + c] += dkeys(j, c);
            }
            if (need_pv) {
              auto gpv = g.grad(pv_var.id);
              for (int c = 0; c < dh; ++c) gpv[row + c] += dvals(j, c);
            }
          }
        }
        for (int t = 0; t < seq; ++t) {
          const std::size_t row = (static_cast<std::size_t>(b) * seq + t) * d + static_cast<std::size_t>(h) * dh;
          if (need_q) {
            auto gq = g.grad(q.id);
            for (int c = 0; c < dh; ++c) gq[row + c] += dq(t, c);
          }
          if (need_k) {
            auto gk = g.grad(k.id);
            for (int c = 0; c < dh; ++c) gk[row + c] += dkeys(plen + t, c);
          }
          if (need_v) {
            auto gv = g.grad(v.id);
            for (int c = 0; c < dh; ++c) gv[row + c] += dvals(plen + t, c);
          }
        }
      }
    }
  };
  if (prefix_k) return q.graph->make(q.shape(), std::move(out), {q, k, v, *prefix_k, *prefix_v}, backward);
  return q.graph->make(q.shape(), std::move(out), {q, k, v}, backward);
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const int b = logits.rows(), c = logits.cols();
  if (static_cast<int>(labels.size()) != b) {
    fail(ErrorKind::Shape, "cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  }
  auto lv = logits.value();
  auto probs = std::make_shared<std::vector<float>>(lv.size());
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      fail(ErrorKind::Index, "cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
    }
    const float* row = lv.data() + static_cast<std::size_t>(i) * c;
    float mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = std::log(z) + mx;
    total += log_z - row[y];
    for (int j = 0; j < c; ++j) (*probs)[static_cast<std::size_t>(i) * c + j] = static_cast<float>(std::exp(row[j] - log_z));
  }
  std::vector<int> saved(labels.begin(), labels.end());
  return logits.graph->make({1}, {static_cast<float>(total / b)}, {logits},
                            [logits, probs, saved = std::move(saved), b, c](Graph& g, int self) {
    const float d = g.grad(self)[0] / static_cast<float>(b);
    auto gl = g.grad(logits.id);
    for (int i = 0; i < b; ++i) {
      for (int j = 0; j < c; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * c + j;
        const float onehot = (j == saved[static_cast<std::size_t>(i)]) ? 1.0f : 0.0f;
        gl[idx] += d * ((*probs)[idx] - onehot);
      }
    }
  });
}

Var mse(Var pred, std::span<const float> targets) {
  require_rank(pred, 2, "mse");
  const int b = pred.rows();
  if (pred.cols() != 1 || static_cast<int>(targets.size()) != b) {
    fail(ErrorKind::Shape, "mse: prediction " + shape_str(pred.shape()) + " vs " + std::to_string(targets.size()) + " targets");
  }
  auto pv = pred.value();
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const double r = static_cast<double>(pv[static_cast<std::size_t>(i)]) - targets[static_cast<std::size_t>(i)];
    total += r * r;
  }
  std::vector<float> saved(targets.begin(), targets.end());
  return pred.graph->make({1}, {static_cast<float>(total / b)}, {pred}, [pred, saved = std::move(saved), b](Graph& g, int self) {
    const float d = g.grad(self)[0] * 2.0f / static_cast<float>(b);
    auto pv = g.value(pred.id);
    auto gp = g.grad(pred.id);
    for (int i = 0; i < b; ++i) gp[static_cast<std::size_t>(i)] += d * (pv[static_cast<std::size_t>(i)] - saved[static_cast<std::size_t>(i)]);
  });
}

}  // namespace ehtune::nc
