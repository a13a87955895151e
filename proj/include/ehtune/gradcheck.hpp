#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ehtune/graph.hpp"

namespace ehtune::nc {

struct GradCheckEntry {
  std::string name;
  double max_abs_error = 0.0;
  // ||analytic - numeric|| / (||analytic|| + ||numeric||), 0 when both vanish.
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

// Builds the scalar loss on a fresh graph. Must bind every checked tensor
// with `g.param(t, true)` and be deterministic.
using LossBuilder = std::function<Var(Graph&)>;

// Compares backward() against central differences (step h) for every element
// of every listed tensor. Tensors are restored bitwise afterwards.
GradCheckReport grad_check(const LossBuilder& build, const std::vector<NamedTensor>& params, float h,
                           double tol);

}  // namespace ehtune::nc
