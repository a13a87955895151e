#pragma once

#include <cstdint>

#include "ehtune/backbone.hpp"

namespace ehtune::model {

struct HeadConfig {
  int d_model = 64;
  int d_mid = 256;
  int n_classes = 2;  // 1 for regression

  void validate() const;
  bool operator==(const HeadConfig&) const = default;
};

// Two-layer MLP classification head:
//   logits = tanh(x W1 + b1) W2 + b2
// with W1 [d_model, d_mid], b1 [d_mid], W2 [d_mid, n_classes], b2 [n_classes].
struct Head {
  HeadConfig config;
  ParamStore params;
};

// W ~ N(0, 0.02^2), b = 0, seeded.
Head build_head(const HeadConfig& cfg, std::uint64_t seed);

std::size_t head_param_count(const HeadConfig& cfg);

nc::Var head_mid(Binder& binder, const Head& head, nc::Var features);
nc::Var head_logits(Binder& binder, const Head& head, nc::Var features);

// Graph-free forward on a [b, d_model] feature tensor.
nc::Tensor forward_logits(const Head& head, const nc::Tensor& features);
nc::Tensor mid_features(const Head& head, const nc::Tensor& features);

// Copies θ_g from `from` into `to`; dimensions must agree.
void transplant_head(const Head& from, Head& to);

}  // namespace ehtune::model
