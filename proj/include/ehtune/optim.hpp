#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ehtune/tensor.hpp"

namespace ehtune::train {

struct OptimConfig {
  double lr_peak = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.1;
  double warmup_fraction = 0.10;
  int batch_size = 32;

  void validate() const;
  bool operator==(const OptimConfig&) const = default;
};

// Linear warmup from 0 to lr_peak over round(warmup_fraction * total) steps,
// then linear decay reaching 0 at `total`.
double lr_at(int step, int total_steps, const OptimConfig& cfg);

// round-half-up(fraction * total) steps for stage 1, the rest for stage 2.
std::pair<int, int> split_budget(int total_steps, double fraction);

// Decay applies to rank-2 tensors only (never to biases or layer-norm gains).
bool decays(const nc::Tensor& t);

struct NamedParam {
  std::string name;
  nc::Tensor* tensor;
};

// AdamW with bias correction and decoupled weight decay:
//   w <- w (1 - lr wd)          (rank-2 tensors only)
//   w <- w - lr m_hat / (sqrt(v_hat) + eps)
// Moments are keyed by parameter name; tensors without a gradient buffer
// are treated as having a zero gradient.
class AdamW {
 public:
  explicit AdamW(OptimConfig cfg);

  void step(std::span<const NamedParam> params, double lr);
  int steps_taken() const noexcept { return t_; }
  const OptimConfig& config() const noexcept { return cfg_; }

 private:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };

  OptimConfig cfg_;
  std::map<std::string, Moments> state_;
  int t_ = 0;
};

}  // namespace ehtune::train
