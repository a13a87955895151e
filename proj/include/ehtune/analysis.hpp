#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ehtune/param_store.hpp"
#include "ehtune/tensor.hpp"

namespace ehtune::analysis {

// Backbone features of a fixed probe set under one parameter state.
struct FeatureSnapshot {
  std::string tag;
  std::uint64_t probe_hash = 0;  // identifies the probe set and its order
  nc::Tensor features;           // [n, d]
};

// Mean over probe examples of ||after_i - before_i||_2.
double feature_change(const FeatureSnapshot& before, const FeatureSnapshot& after);

// Sum of squared elementwise differences over all tensors, ||θ - θ0||^2.
double param_distance(const ParamStore& theta, const ParamStore& theta0);

struct Projection {
  std::vector<double> points;  // n x 2, row-major
  double explained[2] = {0.0, 0.0};  // top-2 covariance eigenvalues
  double total_variance = 0.0;       // trace of the covariance
  std::vector<double> components;    // 2 x d principal directions
};

// Centers the rows and projects onto the top two principal directions found by
// power iteration with deflation (tol 1e-8, at most 1000 iterations, fixed
// start vector). Each direction's largest-magnitude entry is made positive.
Projection pca_project_2d(const nc::Tensor& features);

// First step whose trailing-mean loss (over min(window, i+1) values) is < tau.
std::optional<int> steps_to_threshold(const std::vector<double>& loss_curve, double tau, int window = 20);

struct GradNormEntry {
  double head = 0.0;
  double backbone = 0.0;
};

struct GradNormSummary {
  double head_mean = 0.0;
  double backbone_mean = 0.0;
  std::optional<double> ratio;  // head_mean / backbone_mean
};

// Means over the first `window` logged steps.
GradNormSummary grad_norm_summary(const std::vector<GradNormEntry>& log, int window);

}  // namespace ehtune::analysis
