#include "ehtune/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"

namespace ehtune::analysis {

double feature_change(const FeatureSnapshot& before, const FeatureSnapshot& after) {
  if (before.probe_hash != after.probe_hash) {
    fail(ErrorKind::Contract, "feature_change: snapshots '" + before.tag + "' and '" + after.tag +
                                  "' were taken on different probe sets");
  }
  if (before.features.shape != after.features.shape || before.features.rank() != 2) {
    fail(ErrorKind::Contract, "feature_change: shapes " + nc::shape_str(before.features.shape) + " and " +
                                  nc::shape_str(after.features.shape) + " differ");
  }
  const int n = before.features.dim(0), d = before.features.dim(1);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * d + j;
      const double diff = static_cast<double>(after.features.data[idx]) - before.features.data[idx];
      sq += diff * diff;
    }
    total += std::sqrt(sq);
  }
  return total / n;
}

double param_distance(const ParamStore& theta, const ParamStore& theta0) {
  if (theta.size() != theta0.size()) fail(ErrorKind::Contract, "param_distance: parameter sets differ in size");
  double total = 0.0;
  for (const auto& [name, t] : theta) {
    if (!theta0.contains(name)) fail(ErrorKind::Contract, "param_distance: '" + name + "' missing from reference");
    const nc::Tensor& r = theta0.at(name);
    if (r.shape != t.shape) fail(ErrorKind::Contract, "param_distance: shape mismatch for '" + name + "'");
    double sq = 0.0;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const double diff = static_cast<double>(t.data[i]) - r.data[i];
      sq += diff * diff;
    }
    total += sq;
  }
  return total;
}

namespace {

constexpr double kPowerTol = 1e-8;
constexpr int kPowerMaxIter = 1000;

// Returns (eigenvalue, unit eigenvector) of the dominant eigenpair of a
// symmetric PSD d x d matrix.
std::pair<double, std::vector<double>> power_iteration(const std::vector<double>& cov, int d, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(d)), w(static_cast<std::size_t>(d));
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  double lambda = 0.0;
  for (int it = 0; it < kPowerMaxIter; ++it) {
    for (int i = 0; i < d; ++i) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += cov[static_cast<std::size_t>(i) * d + j] * v[static_cast<std::size_t>(j)];
      w[static_cast<std::size_t>(i)] = acc;
    }
    double wn = 0.0;
    for (double x : w) wn += x * x;
    wn = std::sqrt(wn);
    if (wn == 0.0) return {0.0, v};
    double delta = 0.0;
    for (int i = 0; i < d; ++i) {
      const double nv = w[static_cast<std::size_t>(i)] / wn;
      delta += (nv - v[static_cast<std::size_t>(i)]) * (nv - v[static_cast<std::size_t>(i)]);
      v[static_cast<std::size_t>(i)] = nv;
    }
    lambda = wn;
    if (std::sqrt(delta) < kPowerTol) break;
  }
  // Rayleigh quotient of the final vector.
  double rq = 0.0;
  for (int i = 0; i < d; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) acc += cov[static_cast<std::size_t>(i) * d + j] * v[static_cast<std::size_t>(j)];
    rq += v[static_cast<std::size_t>(i)] * acc;
  }
  (void)lambda;
  std::size_t big = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[big])) big = i;
  }
  if (v[big] < 0) for (auto& x : v) x = -x;
  return {std::max(rq, 0.0), v};
}

}  // namespace

Projection pca_project_2d(const nc::Tensor& features) {
  if (features.rank() != 2) fail(ErrorKind::Contract, "pca: features must be a matrix");
  const int n = features.dim(0), d = features.dim(1);
  if (n < 3) fail(ErrorKind::Contract, "pca: need at least 3 points");
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += features.data[static_cast<std::size_t>(i) * d + j];
  }
  for (auto& m : mean) m /= n;
  std::vector<double> centered(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * d + j;
      centered[idx] = features.data[idx] - mean[static_cast<std::size_t>(j)];
    }
  }
  std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < n; ++i) {
    const double* row = centered.data() + static_cast<std::size_t>(i) * d;
    for (int a = 0; a < d; ++a) {
      for (int b = a; b < d; ++b) cov[static_cast<std::size_t>(a) * d + b] += row[a] * row[b];
    }
  }
  Projection out;
  for (int a = 0; a < d; ++a) {
    for (int b = a; b < d; ++b) {
      const double c = cov[static_cast<std::size_t>(a) * d + b] / (n - 1);
      cov[static_cast<std::size_t>(a) * d + b] = c;
      cov[static_cast<std::size_t>(b) * d + a] = c;
    }
    out.total_variance += cov[static_cast<std::size_t>(a) * d + a];
  }
  if (out.total_variance <= 0.0) fail(ErrorKind::Contract, "pca: features have rank 0");

  out.components.assign(static_cast<std::size_t>(2) * d, 0.0);
  for (int c = 0; c < 2; ++c) {
    auto [lambda, v] = power_iteration(cov, d, 0x5eed0000ULL + static_cast<std::uint64_t>(c));
    out.explained[c] = lambda;
    std::copy(v.begin(), v.end(), out.components.begin() + static_cast<std::ptrdiff_t>(c) * d);
    // Deflate.
    for (int a = 0; a < d; ++a) {
      for (int b = 0; b < d; ++b) {
        cov[static_cast<std::size_t>(a) * d + b] -= lambda * v[static_cast<std::size_t>(a)] * v[static_cast<std::size_t>(b)];
      }
    }
  }
  out.points.assign(static_cast<std::size_t>(n) * 2, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 2; ++c) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) {
        acc += centered[static_cast<std::size_t>(i) * d + j] * out.components[static_cast<std::size_t>(c) * d + j];
      }
      out.points[static_cast<std::size_t>(i) * 2 + c] = acc;
    }
  }
  return out;
}

std::optional<int> steps_to_threshold(const std::vector<double>& curve, double tau, int window) {
  if (!(tau > 0.0)) fail(ErrorKind::Contract, "steps_to_threshold: tau must be positive");
  if (window < 1) fail(ErrorKind::Contract, "steps_to_threshold: window must be >= 1");
  const std::size_t w = static_cast<std::size_t>(window);
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const std::size_t lo = i + 1 >= w ? i + 1 - w : 0;
    double acc = 0.0;
    for (std::size_t j = lo; j <= i; ++j) acc += curve[j];
    if (acc / static_cast<double>(i + 1 - lo) < tau) return static_cast<int>(i);
  }
  return std::nullopt;
}

GradNormSummary grad_norm_summary(const std::vector<GradNormEntry>& log, int window) {
  if (log.empty()) fail(ErrorKind::Contract, "grad_norm_summary: no gradient log recorded");
  if (window < 1) fail(ErrorKind::Contract, "grad_norm_summary: window must be >= 1");
  const std::size_t n = std::min<std::size_t>(log.size(), static_cast<std::size_t>(window));
  GradNormSummary s;
  for (std::size_t i = 0; i < n; ++i) {
    s.head_mean += log[i].head;
    s.backbone_mean += log[i].backbone;
  }
  s.head_mean /= static_cast<double>(n);
  s.backbone_mean /= static_cast<double>(n);
  if (s.backbone_mean > 0.0) s.ratio = s.head_mean / s.backbone_mean;
  return s;
}

}  // namespace ehtune::analysis
