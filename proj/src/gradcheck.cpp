#include "ehtune/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ehtune::nc {

namespace {

double eval_loss(const LossBuilder& build) {
  Graph g;
  return static_cast<double>(build(g).value()[0]);
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& build, const std::vector<NamedTensor>& params, float h,
                           double tol) {
  for (const auto& p : params) p.tensor->zero_grad();
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
  }

  GradCheckReport report;
  for (const auto& p : params) {
    Tensor& t = *p.tensor;
    std::vector<float> analytic = t.grad;
    analytic.resize(t.data.size(), 0.0f);
    GradCheckEntry entry{p.name};
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      const float saved = t.data[i];
      t.data[i] = saved + h;
      const double up = eval_loss(build);
      t.data[i] = saved - h;
      const double down = eval_loss(build);
      t.data[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double diff = static_cast<double>(analytic[i]) - numeric;
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(diff));
      diff2 += diff * diff;
      a2 += static_cast<double>(analytic[i]) * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::sqrt(a2) + std::sqrt(n2);
    entry.rel_error = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    report.max_rel_error = std::max(report.max_rel_error, entry.rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace ehtune::nc
