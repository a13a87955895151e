#include "ehtune/optim.hpp"

#include <cmath>

#include "ehtune/error.hpp"

namespace ehtune::train {

void OptimConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::Config, "optimizer config: " + what); };
  if (!(lr_peak > 0.0)) bad("lr_peak must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) bad("warmup_fraction must lie in (0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) bad("betas must lie in [0, 1)");
  if (!(eps > 0.0)) bad("eps must be positive");
  if (weight_decay < 0.0) bad("weight_decay must be non-negative");
  if (batch_size < 1) bad("batch_size must be >= 1");
}

namespace {

int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

}  // namespace

double lr_at(int step, int total_steps, const OptimConfig& cfg) {
  if (total_steps <= 0 || step < 0 || step >= total_steps) return 0.0;
  const int warmup = round_half_up(cfg.warmup_fraction * total_steps);
  if (step < warmup) return cfg.lr_peak * static_cast<double>(step) / warmup;
  return cfg.lr_peak * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

std::pair<int, int> split_budget(int total_steps, double fraction) {
  if (total_steps < 0) fail(ErrorKind::Config, "split_budget: negative step budget");
  if (!(fraction >= 0.0 && fraction < 1.0)) fail(ErrorKind::Config, "split_budget: fraction must lie in [0, 1)");
  const int first = round_half_up(fraction * total_steps);
  return {first, total_steps - first};
}

bool decays(const nc::Tensor& t) { return t.rank() == 2; }

AdamW::AdamW(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void AdamW::step(std::span<const NamedParam> params, double lr) {
  for (const auto& p : params) {
    for (float g : p.tensor->grad) {
      if (!std::isfinite(g)) {
        fail(ErrorKind::Training, "non-finite gradient in '" + p.name + "' at optimizer step " + std::to_string(t_));
      }
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const auto& p : params) {
    nc::Tensor& w = *p.tensor;
    Moments& st = state_[p.name];
    if (st.m.size() != w.size()) {
      st.m.assign(w.size(), 0.0f);
      st.v.assign(w.size(), 0.0f);
    }
    const bool decay = decays(w) && cfg_.weight_decay > 0.0;
    const double shrink = 1.0 - lr * cfg_.weight_decay;
    const bool has_grad = w.grad.size() == w.size();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = has_grad ? static_cast<double>(w.grad[i]) : 0.0;
      double value = w.data[i];
      if (decay) value *= shrink;
      const double m = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
      const double v = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
      st.m[i] = static_cast<float>(m);
      st.v[i] = static_cast<float>(v);
      const double m_hat = m / bc1;
      const double v_hat = v / bc2;
      value -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
      w.data[i] = static_cast<float>(value);
    }
  }
}

}  // namespace ehtune::train
