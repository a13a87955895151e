// Acceptance suite: one PASS/FAIL line per criterion.
//   acceptance <desk-config.json> [--property-only] [--strict] [--report FILE]
// Exits 0 once every criterion has been evaluated; --strict also requires all to pass.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "ehtune/backbone.hpp"
#include "ehtune/experiment.hpp"
#include "ehtune/gradcheck.hpp"
#include "ehtune/head.hpp"
#include "ehtune/optim.hpp"
#include "ehtune/pet.hpp"
#include "ehtune/rng.hpp"
#include "ehtune/tasks.hpp"
#include "ehtune/trainer.hpp"
#include "oracles.hpp"

using namespace ehtune;
using train::RunRecord;
using train::Strategy;

namespace {

int g_failed = 0;
int g_reported = 0;
std::FILE* g_report = nullptr;

void emit(const std::string& line) {
  std::printf("%s\n", line.c_str());
  std::fflush(stdout);
  if (g_report) {
    std::fprintf(g_report, "%s\n", line.c_str());
    std::fflush(g_report);
  }
}

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  if (!ok) ++g_failed;
  ++g_reported;
  emit(fmt::format("{} {:2d} {}: {}", ok ? "PASS" : "FAIL", id, name, detail));
}

void note(const std::string& line) { emit("     " + line); }

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

std::string fmt_list(const std::vector<double>& xs, int prec = 3) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? " " : "") + fmt::format("{:.{}f}", xs[i], prec);
  return s + "]";
}

model::TokenBatch random_tokens(const model::BackboneConfig& cfg, int batch, int seq, Rng& rng) {
  model::TokenBatch tb{batch, seq, {}};
  for (int i = 0; i < batch * seq; ++i) tb.ids.push_back(rng.uniform_int(cfg.vocab_size));
  return tb;
}

double max_abs_diff(const nc::Tensor& a, const nc::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - double(b.data[i])));
  return m;
}

// ---- property suite -------------------------------------------------------------

void criterion_gradients() {
  model::BackboneConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.n_layers = 1;
  cfg.max_seq_len = 8;
  double worst = 0.0, worst_zero = 0.0;
  std::string worst_name;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    pet::Model m;
    m.backbone = model::build_backbone(cfg, seed);
    m.head = model::build_head({cfg.d_model, 16, 2}, seed + 100);
    Rng rng(seed + 200);
    for (auto* store : {&m.backbone.params, &m.head.params})
      for (auto& [name, t] : *store)
        for (float& x : t.data) x += static_cast<float>(0.3 * rng.normal());
    const model::TokenBatch tb = random_tokens(cfg, 3, 6, rng);
    std::vector<int> labels;
    for (int i = 0; i < 3; ++i) labels.push_back(rng.uniform_int(2));
    std::vector<nc::NamedTensor> named;
    std::set<std::string> all;
    for (auto& [name, t] : m.backbone.params) {
      if (model::is_mlm_param(name)) continue;
      named.push_back({name, &t});
      all.insert(name);
    }
    for (auto& [name, t] : m.head.params) {
      named.push_back({"head." + name, &t});
      all.insert("head." + name);
    }
    auto rep = nc::grad_check(
        [&](nc::Graph& g) {
          model::Binder b(g, &all);
          nc::Var f = model::forward_features(b, m.backbone, tb);
          return nc::cross_entropy(model::head_logits(b, m.head, f), labels);
        },
        named, 1e-2f, 1e-3);
    for (const auto& e : rep.entries) {
      // Key biases have an identically zero gradient; compare them on absolute error.
      if (e.name.ends_with("attn.k.bias")) {
        worst_zero = std::max(worst_zero, e.max_abs_error);
      } else if (e.rel_error > worst) {
        worst = e.rel_error;
        worst_name = e.name;
      }
    }
  }
  report(1, "gradient correctness", worst < 1e-3 && worst_zero < 1e-3,
         fmt::format("max rel error {:.2e} ({}) over 10 seeds, zero-gradient tensors max abs {:.2e}", worst, worst_name,
                     worst_zero));
}

void criterion_lora(const model::BackboneConfig& cfg) {
  double init_diff = 0.0, merge_diff = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    pet::Model m;
    m.backbone = model::build_backbone(cfg, seed);
    Rng rng(seed + 50);
    for (auto& [name, t] : m.backbone.params)
      for (float& x : t.data) x += static_cast<float>(0.05 * rng.normal());
    m.head = model::build_head({cfg.d_model, 16, 2}, seed);
    const model::TokenBatch tb = random_tokens(cfg, 8, 12, rng);
    const nc::Tensor before = model::extract_features(m.backbone, tb);
    pet::attach_lora(m, 8, 8.0f, seed + 1);
    init_diff = std::max(init_diff, max_abs_diff(before, model::extract_features(m.backbone, tb, m.attachments())));
    for (auto& [name, t] : m.lora->params)
      for (float& x : t.data) x = static_cast<float>(0.05 * rng.normal());
    const nc::Tensor adapted = model::extract_features(m.backbone, tb, m.attachments());
    pet::merge_lora(m);
    merge_diff = std::max(merge_diff, max_abs_diff(adapted, model::extract_features(m.backbone, tb)));
  }
  report(2, "LoRA identity at init and merge", init_diff < 1e-6 && merge_diff < 1e-5,
         fmt::format("attach max |diff| {:.2e} (< 1e-6), merge max |diff| {:.2e} (< 1e-5)", init_diff, merge_diff));
}

void criterion_partitions(const exp::ExperimentConfig& cfg, const model::Backbone& bb, const tasks::Task& task) {
  bool ok = true;
  std::string detail;
  for (Strategy s : {Strategy::PET_BITFIT, Strategy::PET_LORA, Strategy::PET_PREFIX, Strategy::TOPK, Strategy::LP}) {
    train::TrainPlan plan = exp::make_plan(cfg, s, task.name, 0);
    plan.total_steps = 200;
    pet::Model m;
    const RunRecord rec = train::run_strategy(plan, bb, task, cfg.measure, &m);
    const auto& trainable = rec.stages.back().trainable;
    int frozen = 0, changed = 0;
    for (const auto& [name, t] : m.backbone.params) {
      if (std::binary_search(trainable.begin(), trainable.end(), name)) continue;
      ++frozen;
      if (tensor_hash(t) != tensor_hash(bb.params.at(name))) ++changed;
    }
    ok = ok && changed == 0 && frozen > 0 && rec.stages.back().frozen_checks > 0;
    detail += fmt::format("{} {}/{} frozen unchanged; ", to_string(s), frozen - changed, frozen);
  }
  report(3, "partition exactness", ok, detail + "200 steps each");
}

void criterion_restore(const exp::ExperimentConfig& cfg, const model::Backbone& bb, const tasks::Task& task) {
  bool ok = true;
  std::string detail;
  for (Strategy s : {Strategy::EH_FT_BITFIT, Strategy::EH_FT_LORA, Strategy::EH_FT_PREFIX}) {
    const RunRecord rec = train::run_strategy(exp::make_plan(cfg, s, task.name, 0), bb, task, cfg.measure);
    const double restored = *rec.feature_change_value("pretrained_restored");
    ok = ok && restored == 0.0;
    detail += fmt::format("{} restored {} (stage1 {:.4f}); ", to_string(s), restored,
                          *rec.feature_change_value("pretrained_stage1"));
  }
  report(4, "restore exactness", ok, detail + "feature_change == 0 exactly");
}

void criterion_budget(const exp::ExperimentConfig& cfg, const model::Backbone& bb, const tasks::Task& task) {
  bool ok = train::split_budget(1000, 0.1) == std::make_pair(100, 900);
  int checked = 0;
  for (const auto& name : train::strategy_names()) {
    const Strategy s = train::parse_strategy(name);
    train::TrainPlan plan = exp::make_plan(cfg, s, task.name, 0);
    plan.total_steps = 123;
    const RunRecord rec = train::run_strategy(plan, bb, task, cfg.measure);
    ok = ok && rec.optimizer_steps == 123 && rec.stage1_steps + rec.stage2_steps == 123 &&
         static_cast<int>(rec.train_loss.size()) == 123;
    ++checked;
  }
  report(5, "budget parity", ok,
         fmt::format("{} strategies logged 123 of 123 steps; split_budget(1000, 0.1) = (100, 900)", checked));
}

void criterion_metrics() {
  using namespace oracle;
  Rng rng(99);
  bool exact = true;
  double worst_corr = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 2 + rng.uniform_int(100);
    std::vector<int> p(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
    std::vector<double> x(static_cast<std::size_t>(n)), z(static_cast<std::size_t>(n));
    const double agree = rng.uniform();
    for (int i = 0; i < n; ++i) {
      y[i] = rng.bernoulli(0.5);
      p[i] = rng.bernoulli(agree) ? y[i] : rng.bernoulli(0.5);
      x[i] = trial % 3 == 0 ? rng.uniform_int(4) : rng.normal();
      z[i] = x[i] + (trial % 3 == 0 ? rng.uniform_int(4) : rng.normal());
    }
    const Counts c = count_confusion(p, y);
    exact = exact && tasks::mcc(p, y) == oracle_mcc(c) && tasks::f1(p, y) == oracle_f1(c);
    const auto varies = [](const std::vector<double>& v) {
      return std::any_of(v.begin(), v.end(), [&](double e) { return e != v[0]; });
    };
    if (!varies(x) || !varies(z)) continue;
    worst_corr = std::max(worst_corr, std::abs(tasks::pearson(x, z) - static_cast<double>(oracle_pearson(x, z))));
    worst_corr = std::max(worst_corr, std::abs(tasks::spearman(x, z) - static_cast<double>(oracle_pearson(
                                                                            oracle_ranks(x), oracle_ranks(z)))));
  }
  const double hand = tasks::mcc({1, 1, 0, 1, 0}, {1, 1, 0, 0, 1});
  const bool ok = exact && worst_corr < 1e-9 && std::abs(hand - 1.0 / 6.0) < 1e-15;
  report(6, "metric oracles", ok,
         fmt::format("MCC/F1 exact on 1000 vectors: {}; correlation max |diff| {:.1e}; MCC hand case {:.17g}",
                     exact ? "yes" : "no", worst_corr, hand));
}

void criterion_probe(const exp::ExperimentConfig& cfg, const model::Backbone& bb, const tasks::Task& task) {
  const RunRecord rec = train::run_strategy(exp::make_plan(cfg, Strategy::LP, task.name, 0), bb, task, cfg.measure);
  const double fc = *rec.feature_change_value("pretrained_final");
  report(7, "linear probe leaves backbone", rec.param_distance_final == 0.0 && fc == 0.0,
         fmt::format("param_distance_final {}, feature_change {}", rec.param_distance_final, fc));
}

// ---- trend suite ------------------------------------------------------------------

class Runs {
 public:
  Runs(const exp::ExperimentConfig& cfg, const model::Backbone& bb) : cfg_(cfg), bb_(bb) {}

  const tasks::Task& task(const std::string& name) {
    auto it = tasks_.find(name);
    if (it == tasks_.end()) it = tasks_.emplace(name, tasks::make_task(name, cfg_.task_seed)).first;
    return it->second;
  }

  // Records of one strategy on one task over the configured seeds, cached.
  const std::vector<RunRecord>& get(Strategy s, const std::string& task_name) {
    return get_plans(fmt::format("{}/{}", to_string(s), task_name), task_name,
                     [&](std::uint64_t seed) { return exp::make_plan(cfg_, s, task_name, seed); });
  }

  const std::vector<RunRecord>& sweep(Strategy s, const std::string& task_name, exp::SweepAxis axis, double value,
                                      exp::SweepMode mode) {
    if (axis == exp::SweepAxis::Stage1Fraction && mode == exp::SweepMode::FixedTotal && value == cfg_.stage1_fraction)
      return get(s, task_name);
    return get_plans(fmt::format("{}/{}/{}/{}/{}", to_string(s), task_name, to_string(axis), to_string(mode), value),
                     task_name,
                     [&](std::uint64_t seed) { return exp::sweep_plan(cfg_, s, task_name, seed, axis, value, mode); });
  }

 private:
  const std::vector<RunRecord>& get_plans(const std::string& key, const std::string& task_name,
                                          const std::function<train::TrainPlan(std::uint64_t)>& make) {
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const auto start = std::chrono::steady_clock::now();
    std::vector<RunRecord> recs;
    for (std::uint64_t seed : cfg_.seeds) recs.push_back(train::run_strategy(make(seed), bb_, task(task_name), cfg_.measure));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::vector<double> metrics;
    for (const auto& r : recs) metrics.push_back(r.final_metric);
    note(fmt::format("ran {} x{} ({:.0f}s): metric {} mean {:.2f}", key, recs.size(), secs, fmt_list(metrics, 2),
                     mean(metrics)));
    return cache_.emplace(key, std::move(recs)).first->second;
  }

  const exp::ExperimentConfig& cfg_;
  const model::Backbone& bb_;
  std::map<std::string, tasks::Task> tasks_;
  std::map<std::string, std::vector<RunRecord>> cache_;
};

std::vector<double> values(const std::vector<RunRecord>& recs, const std::function<double(const RunRecord&)>& f) {
  std::vector<double> out;
  for (const auto& r : recs) out.push_back(f(r));
  return out;
}

double feature(const RunRecord& r, const char* name) { return *r.feature_change_value(name); }

// Final-stage steps until the smoothed loss reaches half the reference loss;
// runs that never reach it count as the full stage length.
double threshold_steps(const RunRecord& r) {
  const auto t = r.final_stage_steps_to_threshold();
  return t ? static_cast<double>(*t) : static_cast<double>(r.final_stage_losses().size());
}

void criterion_drift(Runs& runs) {
  const std::string tp = "topic-pair";
  const auto ft = values(runs.get(Strategy::FT, tp), [](const RunRecord& r) { return feature(r, "pretrained_final"); });
  bool ok = true;
  std::string detail = fmt::format("FT {} mean {:.3f}", fmt_list(ft), mean(ft));
  for (Strategy s : {Strategy::PET_BITFIT, Strategy::PET_LORA, Strategy::PET_PREFIX}) {
    const auto x = values(runs.get(s, tp), [](const RunRecord& r) { return feature(r, "pretrained_final"); });
    int wins = 0;
    for (std::size_t i = 0; i < ft.size(); ++i) wins += ft[i] > x[i];
    const double ratio = mean(ft) / mean(x);
    ok = ok && ratio > 1.1 && wins >= 3;
    detail += fmt::format("; {} mean {:.3f} ratio {:.2f} wins {}/{}", to_string(s), mean(x), ratio, wins, ft.size());
  }
  report(8, "feature drift ordering", ok, detail);
}

void criterion_proximity(Runs& runs) {
  const std::string tp = "topic-pair";
  const auto eh =
      values(runs.get(Strategy::EH_FT_BITFIT, tp), [](const RunRecord& r) { return feature(r, "stage1_final"); });
  const auto lpft = values(runs.get(Strategy::LP_FT, tp), [](const RunRecord& r) { return feature(r, "stage1_final"); });
  report(9, "stage-1 to final proximity", mean(eh) < mean(lpft),
         fmt::format("EH-FT-bitfit {:.3f} vs LP-FT {:.3f}", mean(eh), mean(lpft)));
}

void criterion_distance(Runs& runs) {
  const std::string tp = "topic-pair";
  const auto eh = values(runs.get(Strategy::EH_FT_BITFIT, tp), [](const RunRecord& r) { return r.param_distance_final; });
  const auto ft = values(runs.get(Strategy::FT, tp), [](const RunRecord& r) { return r.param_distance_final; });
  report(10, "parameter distance endpoint", mean(eh) < mean(ft),
         fmt::format("EH-FT-bitfit {:.4f} vs FT {:.4f}", mean(eh), mean(ft)));
}

void criterion_convergence(Runs& runs) {
  const std::string tp = "topic-pair";
  const auto eh = values(runs.get(Strategy::EH_FT_BITFIT, tp), threshold_steps);
  const auto ft = values(runs.get(Strategy::FT, tp), threshold_steps);
  report(11, "stage-2 convergence", mean(eh) < mean(ft),
         fmt::format("steps to 0.5 x reference loss: EH-FT-bitfit {} mean {:.1f} vs FT {} mean {:.1f}", fmt_list(eh, 0),
                     mean(eh), fmt_list(ft, 0), mean(ft)));
}

void criterion_accuracy(Runs& runs, const std::vector<std::string>& task_names) {
  bool ok = true;
  std::string detail;
  for (const auto& t : task_names) {
    const double eh = mean(values(runs.get(Strategy::EH_FT_BITFIT, t), [](const RunRecord& r) { return r.final_metric; }));
    const double ft = mean(values(runs.get(Strategy::FT, t), [](const RunRecord& r) { return r.final_metric; }));
    const bool low_resource = runs.task(t).train.size() == 250;
    ok = ok && eh >= ft - 0.5 && (!low_resource || eh > ft);
    detail += fmt::format("{}{} EH {:.2f} vs FT {:.2f}", detail.empty() ? "" : "; ", t, eh, ft);
  }
  report(12, "accuracy non-regression", ok, detail);
}

void criterion_fraction(Runs& runs) {
  const std::string tp = "topic-pair";
  const std::vector<double> fractions{0.1, 0.3, 0.5, 0.7, 0.9};
  auto sweep = [&](exp::SweepMode mode) {
    std::vector<double> means;
    for (double f : fractions)
      means.push_back(mean(values(runs.sweep(Strategy::EH_FT_BITFIT, tp, exp::SweepAxis::Stage1Fraction, f, mode),
                                  [](const RunRecord& r) { return r.final_metric; })));
    return means;
  };
  const auto total = sweep(exp::SweepMode::FixedTotal);
  const auto stage2 = sweep(exp::SweepMode::FixedStage2);
  const double spread = *std::max_element(stage2.begin(), stage2.end()) - *std::min_element(stage2.begin(), stage2.end());
  report(13, "stage-1 proportion ablation", total.back() < total.front() && spread < 2.0,
         fmt::format("fixed-total {} (0.9 < 0.1: {}); fixed-stage2 {} spread {:.2f} (< 2)", fmt_list(total, 2),
                     total.back() < total.front() ? "yes" : "no", fmt_list(stage2, 2), spread));
}

void criterion_reserve(Runs& runs) {
  const std::string tp = "topic-pair";
  const auto& reserve = runs.get(Strategy::EH_FT_RESERVE_BITFIT, tp);
  bool complete = true;
  for (const auto& r : reserve) complete = complete && r.optimizer_steps == r.plan.total_steps;
  const auto drop_reserve = values(reserve, [](const RunRecord& r) { return r.final_stage_loss_drop(); });
  const auto drop_eh = values(runs.get(Strategy::EH_FT_BITFIT, tp), [](const RunRecord& r) { return r.final_stage_loss_drop(); });
  report(14, "reserve variant", complete && mean(drop_reserve) < mean(drop_eh),
         fmt::format("completed {}; stage-2 loss drop reserve {:.4f} vs EH-FT-bitfit {:.4f}", complete ? "yes" : "no",
                     mean(drop_reserve), mean(drop_eh)));
}

void criterion_rank(Runs& runs) {
  const std::string tp = "topic-pair";
  std::vector<double> means;
  for (int r : {2, 4, 8})
    means.push_back(mean(values(
        runs.sweep(Strategy::EH_FT_LORA, tp, exp::SweepAxis::LoraRank, r, exp::SweepMode::FixedTotal),
        [](const RunRecord& rec) { return rec.final_metric; })));
  const double spread = *std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end());
  report(15, "LoRA rank sweep", spread < 3.0, fmt::format("r=2,4,8 means {} spread {:.2f} (< 3)", fmt_list(means, 2), spread));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: acceptance <desk-config.json> [--property-only] [--strict] [--report FILE]\n");
    return 2;
  }
  bool property_only = false, strict = false;
  for (int i = 2; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--property-only") {
      property_only = true;
    } else if (arg == "--strict") {
      strict = true;
    } else if (arg == "--report" && i + 1 < argc) {
      g_report = std::fopen(argv[++i], "w");
      if (!g_report) {
        std::fprintf(stderr, "acceptance: cannot write %s\n", argv[i]);
        return 2;
      }
    } else {
      std::fprintf(stderr, "acceptance: unknown argument %s\n", arg.c_str());
      return 2;
    }
  }
  const auto start = std::chrono::steady_clock::now();
  try {
    const exp::ExperimentConfig cfg = exp::load_config(argv[1]);
    const train::PretrainResult pre = train::pretrain(cfg.backbone, cfg.pretrain, cfg.pretrain_seed);
    note(fmt::format("pretrained backbone: held-out MLM loss {:.4f} -> {:.4f}", pre.heldout_loss_initial,
                     pre.heldout_loss_final));
    const model::Backbone& bb = pre.backbone;
    const tasks::Task topic = tasks::make_task("topic-pair", cfg.task_seed);

    criterion_gradients();
    criterion_lora(cfg.backbone);
    criterion_partitions(cfg, bb, topic);
    criterion_restore(cfg, bb, topic);
    criterion_budget(cfg, bb, topic);
    criterion_metrics();
    criterion_probe(cfg, bb, topic);

    if (!property_only) {
      Runs runs(cfg, bb);
      criterion_drift(runs);
      criterion_proximity(runs);
      criterion_distance(runs);
      criterion_convergence(runs);
      criterion_accuracy(runs, cfg.tasks);
      criterion_fraction(runs);
      criterion_reserve(runs);
      criterion_rank(runs);
    }
  } catch (const std::exception& e) {
    emit(std::string("FAIL acceptance aborted: ") + e.what());
    return 1;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  emit(fmt::format("{} of {} criteria passed, {:.0f} s", g_reported - g_failed, g_reported, secs));
  if (g_report) std::fclose(g_report);
  return strict && g_failed > 0 ? 1 : 0;
}
