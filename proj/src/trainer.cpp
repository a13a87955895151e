#include "ehtune/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <map>
#include <thread>
#include <tuple>

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"

namespace ehtune::train {

namespace {

struct StrategyName {
  Strategy strategy;
  const char* name;
};

constexpr StrategyName kStrategies[] = {
    {Strategy::FT, "ft"},
    {Strategy::LP, "lp"},
    {Strategy::LP_FT, "lp-ft"},
    {Strategy::EH_FT_BITFIT, "eh-ft-bitfit"},
    {Strategy::EH_FT_LORA, "eh-ft-lora"},
    {Strategy::EH_FT_PREFIX, "eh-ft-prefix"},
    {Strategy::EH_FT_RESERVE_BITFIT, "eh-ft-reserve-bitfit"},
    {Strategy::EH_FT_RESERVE_LORA, "eh-ft-reserve-lora"},
    {Strategy::TOPK, "topk"},
    {Strategy::PET_BITFIT, "bitfit"},
    {Strategy::PET_LORA, "lora"},
    {Strategy::PET_PREFIX, "prefix"},
};

}  // namespace

const char* to_string(Strategy s) {
  for (const auto& e : kStrategies) {
    if (e.strategy == s) return e.name;
  }
  return "?";
}

std::vector<std::string> strategy_names() {
  std::vector<std::string> out;
  for (const auto& e : kStrategies) out.emplace_back(e.name);
  return out;
}

Strategy parse_strategy(const std::string& name) {
  for (const auto& e : kStrategies) {
    if (name == e.name) return e.strategy;
  }
  std::string valid;
  for (const auto& e : kStrategies) valid += (valid.empty() ? "" : ", ") + std::string(e.name);
  fail(ErrorKind::Config, "unknown strategy '" + name + "' (valid: " + valid + ")");
}

bool is_two_stage(Strategy s) {
  switch (s) {
    case Strategy::LP_FT:
    case Strategy::EH_FT_BITFIT:
    case Strategy::EH_FT_LORA:
    case Strategy::EH_FT_PREFIX:
    case Strategy::EH_FT_RESERVE_BITFIT:
    case Strategy::EH_FT_RESERVE_LORA:
      return true;
    default:
      return false;
  }
}

PetKind pet_kind(Strategy s) {
  switch (s) {
    case Strategy::EH_FT_BITFIT:
    case Strategy::EH_FT_RESERVE_BITFIT:
    case Strategy::PET_BITFIT:
      return PetKind::BitFit;
    case Strategy::EH_FT_LORA:
    case Strategy::EH_FT_RESERVE_LORA:
    case Strategy::PET_LORA:
      return PetKind::Lora;
    case Strategy::EH_FT_PREFIX:
    case Strategy::PET_PREFIX:
      return PetKind::Prefix;
    default:
      return PetKind::None;
  }
}

std::pair<int, int> TrainPlan::stage_steps() const {
  return split_budget(total_steps, is_two_stage(strategy) ? stage1_fraction : 0.0);
}

// ---- RunRecord helpers -----------------------------------------------------

std::optional<double> RunRecord::feature_change_value(const std::string& name) const {
  for (const auto& [k, v] : feature_change) {
    if (k == name) return v;
  }
  return std::nullopt;
}

std::vector<double> RunRecord::final_stage_losses() const {
  const std::size_t start = std::min<std::size_t>(static_cast<std::size_t>(stage1_steps), train_loss.size());
  return {train_loss.begin() + static_cast<std::ptrdiff_t>(start), train_loss.end()};
}

double RunRecord::final_stage_loss_drop(int window) const {
  const auto losses = final_stage_losses();
  if (losses.empty()) return 0.0;
  const std::size_t w = std::min<std::size_t>(losses.size(), static_cast<std::size_t>(std::max(window, 1)));
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    head += losses[i];
    tail += losses[losses.size() - w + i];
  }
  return (head - tail) / static_cast<double>(w);
}

std::optional<int> RunRecord::final_stage_steps_to_threshold(int window) const {
  if (!(reference_loss > 0.0)) return std::nullopt;
  return analysis::steps_to_threshold(final_stage_losses(), 0.5 * reference_loss, window);
}

// ---- batches ---------------------------------------------------------------

namespace {

model::TokenBatch make_batch(const std::vector<tasks::Example>& examples, const std::vector<int>& idx) {
  model::TokenBatch b;
  b.batch = static_cast<int>(idx.size());
  b.seq = static_cast<int>(examples[static_cast<std::size_t>(idx.front())].tokens.size());
  b.ids.reserve(static_cast<std::size_t>(b.batch) * b.seq);
  for (int i : idx) {
    const auto& t = examples[static_cast<std::size_t>(i)].tokens;
    if (static_cast<int>(t.size()) != b.seq) fail(ErrorKind::Shape, "examples in a batch differ in length");
    b.ids.insert(b.ids.end(), t.begin(), t.end());
  }
  return b;
}

std::vector<int> range_indices(int begin, int end) {
  std::vector<int> v;
  for (int i = begin; i < end; ++i) v.push_back(i);
  return v;
}

// Endless stream of epoch-shuffled indices.
class IndexStream {
 public:
  IndexStream(int n, std::uint64_t seed) : n_(n), rng_(seed) {}

  std::vector<int> next(int count) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<int>(out.size()) < count) {
      if (pos_ >= order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_ = range_indices(0, n_);
    for (std::size_t i = order_.size(); i > 1; --i) {
      std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_.uniform_int(static_cast<int>(i)))]);
    }
    pos_ = 0;
  }

  int n_;
  Rng rng_;
  std::vector<int> order_;
  std::size_t pos_ = 0;
};

nc::Var task_loss(nc::Var logits, const tasks::Task& task, const std::vector<tasks::Example>& split,
                  const std::vector<int>& idx) {
  if (task.kind == tasks::TaskKind::Classification) {
    std::vector<int> labels;
    for (int i : idx) labels.push_back(split[static_cast<std::size_t>(i)].label);
    return nc::cross_entropy(logits, labels);
  }
  std::vector<float> targets;
  for (int i : idx) targets.push_back(split[static_cast<std::size_t>(i)].target);
  return nc::mse(logits, targets);
}

double reference_loss(const tasks::Task& task) {
  if (task.kind == tasks::TaskKind::Classification) return std::log(static_cast<double>(task.n_classes));
  double acc = 0.0;
  for (const auto& ex : task.train) acc += static_cast<double>(ex.target) * ex.target;
  return acc / static_cast<double>(task.train.size());
}

std::uint64_t probe_hash(const std::vector<tasks::Example>& examples, int n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int i = 0; i < n; ++i) {
    for (int t : examples[static_cast<std::size_t>(i)].tokens) {
      h ^= static_cast<std::uint64_t>(t) + 1;
      h *= 1099511628211ULL;
    }
    h ^= 0xffULL;
    h *= 1099511628211ULL;
  }
  return h;
}

struct Probe {
  model::TokenBatch batch;
  std::uint64_t hash = 0;
};

analysis::FeatureSnapshot snapshot(const std::string& tag, const pet::Model& m, const Probe& probe) {
  return {tag, probe.hash, model::extract_features(m.backbone, probe.batch, m.attachments())};
}

double squared_norm(const std::vector<float>& g) {
  double s = 0.0;
  for (float x : g) s += static_cast<double>(x) * x;
  return s;
}

struct StageSpec {
  const pet::ParamPartition* partition = nullptr;
  OptimConfig optim;
  int steps = 0;
  std::uint64_t data_seed = 0;
  bool log_grads = false;
  const char* label = "";
};

class StageRunner {
 public:
  StageRunner(pet::Model& m, const tasks::Task& task, const ParamStore& theta0, const RunOptions& opts,
              RunRecord& rec)
      : m_(m), task_(task), theta0_(theta0), opts_(opts), rec_(rec) {}

  void run(const StageSpec& spec) {
    const pet::ParamPartition& part = *spec.partition;
    StageRecord stage;
    stage.steps = spec.steps;
    stage.trainable_fraction = pet::trainable_fraction(part, m_);
    stage.trainable.assign(part.trainable.begin(), part.trainable.end());

    std::vector<NamedParam> params;
    for (const auto& name : part.trainable) params.push_back({name, &m_.tensor(name)});
    for (auto& p : params) p.tensor->zero_grad();

    const auto frozen_before = frozen_hashes(part);
    const int batch = spec.optim.batch_size;
    const int train_n = static_cast<int>(task_.train.size());
    const int epoch_steps = std::max(1, (train_n + batch - 1) / batch);

    AdamW opt(spec.optim);
    IndexStream stream(train_n, spec.data_seed);
    for (int step = 0; step < spec.steps; ++step) {
      const std::vector<int> idx = stream.next(batch);
      const model::TokenBatch tokens = make_batch(task_.train, idx);
      double loss_value;
      {
        nc::Graph g;
        model::Binder binder(g, &part.trainable);
        nc::Var feats = model::forward_features(binder, m_.backbone, tokens, m_.attachments());
        nc::Var logits = model::head_logits(binder, m_.head, feats);
        nc::Var loss = task_loss(logits, task_, task_.train, idx);
        loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) {
          fail(ErrorKind::Training, std::string("non-finite loss in ") + to_string(rec_.plan.strategy) + " " +
                                        spec.label + " at step " + std::to_string(step));
        }
        g.backward(loss);
      }
      if (spec.log_grads && static_cast<int>(rec_.grad_log.size()) < opts_.grad_log_steps) {
        analysis::GradNormEntry e;
        for (const auto& p : params) {
          if (pet::is_head_name(p.name)) e.head += squared_norm(p.tensor->grad);
          else if (pet::is_backbone_name(p.name)) e.backbone += squared_norm(p.tensor->grad);
        }
        e.head = std::sqrt(e.head);
        e.backbone = std::sqrt(e.backbone);
        rec_.grad_log.push_back(e);
      }
      opt.step(params, lr_at(step, spec.steps, spec.optim));
      for (auto& p : params) std::fill(p.tensor->grad.begin(), p.tensor->grad.end(), 0.0f);

      rec_.train_loss.push_back(loss_value);
      ++rec_.optimizer_steps;
      ++global_step_;
      if (opts_.distance_every > 0 && global_step_ % opts_.distance_every == 0) record_distance();
      if ((step + 1) % epoch_steps == 0 || step + 1 == spec.steps) {
        check_frozen(part, frozen_before, spec.label);
        ++stage.frozen_checks;
      }
    }
    for (auto& p : params) {
      p.tensor->grad.clear();
    }
    rec_.stages.push_back(std::move(stage));
  }

  void record_distance() {
    if (!rec_.param_distance.empty() && rec_.param_distance.back().step == global_step_) return;
    rec_.param_distance.push_back({global_step_, analysis::param_distance(m_.backbone.params, theta0_)});
  }

 private:
  std::map<std::string, std::uint64_t> frozen_hashes(const pet::ParamPartition& part) const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& name : part.frozen) out[name] = tensor_hash(m_.tensor(name));
    return out;
  }

  void check_frozen(const pet::ParamPartition& part, const std::map<std::string, std::uint64_t>& before,
                    const char* label) const {
    for (const auto& name : part.frozen) {
      if (tensor_hash(m_.tensor(name)) != before.at(name)) {
        fail(ErrorKind::Contract, std::string("frozen parameter '") + name + "' changed during " + label);
      }
    }
  }

  pet::Model& m_;
  const tasks::Task& task_;
  const ParamStore& theta0_;
  const RunOptions& opts_;
  RunRecord& rec_;
  int global_step_ = 0;
};

ProjectionRecord project(const std::string& tag, const pet::Model& m, const tasks::Task& task, int n) {
  n = std::min<int>(n, static_cast<int>(task.dev.size()));
  ProjectionRecord out;
  out.tag = tag;
  if (n < 3) return out;
  const auto idx = range_indices(0, n);
  const nc::Tensor feats = model::extract_features(m.backbone, make_batch(task.dev, idx), m.attachments());
  const nc::Tensor mid = model::mid_features(m.head, feats);
  analysis::Projection p;
  try {
    p = analysis::pca_project_2d(mid);
  } catch (const Error&) {
    return out;  // degenerate (constant) head features
  }
  out.points = p.points;
  out.explained[0] = p.explained[0];
  out.explained[1] = p.explained[1];
  out.total_variance = p.total_variance;
  for (int i : idx) {
    const auto& ex = task.dev[static_cast<std::size_t>(i)];
    out.labels.push_back(task.kind == tasks::TaskKind::Classification ? ex.label : ex.target);
  }
  return out;
}

void attach_pet(pet::Model& m, PetKind kind, const TrainPlan& plan, pet::ParamPartition& part) {
  switch (kind) {
    case PetKind::BitFit:
      part = pet::apply_bitfit(m);
      break;
    case PetKind::Lora:
      part = pet::attach_lora(m, plan.pet.lora_rank,
                              plan.pet.lora_alpha > 0.0f ? plan.pet.lora_alpha : static_cast<float>(plan.pet.lora_rank),
                              derive_seed(plan.seed, "lora"));
      break;
    case PetKind::Prefix:
      part = pet::attach_prefix(m, plan.pet.prefix_len, derive_seed(plan.seed, "prefix"));
      break;
    case PetKind::None:
      fail(ErrorKind::Config, std::string("strategy ") + to_string(plan.strategy) + " has no PET method");
  }
}

}  // namespace

// ---- evaluation ------------------------------------------------------------

double evaluate(const pet::Model& m, const tasks::Task& task, const std::vector<tasks::Example>& split,
                double* mean_loss) {
  if (split.empty()) fail(ErrorKind::Contract, "evaluate: empty split");
  constexpr int kChunk = 250;
  std::vector<int> preds, labels;
  std::vector<double> scores, targets;
  double loss_sum = 0.0;
  for (int start = 0; start < static_cast<int>(split.size()); start += kChunk) {
    const int end = std::min<int>(start + kChunk, static_cast<int>(split.size()));
    const auto idx = range_indices(start, end);
    nc::Graph g;
    model::Binder binder(g, nullptr);
    nc::Var feats = model::forward_features(binder, m.backbone, make_batch(split, idx), m.attachments());
    nc::Var logits = model::head_logits(binder, m.head, feats);
    loss_sum += static_cast<double>(task_loss(logits, task, split, idx).value()[0]) * (end - start);
    auto lv = logits.value();
    const int c = logits.cols();
    for (int r = 0; r < end - start; ++r) {
      const auto& ex = split[static_cast<std::size_t>(start + r)];
      if (task.kind == tasks::TaskKind::Classification) {
        const float* row = lv.data() + static_cast<std::size_t>(r) * c;
        preds.push_back(static_cast<int>(std::max_element(row, row + c) - row));
        labels.push_back(ex.label);
      } else {
        scores.push_back(lv[static_cast<std::size_t>(r)]);
        targets.push_back(ex.target);
      }
    }
  }
  if (mean_loss) *mean_loss = loss_sum / static_cast<double>(split.size());
  double value = 0.0;
  switch (task.metric) {
    case tasks::Metric::Accuracy: value = tasks::accuracy(preds, labels); break;
    case tasks::Metric::Mcc: value = tasks::mcc(preds, labels); break;
    case tasks::Metric::F1: value = tasks::f1(preds, labels); break;
    case tasks::Metric::Pearson:
    case tasks::Metric::Spearman: {
      // A constant predictor has no defined correlation; score it as 0.
      const bool constant = std::all_of(scores.begin(), scores.end(), [&](double s) { return s == scores.front(); });
      if (constant) value = 0.0;
      else value = task.metric == tasks::Metric::Pearson ? tasks::pearson(scores, targets) : tasks::spearman(scores, targets);
      break;
    }
  }
  return 100.0 * value;
}

// ---- run_strategy ----------------------------------------------------------

RunRecord run_strategy(const TrainPlan& plan, const model::Backbone& pretrained, const tasks::Task& task,
                       const RunOptions& opts, pet::Model* final_model) {
  const auto started = std::chrono::steady_clock::now();
  if (plan.total_steps < 0) fail(ErrorKind::Config, "total_steps must be >= 0");
  plan.stage1_optim.validate();
  plan.stage2_optim.validate();
  if (task.train.empty() || task.dev.empty()) fail(ErrorKind::Config, "task '" + task.name + "' has an empty split");

  RunRecord rec;
  rec.plan = plan;
  rec.options = opts;
  rec.task = task.name;
  rec.metric_name = tasks::to_string(task.metric);
  rec.reference_loss = reference_loss(task);
  const auto [s1, s2] = plan.stage_steps();
  rec.stage1_steps = s1;
  rec.stage2_steps = s2;

  pet::Model m{pretrained, model::build_head({pretrained.config.d_model, opts.d_mid, task.n_classes},
                                             derive_seed(plan.seed, "head")),
               std::nullopt, std::nullopt};
  const ParamStore& theta0 = pretrained.params;

  Probe probe;
  const int probe_n = std::min<int>(opts.probe_size, static_cast<int>(task.train.size()));
  probe.batch = make_batch(task.train, range_indices(0, probe_n));
  probe.hash = probe_hash(task.train, probe_n);
  const auto snap_pre = snapshot("pretrained", m, probe);

  StageRunner runner(m, task, theta0, opts, rec);
  runner.record_distance();

  const Strategy st = plan.strategy;
  pet::ParamPartition final_part;
  if (is_two_stage(st)) {
    pet::ParamPartition part1;
    if (st == Strategy::LP_FT) part1 = pet::probe_partition(m);
    else attach_pet(m, pet_kind(st), plan, part1);
    runner.run({&part1, plan.stage1_optim, s1, derive_seed(plan.seed, "data.stage1"), false, "stage 1"});
    const auto snap_s1 = snapshot("stage1_end", m, probe);
    double loss1 = 0.0;
    const double metric1 = evaluate(m, task, task.dev, &loss1);
    rec.evals.push_back({"stage1_end", s1, metric1, loss1});
    rec.feature_change.emplace_back("pretrained_stage1", analysis::feature_change(snap_pre, snap_s1));

    const bool reserve = st == Strategy::EH_FT_RESERVE_BITFIT || st == Strategy::EH_FT_RESERVE_LORA;
    if (st != Strategy::LP_FT) {
      pet::restore_backbone(m, theta0, reserve ? pet::RestoreMode::Reserve : pet::RestoreMode::Discard);
    }
    const auto snap_restored = snapshot("restored", m, probe);
    rec.feature_change.emplace_back("pretrained_restored", analysis::feature_change(snap_pre, snap_restored));
    final_part = pet::finetune_partition(m);

    rec.projections.push_back(project("final_stage_start", m, task, opts.projection_size));
    runner.run({&final_part, plan.stage2_optim, s2, derive_seed(plan.seed, "data.stage2"), true, "stage 2"});
    const auto snap_final = snapshot("final", m, probe);
    rec.feature_change.emplace_back("stage1_final", analysis::feature_change(snap_s1, snap_final));
    rec.feature_change.emplace_back("pretrained_final", analysis::feature_change(snap_pre, snap_final));
  } else {
    switch (st) {
      case Strategy::FT: final_part = pet::finetune_partition(m); break;
      case Strategy::LP: final_part = pet::probe_partition(m); break;
      case Strategy::TOPK: final_part = pet::apply_topk(m, plan.pet.topk); break;
      default: attach_pet(m, pet_kind(st), plan, final_part); break;
    }
    rec.projections.push_back(project("final_stage_start", m, task, opts.projection_size));
    runner.run({&final_part, plan.stage2_optim, s2, derive_seed(plan.seed, "data.stage2"), true, "training"});
    const auto snap_final = snapshot("final", m, probe);
    rec.feature_change.emplace_back("pretrained_final", analysis::feature_change(snap_pre, snap_final));
  }
  runner.record_distance();

  double loss_final = 0.0;
  rec.final_metric = evaluate(m, task, task.dev, &loss_final);
  rec.evals.push_back({"final", plan.total_steps, rec.final_metric, loss_final});
  rec.param_distance_final = analysis::param_distance(m.backbone.params, theta0);
  rec.projections.push_back(project("final", m, task, opts.projection_size));
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  if (final_model) *final_model = std::move(m);
  return rec;
}

// ---- pretraining -----------------------------------------------------------

void PretrainConfig::validate() const {
  if (steps < 0) fail(ErrorKind::Config, "pretrain: steps must be >= 0");
  if (corpus_size < 2) fail(ErrorKind::Config, "pretrain: corpus_size must be >= 2");
  if (heldout_size < 1 || heldout_size >= corpus_size) fail(ErrorKind::Config, "pretrain: heldout_size must lie in [1, corpus_size)");
  if (!(mask_prob > 0.0 && mask_prob < 1.0)) fail(ErrorKind::Config, "pretrain: mask_prob must lie in (0, 1)");
  optim.validate();
}

namespace {

struct MaskedBatch {
  model::TokenBatch tokens;
  std::vector<int> positions;
  std::vector<int> originals;
};

MaskedBatch mask_sequences(const tasks::Corpus& corpus, const std::vector<int>& idx, double prob, Rng& rng) {
  MaskedBatch mb;
  mb.tokens.batch = static_cast<int>(idx.size());
  mb.tokens.seq = corpus.seq_len;
  for (int i : idx) {
    const auto& s = corpus.sequences[static_cast<std::size_t>(i)];
    mb.tokens.ids.insert(mb.tokens.ids.end(), s.begin(), s.end());
  }
  std::vector<int> content;
  for (std::size_t p = 0; p < mb.tokens.ids.size(); ++p) {
    if (mb.tokens.ids[p] < model::kFirstContentToken) continue;
    content.push_back(static_cast<int>(p));
    if (rng.bernoulli(prob)) mb.positions.push_back(static_cast<int>(p));
  }
  if (mb.positions.empty()) mb.positions.push_back(content[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(content.size())))]);
  for (int p : mb.positions) {
    mb.originals.push_back(mb.tokens.ids[static_cast<std::size_t>(p)]);
    mb.tokens.ids[static_cast<std::size_t>(p)] = model::kMaskToken;
  }
  return mb;
}

tasks::Corpus pretrain_corpus(const model::BackboneConfig& cfg, const PretrainConfig& pc, std::uint64_t seed) {
  if (pc.seq_len > cfg.max_seq_len) fail(ErrorKind::Config, "pretrain: seq_len exceeds max_seq_len");
  tasks::Grammar grammar;
  if (cfg.vocab_size < grammar.vocab_size) {
    fail(ErrorKind::Config, "pretrain: vocab_size must be at least " + std::to_string(grammar.vocab_size));
  }
  return tasks::generate_corpus(grammar, derive_seed(seed, "pretrain.corpus"), pc.corpus_size, pc.seq_len, pc.heldout_size);
}

}  // namespace

double heldout_mlm_loss(const model::Backbone& bb, const tasks::Corpus& corpus, double mask_prob, std::uint64_t seed) {
  Rng rng(seed);
  constexpr int kChunk = 250;
  double total = 0.0;
  std::size_t count = 0;
  const int n = static_cast<int>(corpus.sequences.size());
  for (int start = corpus.train_size; start < n; start += kChunk) {
    const auto idx = range_indices(start, std::min(n, start + kChunk));
    MaskedBatch mb = mask_sequences(corpus, idx, mask_prob, rng);
    nc::Graph g;
    model::Binder binder(g, nullptr);
    const double loss = model::forward_mlm_loss(binder, bb, mb.tokens, mb.positions, mb.originals).value()[0];
    total += loss * static_cast<double>(mb.positions.size());
    count += mb.positions.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

PretrainResult pretrain(const model::BackboneConfig& cfg, const PretrainConfig& pc, std::uint64_t seed) {
  return pretrain(model::build_backbone(cfg, seed), pc, seed);
}

PretrainResult pretrain(model::Backbone bb, const PretrainConfig& pc, std::uint64_t seed) {
  pc.validate();
  const tasks::Corpus corpus = pretrain_corpus(bb.config, pc, seed);
  const std::uint64_t eval_seed = derive_seed(seed, "pretrain.heldout_mask");
  PretrainResult res;
  res.heldout_loss_initial = heldout_mlm_loss(bb, corpus, pc.mask_prob, eval_seed);

  std::set<std::string> trainable;
  std::vector<NamedParam> params;
  for (auto& [name, t] : bb.params) {
    trainable.insert(name);
    params.push_back({name, &t});
  }
  AdamW opt(pc.optim);
  IndexStream stream(corpus.train_size, derive_seed(seed, "pretrain.data"));
  Rng mask_rng(derive_seed(seed, "pretrain.mask"));
  for (int step = 0; step < pc.steps; ++step) {
    MaskedBatch mb = mask_sequences(corpus, stream.next(pc.optim.batch_size), pc.mask_prob, mask_rng);
    double loss_value;
    {
      nc::Graph g;
      model::Binder binder(g, &trainable);
      nc::Var loss = model::forward_mlm_loss(binder, bb, mb.tokens, mb.positions, mb.originals);
      loss_value = loss.value()[0];
      if (!std::isfinite(loss_value)) {
        fail(ErrorKind::Training, "pretraining diverged (non-finite loss) at step " + std::to_string(step));
      }
      g.backward(loss);
    }
    opt.step(params, lr_at(step, pc.steps, pc.optim));
    for (auto& p : params) std::fill(p.tensor->grad.begin(), p.tensor->grad.end(), 0.0f);
    res.loss_curve.push_back(loss_value);
  }
  bb.params.clear_grad();
  res.heldout_loss_final = heldout_mlm_loss(bb, corpus, pc.mask_prob, eval_seed);
  res.backbone = std::move(bb);
  return res;
}

// ---- suites ----------------------------------------------------------------

std::pair<double, double> mean_sd(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& records) {
  std::vector<AggregateRow> rows;
  std::vector<std::vector<double>> values;
  for (const auto& r : records) {
    const std::string strategy = to_string(r.plan.strategy);
    std::size_t i = 0;
    while (i < rows.size() && !(rows[i].strategy == strategy && rows[i].task == r.task)) ++i;
    if (i == rows.size()) {
      rows.push_back({strategy, r.task, r.metric_name, 0, 0.0, 0.0});
      values.emplace_back();
    }
    values[i].push_back(r.final_metric);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    // Sorting makes the aggregate independent of seed order.
    std::sort(values[i].begin(), values[i].end());
    rows[i].n = static_cast<int>(values[i].size());
    std::tie(rows[i].mean, rows[i].sd) = mean_sd(values[i]);
  }
  return rows;
}

std::vector<RunRecord> run_suite(const std::vector<Job>& jobs, const model::Backbone& pretrained,
                                 const RunOptions& opts, int threads) {
  std::vector<RunRecord> out(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        out[i] = run_strategy(jobs[i].plan, pretrained, *jobs[i].task, opts);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace ehtune::train
