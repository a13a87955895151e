#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ehtune/analysis.hpp"
#include "ehtune/backbone.hpp"
#include "ehtune/optim.hpp"
#include "ehtune/pet.hpp"
#include "ehtune/tasks.hpp"

namespace ehtune::train {

enum class Strategy {
  FT,
  LP,
  LP_FT,
  EH_FT_BITFIT,
  EH_FT_LORA,
  EH_FT_PREFIX,
  EH_FT_RESERVE_BITFIT,
  EH_FT_RESERVE_LORA,
  TOPK,
  // Parameter-efficient tuning alone (single stage).
  PET_BITFIT,
  PET_LORA,
  PET_PREFIX,
};

const char* to_string(Strategy s);
Strategy parse_strategy(const std::string& name);  // Config error listing valid names
std::vector<std::string> strategy_names();
bool is_two_stage(Strategy s);

enum class PetKind { None, BitFit, Lora, Prefix };
// PET method used in stage 1 (two-stage) or in the only stage (PET_*).
PetKind pet_kind(Strategy s);

struct PetSettings {
  int lora_rank = 8;
  float lora_alpha = 0.0f;  // 0: alpha = rank (scale 1)
  int prefix_len = 8;
  int topk = 1;
};

// Head width plus measurement knobs (the latter never affect optimization).
struct RunOptions {
  int d_mid = 256;
  int probe_size = 256;
  int distance_every = 10;
  int grad_log_steps = 50;
  int projection_size = 200;
  int threshold_window = 20;
  int grad_window = 10;  // stage-2 steps averaged by grad_norm_summary
};

struct TrainPlan {
  Strategy strategy = Strategy::FT;
  int total_steps = 0;
  double stage1_fraction = 0.10;
  OptimConfig stage1_optim;
  // Optimizer of stage 2, or of the only stage of single-stage strategies.
  OptimConfig stage2_optim;
  std::uint64_t seed = 0;
  PetSettings pet;

  // Budget split honoring the single-stage rule (fraction treated as 0).
  std::pair<int, int> stage_steps() const;
};

struct EvalPoint {
  std::string tag;
  int step = 0;
  double metric = 0.0;  // points (x100)
  double loss = 0.0;
};

struct DistancePoint {
  int step = 0;
  double distance = 0.0;
};

struct ProjectionRecord {
  std::string tag;
  std::vector<double> points;  // n x 2
  std::vector<double> labels;  // class id or regression target
  double explained[2] = {0.0, 0.0};
  double total_variance = 0.0;
};

struct StageRecord {
  int steps = 0;
  double trainable_fraction = 0.0;
  std::vector<std::string> trainable;  // sorted
  int frozen_checks = 0;               // per-epoch frozen-hash comparisons performed
};

// Everything measured by one run. Enough to regenerate every report.
struct RunRecord {
  TrainPlan plan;
  RunOptions options;
  std::string task;
  std::string metric_name;
  int stage1_steps = 0;
  int stage2_steps = 0;
  int optimizer_steps = 0;
  std::vector<StageRecord> stages;
  std::vector<double> train_loss;  // one entry per optimizer step, both stages
  std::vector<EvalPoint> evals;
  std::vector<DistancePoint> param_distance;  // ||θ_f - θ_f0||^2 over steps
  std::vector<analysis::GradNormEntry> grad_log;  // first steps of the final stage
  // Named feature_change values: pretrained_final, stage1_final,
  // pretrained_stage1, pretrained_restored.
  std::vector<std::pair<std::string, double>> feature_change;
  std::vector<ProjectionRecord> projections;
  double reference_loss = 0.0;  // loss of the uninformative predictor
  double final_metric = 0.0;    // points
  double param_distance_final = 0.0;
  double wall_seconds = 0.0;    // not serialized into the record body

  std::optional<double> feature_change_value(const std::string& name) const;
  // Losses of the final (or only) stage.
  std::vector<double> final_stage_losses() const;
  // Mean of the first `window` minus mean of the last `window` stage losses.
  double final_stage_loss_drop(int window = 20) const;
  // steps_to_threshold over the final stage at tau = 0.5 * reference_loss.
  std::optional<int> final_stage_steps_to_threshold(int window = 20) const;
};

struct PretrainConfig {
  int steps = 3000;
  int corpus_size = 20000;
  int heldout_size = 1000;
  int seq_len = 16;
  double mask_prob = 0.15;
  OptimConfig optim{1e-3, 0.9, 0.98, 1e-6, 0.01, 0.06, 32};

  void validate() const;
};

struct PretrainResult {
  model::Backbone backbone;  // θ_f0
  std::vector<double> loss_curve;
  double heldout_loss_initial = 0.0;
  double heldout_loss_final = 0.0;
};

// Masked-token pretraining from build_backbone(cfg, seed).
PretrainResult pretrain(const model::BackboneConfig& cfg, const PretrainConfig& pc, std::uint64_t seed);

// Continues pretraining an existing backbone.
PretrainResult pretrain(model::Backbone bb, const PretrainConfig& pc, std::uint64_t seed);

// Held-out MLM loss with a fixed masking pattern.
double heldout_mlm_loss(const model::Backbone& bb, const tasks::Corpus& corpus, double mask_prob, std::uint64_t seed);

// Executes one strategy end to end from the pretrained snapshot. When
// `final_model` is given it receives the trained model.
RunRecord run_strategy(const TrainPlan& plan, const model::Backbone& pretrained, const tasks::Task& task,
                       const RunOptions& opts = {}, pet::Model* final_model = nullptr);

// Dev-set metric in points for the model as it stands.
double evaluate(const pet::Model& m, const tasks::Task& task, const std::vector<tasks::Example>& split,
                double* mean_loss = nullptr);

struct AggregateRow {
  std::string strategy;
  std::string task;
  std::string metric_name;
  int n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single seed
};

// Mean and standard deviation of a statistic.
std::pair<double, double> mean_sd(const std::vector<double>& xs);

// Groups by (strategy, task) in first-seen order.
std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& records);

struct Job {
  TrainPlan plan;
  const tasks::Task* task = nullptr;
};

// Runs jobs on up to `threads` workers; results are returned in job order.
std::vector<RunRecord> run_suite(const std::vector<Job>& jobs, const model::Backbone& pretrained,
                                 const RunOptions& opts, int threads = 1);

}  // namespace ehtune::train
