#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehtune/trainer.hpp"

namespace ehtune::exp {

// Optimizer settings by role:
//   finetune  FT, TOPK, and stage 2 of every two-stage strategy
//   probe     LP, and stage 1 of LP-FT
//   pet       BitFit stages (EH-FT stage 1 and PET-only runs)
//   lora      LoRA stages
//   prefix    prefix-tuning stages
struct OptimRoles {
  train::OptimConfig finetune{1e-4, 0.9, 0.98, 1e-6, 0.1, 0.1, 32};
  train::OptimConfig probe{5e-3, 0.9, 0.98, 1e-6, 0.1, 0.1, 32};
  train::OptimConfig pet{5e-3, 0.9, 0.98, 1e-6, 0.1, 0.1, 32};
  train::OptimConfig lora{1e-3, 0.9, 0.98, 1e-6, 0.1, 0.1, 32};
  train::OptimConfig prefix{5e-3, 0.9, 0.98, 1e-6, 0.1, 0.1, 32};
};

struct ExperimentConfig {
  model::BackboneConfig backbone;
  train::PretrainConfig pretrain;
  std::uint64_t pretrain_seed = 0;
  std::vector<std::string> tasks{"topic-pair"};
  std::uint64_t task_seed = 0;
  std::vector<std::string> strategies{"ft", "eh-ft-bitfit"};
  int default_total_steps = 400;
  std::map<std::string, int> total_steps;  // per-task overrides
  double stage1_fraction = 0.10;
  train::PetSettings pet;
  OptimRoles optim;
  train::RunOptions measure;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  std::string output_dir = "runs";

  int steps_for(const std::string& task) const;
  void validate() const;  // Config error
};

// Strict parse: unknown keys and ill-typed values are Config errors naming
// the offending path; absent keys take the defaults above.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);  // Config error names a missing file
// Full echo with every default filled in.
std::string config_json(const ExperimentConfig& cfg);

train::TrainPlan make_plan(const ExperimentConfig& cfg, train::Strategy strategy, const std::string& task,
                           std::uint64_t seed);

// Record body (no wall clock) and its metadata sidecar.
std::string record_json(const train::RunRecord& rec, const ExperimentConfig& cfg);
std::string record_meta_json(const train::RunRecord& rec);
train::RunRecord parse_record(const std::string& json_text);
// "<task>__<strategy>__seed<seed>" (plus a suffix chosen by the caller).
std::string record_stem(const train::RunRecord& rec);

enum class SweepAxis { Stage1Fraction, LoraRank };
enum class SweepMode { FixedTotal, FixedStage2 };

SweepAxis parse_axis(const std::string& name);
SweepMode parse_mode(const std::string& name);
const char* to_string(SweepAxis axis);
const char* to_string(SweepMode mode);

// Smallest total budget whose split at `fraction` leaves exactly `stage2` steps.
int total_for_stage2(int stage2, double fraction);

// Configured strategies the axis affects: two-stage strategies for
// stage1_fraction, LoRA strategies for lora_rank. Config error when none.
std::vector<train::Strategy> sweep_strategies(const ExperimentConfig& cfg, SweepAxis axis);

// Plan of one sweep point. FixedStage2 keeps the stage-2 steps of the base
// split (config total and stage1_fraction) and grows the total instead.
train::TrainPlan sweep_plan(const ExperimentConfig& cfg, train::Strategy strategy, const std::string& task,
                            std::uint64_t seed, SweepAxis axis, double value, SweepMode mode);

struct SweepRow {
  double value = 0.0;
  train::AggregateRow aggregate;
  int stage1_steps = 0;
  int stage2_steps = 0;
  double trainable_fraction = 0.0;  // stage 1 (or only stage)
};

std::string sweep_csv(SweepAxis axis, SweepMode mode, const std::vector<SweepRow>& rows);

}  // namespace ehtune::exp
