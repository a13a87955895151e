#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ehtune/backbone.hpp"
#include "ehtune/head.hpp"

namespace ehtune::pet {

// Backbone + head + optional PET attachments, owned by one training run.
struct Model {
  model::Backbone backbone;
  model::Head head;
  std::optional<model::LoraAdapter> lora;
  std::optional<model::PrefixState> prefix;

  model::Attachments attachments() const;
  // Every parameter under its qualified name (see model::Binder).
  std::vector<std::string> qualified_names() const;
  // Resolves a qualified name to its tensor.
  const nc::Tensor& tensor(const std::string& qualified) const;
  nc::Tensor& tensor(const std::string& qualified);
};

// Split of the model's qualified names into trainable and frozen sets.
struct ParamPartition {
  std::set<std::string> trainable;
  std::set<std::string> frozen;

  bool is_trainable(const std::string& name) const { return trainable.count(name) != 0; }
};

// Head names are "head.*"; adapter names "adapter.*"; everything else is backbone.
bool is_head_name(const std::string& qualified);
bool is_adapter_name(const std::string& qualified);
bool is_backbone_name(const std::string& qualified);

// Builds a partition over the model's current names from a predicate.
// MLM projection parameters are always frozen.
template <typename Pred>
ParamPartition make_partition(const Model& m, Pred trainable) {
  ParamPartition p;
  for (const auto& name : m.qualified_names()) {
    if (!model::is_mlm_param(name) && trainable(name)) p.trainable.insert(name);
    else p.frozen.insert(name);
  }
  return p;
}

// Everything but the MLM projection (includes attached adapters).
ParamPartition finetune_partition(const Model& m);
// Head only.
ParamPartition probe_partition(const Model& m);
// Backbone bias terms (including layer-norm biases) plus the head.
ParamPartition apply_bitfit(const Model& m);
// Attaches rank-r factors to every q/v projection. Trainable: adapter + head.
ParamPartition attach_lora(Model& m, int rank, float alpha, std::uint64_t seed);
// Folds (alpha/r) B A into the q/v weights and drops the adapter.
void merge_lora(Model& m);
// Attaches L key/value prefixes per layer. Trainable: prefix + head.
ParamPartition attach_prefix(Model& m, int length, std::uint64_t seed);
// Top k encoder layers plus the head.
ParamPartition apply_topk(const Model& m, int k);

enum class RestoreMode {
  Discard,  // backbone := snapshot, adapters removed
  Reserve,  // stage-1 parameters are kept as trained
};

// Resets every backbone tensor to `snapshot` (bitwise). Head untouched.
void restore_backbone(Model& m, const ParamStore& snapshot, RestoreMode mode = RestoreMode::Discard);

// (trainable backbone + adapter scalars) / (backbone encoder scalars).
// The head and the MLM projection are excluded from both sides.
double trainable_fraction(const ParamPartition& partition, const Model& m);

std::size_t lora_param_count(const model::BackboneConfig& cfg, int rank);
std::size_t prefix_param_count(const model::BackboneConfig& cfg, int length);

}  // namespace ehtune::pet
