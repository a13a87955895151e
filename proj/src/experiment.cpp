#include "ehtune/experiment.hpp"

#include <fmt/format.h>

#include <chrono>
#include <ctime>
#include <set>

#include "ehtune/checkpoint.hpp"
#include "ehtune/error.hpp"
#include "json.hpp"

namespace ehtune::exp {

using nlohmann::json;
using train::OptimConfig;
using train::Strategy;

namespace {

// Reads the keys of one JSON object, rejecting anything it was not asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorKind::Config, where() + " must be an object");
  }

  template <typename T>
  void opt(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const json& v = j_.at(key);
    out = convert<T>(v, path_key(key));
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path_key(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) fail(ErrorKind::Config, "unknown key '" + path_key(key) + "'");
    }
  }

  template <typename T>
  static T convert(const json& v, const std::string& where) {
    auto bad = [&](const char* expected) {
      fail(ErrorKind::Config, "'" + where + "' must be " + expected + ", got " + v.dump());
    };
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) bad("a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) bad("a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) bad("an integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) bad("a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) bad("a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) bad("an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], where + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_optim(const json* j, const std::string& path, OptimConfig& o) {
  if (!j) return;
  Reader r(*j, path);
  r.opt("lr_peak", o.lr_peak);
  r.opt("beta1", o.beta1);
  r.opt("beta2", o.beta2);
  r.opt("eps", o.eps);
  r.opt("weight_decay", o.weight_decay);
  r.opt("warmup_fraction", o.warmup_fraction);
  r.opt("batch_size", o.batch_size);
  r.finish();
}

json optim_json(const OptimConfig& o) {
  return {{"lr_peak", o.lr_peak},         {"beta1", o.beta1},
          {"beta2", o.beta2},             {"eps", o.eps},
          {"weight_decay", o.weight_decay}, {"warmup_fraction", o.warmup_fraction},
          {"batch_size", o.batch_size}};
}

OptimConfig optim_from(const json& j) {
  OptimConfig o;
  read_optim(&j, "optim", o);
  return o;
}

json pet_json(const train::PetSettings& p) {
  return {{"lora_rank", p.lora_rank}, {"lora_alpha", p.lora_alpha}, {"prefix_len", p.prefix_len}, {"topk", p.topk}};
}

void read_pet(const json& j, const std::string& path, train::PetSettings& p) {
  Reader r(j, path);
  r.opt("lora_rank", p.lora_rank);
  r.opt("lora_alpha", p.lora_alpha);
  r.opt("prefix_len", p.prefix_len);
  r.opt("topk", p.topk);
  r.finish();
}

json measure_json(const train::RunOptions& m) {
  return {{"d_mid", m.d_mid},
          {"probe_size", m.probe_size},
          {"distance_every", m.distance_every},
          {"grad_log_steps", m.grad_log_steps},
          {"grad_window", m.grad_window},
          {"projection_size", m.projection_size},
          {"threshold_window", m.threshold_window}};
}

void read_measure(const json& j, const std::string& path, train::RunOptions& m) {
  Reader r(j, path);
  r.opt("d_mid", m.d_mid);
  r.opt("probe_size", m.probe_size);
  r.opt("distance_every", m.distance_every);
  r.opt("grad_log_steps", m.grad_log_steps);
  r.opt("grad_window", m.grad_window);
  r.opt("projection_size", m.projection_size);
  r.opt("threshold_window", m.threshold_window);
  r.finish();
}

json backbone_json(const model::BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"n_layers", c.n_layers},       {"d_ff", c.d_ff},
          {"dropout", c.dropout}};
}

}  // namespace

int ExperimentConfig::steps_for(const std::string& task) const {
  const auto it = total_steps.find(task);
  return it == total_steps.end() ? default_total_steps : it->second;
}

void ExperimentConfig::validate() const {
  auto wrap = [](const char* section, auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      fail(ErrorKind::Config, std::string(section) + ": " + e.what());
    }
  };
  wrap("backbone", [&] { backbone.validate(); });
  wrap("pretrain", [&] { pretrain.validate(); });
  wrap("optim.finetune", [&] { optim.finetune.validate(); });
  wrap("optim.probe", [&] { optim.probe.validate(); });
  wrap("optim.pet", [&] { optim.pet.validate(); });
  wrap("optim.lora", [&] { optim.lora.validate(); });
  wrap("optim.prefix", [&] { optim.prefix.validate(); });
  if (tasks.empty()) fail(ErrorKind::Config, "tasks must not be empty");
  const auto known = tasks::builtin_task_names();
  for (const auto& t : tasks) {
    if (std::find(known.begin(), known.end(), t) == known.end()) {
      std::string valid;
      for (const auto& n : known) valid += (valid.empty() ? "" : ", ") + n;
      fail(ErrorKind::Config, "unknown task '" + t + "' (valid: " + valid + ")");
    }
  }
  for (const auto& [t, _] : total_steps) {
    if (t != "default" && std::find(known.begin(), known.end(), t) == known.end()) {
      fail(ErrorKind::Config, "total_steps names unknown task '" + t + "'");
    }
  }
  for (const auto& s : strategies) train::parse_strategy(s);
  if (default_total_steps < 0) fail(ErrorKind::Config, "total_steps must be >= 0");
  for (const auto& [t, n] : total_steps) {
    if (n < 0) fail(ErrorKind::Config, "total_steps." + t + " must be >= 0");
  }
  if (!(stage1_fraction >= 0.0 && stage1_fraction < 1.0)) fail(ErrorKind::Config, "stage1_fraction must lie in [0, 1)");
  if (pet.lora_rank < 1 || pet.lora_rank > backbone.d_model) fail(ErrorKind::Config, "pet.lora_rank must lie in [1, d_model]");
  if (pet.lora_alpha < 0.0f) fail(ErrorKind::Config, "pet.lora_alpha must be >= 0 (0 means alpha = rank)");
  if (pet.prefix_len < 0 || pet.prefix_len > backbone.max_seq_len) fail(ErrorKind::Config, "pet.prefix_len must lie in [0, max_seq_len]");
  if (pet.topk < 0 || pet.topk > backbone.n_layers) fail(ErrorKind::Config, "pet.topk must lie in [0, n_layers]");
  if (measure.d_mid < 1) fail(ErrorKind::Config, "measure.d_mid must be positive");
  if (measure.probe_size < 1) fail(ErrorKind::Config, "measure.probe_size must be positive");
  if (measure.distance_every < 1) fail(ErrorKind::Config, "measure.distance_every must be positive");
  if (measure.grad_log_steps < 0 || measure.grad_window < 1 || measure.threshold_window < 1 || measure.projection_size < 0) {
    fail(ErrorKind::Config, "measure: window sizes must be positive");
  }
  if (seeds.empty()) fail(ErrorKind::Config, "seeds must not be empty");
  if (output_dir.empty()) fail(ErrorKind::Config, "output_dir must not be empty");
}

ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "");
  if (const json* b = r.sub("backbone")) {
    Reader rb(*b, "backbone");
    rb.opt("vocab_size", c.backbone.vocab_size);
    rb.opt("max_seq_len", c.backbone.max_seq_len);
    rb.opt("d_model", c.backbone.d_model);
    rb.opt("n_heads", c.backbone.n_heads);
    rb.opt("n_layers", c.backbone.n_layers);
    rb.opt("d_ff", c.backbone.d_ff);
    rb.opt("dropout", c.backbone.dropout);
    rb.finish();
  }
  if (const json* p = r.sub("pretrain")) {
    Reader rp(*p, "pretrain");
    rp.opt("steps", c.pretrain.steps);
    rp.opt("corpus_size", c.pretrain.corpus_size);
    rp.opt("heldout_size", c.pretrain.heldout_size);
    rp.opt("seq_len", c.pretrain.seq_len);
    rp.opt("mask_prob", c.pretrain.mask_prob);
    rp.opt("seed", c.pretrain_seed);
    read_optim(rp.sub("optim"), "pretrain.optim", c.pretrain.optim);
    rp.finish();
  }
  r.opt("tasks", c.tasks);
  r.opt("task_seed", c.task_seed);
  r.opt("strategies", c.strategies);
  if (const json* t = r.sub("total_steps")) {
    if (t->is_number_integer()) {
      c.default_total_steps = t->get<int>();
    } else if (t->is_object()) {
      for (const auto& [task, v] : t->items()) {
        const int n = Reader::convert<int>(v, "total_steps." + task);
        if (task == "default") c.default_total_steps = n;
        else c.total_steps[task] = n;
      }
    } else {
      fail(ErrorKind::Config, "'total_steps' must be an integer or an object of per-task integers");
    }
  }
  r.opt("stage1_fraction", c.stage1_fraction);
  if (const json* p = r.sub("pet")) read_pet(*p, "pet", c.pet);
  if (const json* o = r.sub("optim")) {
    Reader ro(*o, "optim");
    read_optim(ro.sub("finetune"), "optim.finetune", c.optim.finetune);
    read_optim(ro.sub("probe"), "optim.probe", c.optim.probe);
    read_optim(ro.sub("pet"), "optim.pet", c.optim.pet);
    read_optim(ro.sub("lora"), "optim.lora", c.optim.lora);
    read_optim(ro.sub("prefix"), "optim.prefix", c.optim.prefix);
    ro.finish();
  }
  if (const json* m = r.sub("measure")) read_measure(*m, "measure", c.measure);
  r.opt("seeds", c.seeds);
  r.opt("output_dir", c.output_dir);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const Error&) {
    fail(ErrorKind::Config, "cannot read config file '" + path + "'");
  }
  try {
    return parse_config(text);
  } catch (const Error& e) {
    fail(ErrorKind::Config, path + ": " + e.what());
  }
}

namespace {

json config_to_json(const ExperimentConfig& c) {
  json steps = {{"default", c.default_total_steps}};
  for (const auto& [t, n] : c.total_steps) steps[t] = n;
  return {
      {"backbone", backbone_json(c.backbone)},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"corpus_size", c.pretrain.corpus_size},
        {"heldout_size", c.pretrain.heldout_size},
        {"seq_len", c.pretrain.seq_len},
        {"mask_prob", c.pretrain.mask_prob},
        {"seed", c.pretrain_seed},
        {"optim", optim_json(c.pretrain.optim)}}},
      {"tasks", c.tasks},
      {"task_seed", c.task_seed},
      {"strategies", c.strategies},
      {"total_steps", steps},
      {"stage1_fraction", c.stage1_fraction},
      {"pet", pet_json(c.pet)},
      {"optim",
       {{"finetune", optim_json(c.optim.finetune)},
        {"probe", optim_json(c.optim.probe)},
        {"pet", optim_json(c.optim.pet)},
        {"lora", optim_json(c.optim.lora)},
        {"prefix", optim_json(c.optim.prefix)}}},
      {"measure", measure_json(c.measure)},
      {"seeds", c.seeds},
      {"output_dir", c.output_dir},
  };
}

}  // namespace

std::string config_json(const ExperimentConfig& cfg) { return config_to_json(cfg).dump(2) + "\n"; }

train::TrainPlan make_plan(const ExperimentConfig& cfg, Strategy strategy, const std::string& task,
                           std::uint64_t seed) {
  train::TrainPlan plan;
  plan.strategy = strategy;
  plan.total_steps = cfg.steps_for(task);
  plan.stage1_fraction = cfg.stage1_fraction;
  plan.seed = seed;
  plan.pet = cfg.pet;
  const train::PetKind kind = train::pet_kind(strategy);
  const OptimConfig& pet_optim = kind == train::PetKind::Prefix ? cfg.optim.prefix
                                 : kind == train::PetKind::Lora ? cfg.optim.lora
                                                                : cfg.optim.pet;
  switch (strategy) {
    case Strategy::FT:
    case Strategy::TOPK:
      plan.stage1_optim = cfg.optim.finetune;
      plan.stage2_optim = cfg.optim.finetune;
      break;
    case Strategy::LP:
      plan.stage1_optim = cfg.optim.probe;
      plan.stage2_optim = cfg.optim.probe;
      break;
    case Strategy::LP_FT:
      plan.stage1_optim = cfg.optim.probe;
      plan.stage2_optim = cfg.optim.finetune;
      break;
    case Strategy::PET_BITFIT:
    case Strategy::PET_LORA:
    case Strategy::PET_PREFIX:
      plan.stage1_optim = pet_optim;
      plan.stage2_optim = pet_optim;
      break;
    default:  // EH-FT family
      plan.stage1_optim = pet_optim;
      plan.stage2_optim = cfg.optim.finetune;
      break;
  }
  return plan;
}

// ---- records ---------------------------------------------------------------

namespace {

json plan_json(const train::TrainPlan& p) {
  return {{"strategy", train::to_string(p.strategy)},
          {"total_steps", p.total_steps},
          {"stage1_fraction", p.stage1_fraction},
          {"stage1_optim", optim_json(p.stage1_optim)},
          {"stage2_optim", optim_json(p.stage2_optim)},
          {"seed", p.seed},
          {"pet", pet_json(p.pet)}};
}

template <typename T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) fail(ErrorKind::Io, std::string("record: missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Io, std::string("record: bad value for '") + key + "'");
  }
}

}  // namespace

std::string record_json(const train::RunRecord& r, const ExperimentConfig& cfg) {
  json stages = json::array();
  for (const auto& s : r.stages) {
    stages.push_back({{"steps", s.steps},
                      {"trainable_fraction", s.trainable_fraction},
                      {"trainable", s.trainable},
                      {"frozen_checks", s.frozen_checks}});
  }
  json evals = json::array();
  for (const auto& e : r.evals) evals.push_back({{"tag", e.tag}, {"step", e.step}, {"metric", e.metric}, {"loss", e.loss}});
  json dist = json::array();
  for (const auto& d : r.param_distance) dist.push_back({{"step", d.step}, {"distance", d.distance}});
  json grads = json::array();
  for (const auto& g : r.grad_log) grads.push_back({{"head", g.head}, {"backbone", g.backbone}});
  json fc = json::array();
  for (const auto& [name, v] : r.feature_change) fc.push_back({{"name", name}, {"value", v}});
  json proj = json::array();
  for (const auto& p : r.projections) {
    proj.push_back({{"tag", p.tag},
                    {"points", p.points},
                    {"labels", p.labels},
                    {"explained", {p.explained[0], p.explained[1]}},
                    {"total_variance", p.total_variance}});
  }
  json j = {{"format_version", 1},
            {"strategy", train::to_string(r.plan.strategy)},
            {"task", r.task},
            {"seed", r.plan.seed},
            {"metric_name", r.metric_name},
            {"plan", plan_json(r.plan)},
            {"options", measure_json(r.options)},
            {"stage1_steps", r.stage1_steps},
            {"stage2_steps", r.stage2_steps},
            {"optimizer_steps", r.optimizer_steps},
            {"stages", stages},
            {"train_loss", r.train_loss},
            {"evals", evals},
            {"param_distance", dist},
            {"grad_log", grads},
            {"feature_change", fc},
            {"projections", proj},
            {"reference_loss", r.reference_loss},
            {"final_metric", r.final_metric},
            {"param_distance_final", r.param_distance_final},
            {"config", config_to_json(cfg)}};
  return j.dump() + "\n";
}

std::string record_meta_json(const train::RunRecord& r) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return json{{"wall_seconds", r.wall_seconds}, {"written_at", stamp}}.dump() + "\n";
}

train::RunRecord parse_record(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, std::string("record is not valid JSON: ") + e.what());
  }
  train::RunRecord r;
  const json& p = j.contains("plan") ? j["plan"] : json();
  r.plan.strategy = train::parse_strategy(field<std::string>(p, "strategy"));
  r.plan.total_steps = field<int>(p, "total_steps");
  r.plan.stage1_fraction = field<double>(p, "stage1_fraction");
  r.plan.stage1_optim = optim_from(p.at("stage1_optim"));
  r.plan.stage2_optim = optim_from(p.at("stage2_optim"));
  r.plan.seed = field<std::uint64_t>(p, "seed");
  read_pet(p.at("pet"), "pet", r.plan.pet);
  if (j.contains("options")) read_measure(j["options"], "options", r.options);
  r.task = field<std::string>(j, "task");
  r.metric_name = field<std::string>(j, "metric_name");
  r.stage1_steps = field<int>(j, "stage1_steps");
  r.stage2_steps = field<int>(j, "stage2_steps");
  r.optimizer_steps = field<int>(j, "optimizer_steps");
  for (const auto& s : field<json>(j, "stages")) {
    r.stages.push_back({field<int>(s, "steps"), field<double>(s, "trainable_fraction"),
                        field<std::vector<std::string>>(s, "trainable"), field<int>(s, "frozen_checks")});
  }
  r.train_loss = field<std::vector<double>>(j, "train_loss");
  for (const auto& e : field<json>(j, "evals")) {
    r.evals.push_back({field<std::string>(e, "tag"), field<int>(e, "step"), field<double>(e, "metric"), field<double>(e, "loss")});
  }
  for (const auto& d : field<json>(j, "param_distance")) r.param_distance.push_back({field<int>(d, "step"), field<double>(d, "distance")});
  for (const auto& g : field<json>(j, "grad_log")) r.grad_log.push_back({field<double>(g, "head"), field<double>(g, "backbone")});
  for (const auto& f : field<json>(j, "feature_change")) r.feature_change.emplace_back(field<std::string>(f, "name"), field<double>(f, "value"));
  for (const auto& q : field<json>(j, "projections")) {
    train::ProjectionRecord pr;
    pr.tag = field<std::string>(q, "tag");
    pr.points = field<std::vector<double>>(q, "points");
    pr.labels = field<std::vector<double>>(q, "labels");
    const auto ex = field<std::vector<double>>(q, "explained");
    if (ex.size() != 2) fail(ErrorKind::Io, "record: 'explained' must hold two values");
    pr.explained[0] = ex[0];
    pr.explained[1] = ex[1];
    pr.total_variance = field<double>(q, "total_variance");
    r.projections.push_back(std::move(pr));
  }
  r.reference_loss = field<double>(j, "reference_loss");
  r.final_metric = field<double>(j, "final_metric");
  r.param_distance_final = field<double>(j, "param_distance_final");
  return r;
}

std::string record_stem(const train::RunRecord& r) {
  return r.task + "__" + train::to_string(r.plan.strategy) + "__seed" + std::to_string(r.plan.seed);
}

// ---- sweeps ----------------------------------------------------------------

SweepAxis parse_axis(const std::string& name) {
  if (name == "stage1_fraction") return SweepAxis::Stage1Fraction;
  if (name == "lora_rank") return SweepAxis::LoraRank;
  fail(ErrorKind::Config, "unknown sweep axis '" + name + "' (valid: stage1_fraction, lora_rank)");
}

SweepMode parse_mode(const std::string& name) {
  if (name == "fixed-total") return SweepMode::FixedTotal;
  if (name == "fixed-stage2") return SweepMode::FixedStage2;
  fail(ErrorKind::Config, "unknown sweep mode '" + name + "' (valid: fixed-total, fixed-stage2)");
}

const char* to_string(SweepAxis axis) { return axis == SweepAxis::Stage1Fraction ? "stage1_fraction" : "lora_rank"; }
const char* to_string(SweepMode mode) { return mode == SweepMode::FixedTotal ? "fixed-total" : "fixed-stage2"; }

int total_for_stage2(int stage2, double fraction) {
  if (stage2 < 0) fail(ErrorKind::Config, "stage-2 steps must be >= 0");
  if (!(fraction >= 0.0 && fraction < 1.0)) fail(ErrorKind::Config, "stage1_fraction must lie in [0, 1)");
  // Stage-2 steps grow by 0 or 1 per extra total step, so the scan lands exactly.
  int total = stage2;
  while (train::split_budget(total, fraction).second < stage2) ++total;
  return total;
}

std::vector<Strategy> sweep_strategies(const ExperimentConfig& cfg, SweepAxis axis) {
  std::vector<Strategy> out;
  for (const auto& name : cfg.strategies) {
    const Strategy s = train::parse_strategy(name);
    const bool affected = axis == SweepAxis::Stage1Fraction ? train::is_two_stage(s)
                                                            : train::pet_kind(s) == train::PetKind::Lora;
    if (affected) out.push_back(s);
  }
  if (out.empty()) {
    fail(ErrorKind::Config, std::string("no configured strategy is affected by sweep axis ") + to_string(axis) +
                                (axis == SweepAxis::Stage1Fraction ? " (needs a two-stage strategy)" : " (needs a LoRA strategy)"));
  }
  return out;
}

train::TrainPlan sweep_plan(const ExperimentConfig& cfg, Strategy strategy, const std::string& task,
                            std::uint64_t seed, SweepAxis axis, double value, SweepMode mode) {
  train::TrainPlan plan = make_plan(cfg, strategy, task, seed);
  if (axis == SweepAxis::LoraRank) {
    const int rank = static_cast<int>(value);
    if (static_cast<double>(rank) != value || rank < 1 || rank > cfg.backbone.d_model) {
      fail(ErrorKind::Config, "lora_rank sweep value " + fmt::format("{}", value) + " is not an integer in [1, d_model]");
    }
    plan.pet.lora_rank = rank;
    return plan;
  }
  if (!(value >= 0.0 && value < 1.0)) {
    fail(ErrorKind::Config, "stage1_fraction sweep value " + fmt::format("{}", value) + " outside [0, 1)");
  }
  if (mode == SweepMode::FixedStage2) {
    const int stage2 = train::split_budget(cfg.steps_for(task), cfg.stage1_fraction).second;
    plan.total_steps = total_for_stage2(stage2, value);
  }
  plan.stage1_fraction = value;
  return plan;
}

std::string sweep_csv(SweepAxis axis, SweepMode mode, const std::vector<SweepRow>& rows) {
  std::string out = "axis,value,mode,strategy,task,metric_name,n,mean,sd,stage1_steps,stage2_steps,trainable_fraction\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{:.6f},{:.6f},{},{},{:.8f}\n", to_string(axis), r.value,
                       axis == SweepAxis::LoraRank ? "-" : to_string(mode), r.aggregate.strategy, r.aggregate.task,
                       r.aggregate.metric_name, r.aggregate.n, r.aggregate.mean, r.aggregate.sd, r.stage1_steps,
                       r.stage2_steps, r.trainable_fraction);
  }
  return out;
}

}  // namespace ehtune::exp
