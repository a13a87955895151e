#include "ehtune/ehtune.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <limits>
#include <new>
#include <string>

#include "ehtune/checkpoint.hpp"
#include "ehtune/error.hpp"
#include "ehtune/experiment.hpp"
#include "ehtune/report.hpp"
#include "ehtune/trainer.hpp"

using namespace ehtune;

struct eht_config {
  exp::ExperimentConfig cfg;
};

struct eht_backbone {
  model::Backbone bb;
  std::vector<double> loss_curve;
  double heldout_initial = std::numeric_limits<double>::quiet_NaN();
  double heldout_final = std::numeric_limits<double>::quiet_NaN();
};

struct eht_records {
  std::vector<train::RunRecord> runs;
};

namespace {

thread_local std::string g_last_error;

eht_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return EHT_ERR_SHAPE;
    case ErrorKind::Index: return EHT_ERR_INDEX;
    case ErrorKind::Config: return EHT_ERR_CONFIG;
    case ErrorKind::Contract: return EHT_ERR_CONTRACT;
    case ErrorKind::Training: return EHT_ERR_TRAINING;
    case ErrorKind::Checkpoint: return EHT_ERR_CHECKPOINT;
    case ErrorKind::Io: return EHT_ERR_IO;
  }
  return EHT_ERR_INTERNAL;
}

template <typename F>
eht_status guard(F&& fn) {
  try {
    fn();
    g_last_error.clear();
    return EHT_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return EHT_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return EHT_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void write_record(const train::RunRecord& r, const exp::ExperimentConfig& cfg, const char* dir, const char* suffix) {
  const std::string base =
      (std::filesystem::path(dir) / (exp::record_stem(r) + (suffix ? suffix : ""))).string();
  io::write_atomic(base + ".json", exp::record_json(r, cfg));
  io::write_atomic(base + ".meta.json", exp::record_meta_json(r));
}

}  // namespace

extern "C" {

const char* eht_version(void) { return "0.1.0"; }

const char* eht_last_error(void) { return g_last_error.c_str(); }

const char* eht_status_name(eht_status status) {
  switch (status) {
    case EHT_OK: return "ok";
    case EHT_ERR_ARGUMENT: return "argument error";
    case EHT_ERR_CONFIG: return "config error";
    case EHT_ERR_SHAPE: return "shape error";
    case EHT_ERR_INDEX: return "index error";
    case EHT_ERR_CONTRACT: return "contract error";
    case EHT_ERR_TRAINING: return "training error";
    case EHT_ERR_CHECKPOINT: return "checkpoint error";
    case EHT_ERR_IO: return "io error";
    case EHT_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

void eht_string_free(char* s) { std::free(s); }

eht_status eht_config_load(const char* path, eht_config** out) {
  if (!path || !out) return g_last_error = "eht_config_load: null argument", EHT_ERR_ARGUMENT;
  return guard([&] { *out = new eht_config{exp::load_config(path)}; });
}

eht_status eht_config_parse(const char* json_text, eht_config** out) {
  if (!json_text || !out) return g_last_error = "eht_config_parse: null argument", EHT_ERR_ARGUMENT;
  return guard([&] { *out = new eht_config{exp::parse_config(json_text)}; });
}

eht_status eht_config_to_json(const eht_config* cfg, char** out) {
  if (!cfg || !out) return g_last_error = "eht_config_to_json: null argument", EHT_ERR_ARGUMENT;
  return guard([&] { *out = dup_string(exp::config_json(cfg->cfg)); });
}

eht_status eht_config_output_dir(const eht_config* cfg, char** out) {
  if (!cfg || !out) return g_last_error = "eht_config_output_dir: null argument", EHT_ERR_ARGUMENT;
  return guard([&] { *out = dup_string(cfg->cfg.output_dir); });
}

void eht_config_free(eht_config* cfg) { delete cfg; }

eht_status eht_pretrain(const eht_config* cfg, eht_backbone** out) {
  if (!cfg || !out) return g_last_error = "eht_pretrain: null argument", EHT_ERR_ARGUMENT;
  return guard([&] {
    auto res = train::pretrain(cfg->cfg.backbone, cfg->cfg.pretrain, cfg->cfg.pretrain_seed);
    *out = new eht_backbone{std::move(res.backbone), std::move(res.loss_curve), res.heldout_loss_initial,
                            res.heldout_loss_final};
  });
}

eht_status eht_backbone_loss_csv(const eht_backbone* bb, char** out) {
  if (!bb || !out) return g_last_error = "eht_backbone_loss_csv: null argument", EHT_ERR_ARGUMENT;
  return guard([&] {
    std::string csv = "step,loss\n";
    for (std::size_t i = 0; i < bb->loss_curve.size(); ++i) {
      char line[64];
      std::snprintf(line, sizeof line, "%zu,%.6f\n", i, bb->loss_curve[i]);
      csv += line;
    }
    *out = dup_string(csv);
  });
}

eht_status eht_backbone_heldout(const eht_backbone* bb, double* initial, double* final_loss) {
  if (!bb || !initial || !final_loss) return g_last_error = "eht_backbone_heldout: null argument", EHT_ERR_ARGUMENT;
  *initial = bb->heldout_initial;
  *final_loss = bb->heldout_final;
  return EHT_OK;
}

eht_status eht_backbone_save(const eht_backbone* bb, const char* path) {
  if (!bb || !path) return g_last_error = "eht_backbone_save: null argument", EHT_ERR_ARGUMENT;
  return guard([&] { io::save_backbone(path, bb->bb); });
}

eht_status eht_backbone_load(const char* path, const eht_config* expect, eht_backbone** out) {
  if (!path || !out) return g_last_error = "eht_backbone_load: null argument", EHT_ERR_ARGUMENT;
  return guard([&] {
    auto bb = io::load_backbone(path, expect ? &expect->cfg.backbone : nullptr);
    *out = new eht_backbone{std::move(bb), {}};
  });
}

eht_status eht_backbone_param_count(const eht_backbone* bb, size_t* out) {
  if (!bb || !out) return g_last_error = "eht_backbone_param_count: null argument", EHT_ERR_ARGUMENT;
  *out = bb->bb.params.count();
  return EHT_OK;
}

void eht_backbone_free(eht_backbone* bb) { delete bb; }

eht_status eht_run(const eht_config* cfg, const eht_backbone* bb, const char* strategy, const char* task,
                   const uint64_t* seeds, size_t n_seeds, int threads, eht_records** out) {
  if (!cfg || !bb || !strategy || !task || !out || (!seeds && n_seeds)) {
    return g_last_error = "eht_run: null argument", EHT_ERR_ARGUMENT;
  }
  return guard([&] {
    const train::Strategy st = train::parse_strategy(strategy);
    const tasks::Task t = tasks::make_task(task, cfg->cfg.task_seed);
    std::vector<std::uint64_t> seed_list = seeds ? std::vector<std::uint64_t>(seeds, seeds + n_seeds) : cfg->cfg.seeds;
    std::vector<train::Job> jobs;
    for (auto s : seed_list) jobs.push_back({exp::make_plan(cfg->cfg, st, task, s), &t});
    *out = new eht_records{train::run_suite(jobs, bb->bb, cfg->cfg.measure, threads)};
  });
}

eht_status eht_sweep(const eht_config* cfg, const eht_backbone* bb, const char* axis, const char* mode,
                     const double* values, size_t n_values, int threads, eht_records** records, char** sweep_csv) {
  if (!cfg || !bb || !axis || !mode || !records || !sweep_csv || (!values && n_values)) {
    return g_last_error = "eht_sweep: null argument", EHT_ERR_ARGUMENT;
  }
  return guard([&] {
    if (n_values == 0) fail(ErrorKind::Config, "sweep needs at least one value");
    const exp::SweepAxis ax = exp::parse_axis(axis);
    const exp::SweepMode md = exp::parse_mode(mode);
    const auto& c = cfg->cfg;
    std::vector<tasks::Task> task_data;
    for (const auto& name : c.tasks) task_data.push_back(tasks::make_task(name, c.task_seed));
    std::vector<train::Job> jobs;
    std::vector<double> job_value;
    for (std::size_t v = 0; v < n_values; ++v) {
      for (const train::Strategy st : exp::sweep_strategies(c, ax)) {
        for (const auto& t : task_data) {
          for (auto seed : c.seeds) {
            jobs.push_back({exp::sweep_plan(c, st, t.name, seed, ax, values[v], md), &t});
            job_value.push_back(values[v]);
          }
        }
      }
    }
    auto recs = train::run_suite(jobs, bb->bb, c.measure, threads);
    std::vector<exp::SweepRow> rows;
    std::size_t i = 0;
    while (i < recs.size()) {
      std::size_t j = i;
      std::vector<train::RunRecord> group;
      while (j < recs.size() && job_value[j] == job_value[i] && recs[j].plan.strategy == recs[i].plan.strategy &&
             recs[j].task == recs[i].task) {
        group.push_back(recs[j]);
        ++j;
      }
      exp::SweepRow row;
      row.value = job_value[i];
      row.aggregate = train::aggregate(group).front();
      row.stage1_steps = recs[i].stage1_steps;
      row.stage2_steps = recs[i].stage2_steps;
      row.trainable_fraction = recs[i].stages.empty() ? 0.0 : recs[i].stages.front().trainable_fraction;
      rows.push_back(row);
      i = j;
    }
    const std::string csv = exp::sweep_csv(ax, md, rows);
    auto* r = new eht_records{std::move(recs)};
    try {
      *sweep_csv = dup_string(csv);
    } catch (...) {
      delete r;
      throw;
    }
    *records = r;
  });
}

size_t eht_records_count(const eht_records* recs) { return recs ? recs->runs.size() : 0; }

eht_status eht_records_summary(const eht_records* recs, size_t index, eht_run_summary* out) {
  if (!recs || !out) return g_last_error = "eht_records_summary: null argument", EHT_ERR_ARGUMENT;
  if (index >= recs->runs.size()) return g_last_error = "eht_records_summary: index out of range", EHT_ERR_INDEX;
  const auto& r = recs->runs[index];
  out->final_metric = r.final_metric;
  out->param_distance_final = r.param_distance_final;
  out->feature_change_pre_final = r.feature_change_value("pretrained_final").value_or(std::nan(""));
  out->feature_change_stage1_final = r.feature_change_value("stage1_final").value_or(std::nan(""));
  out->stage1_steps = r.stage1_steps;
  out->stage2_steps = r.stage2_steps;
  out->optimizer_steps = r.optimizer_steps;
  out->seed = r.plan.seed;
  return EHT_OK;
}

eht_status eht_records_write(const eht_records* recs, const eht_config* cfg, const char* dir, const char* suffix) {
  if (!recs || !cfg || !dir) return g_last_error = "eht_records_write: null argument", EHT_ERR_ARGUMENT;
  return guard([&] {
    for (const auto& r : recs->runs) write_record(r, cfg->cfg, dir, suffix);
  });
}

eht_status eht_records_write_one(const eht_records* recs, size_t index, const eht_config* cfg, const char* dir,
                                 const char* suffix) {
  if (!recs || !cfg || !dir) return g_last_error = "eht_records_write_one: null argument", EHT_ERR_ARGUMENT;
  if (index >= recs->runs.size()) return g_last_error = "eht_records_write_one: index out of range", EHT_ERR_INDEX;
  return guard([&] { write_record(recs->runs[index], cfg->cfg, dir, suffix); });
}

eht_status eht_records_aggregate_csv(const eht_records* recs, char** out) {
  if (!recs || !out) return g_last_error = "eht_records_aggregate_csv: null argument", EHT_ERR_ARGUMENT;
  return guard([&] { *out = dup_string(report::aggregate_csv(recs->runs)); });
}

void eht_records_free(eht_records* recs) { delete recs; }

eht_status eht_report(const char* runs_dir, const char* out_dir, size_t* n_files) {
  if (!runs_dir || !out_dir) return g_last_error = "eht_report: null argument", EHT_ERR_ARGUMENT;
  return guard([&] {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(runs_dir, ec)) fail(ErrorKind::Config, std::string("runs directory '") + runs_dir + "' does not exist");
    std::vector<fs::path> paths;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
      const std::string name = entry.path().filename().string();
      const auto ends = [&](const std::string& s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
      };
      if (entry.is_regular_file() && ends(".json") && !ends(".meta.json")) paths.push_back(entry.path());
    }
    if (paths.empty()) fail(ErrorKind::Config, std::string("no run records in '") + runs_dir + "'");
    std::sort(paths.begin(), paths.end());
    std::vector<train::RunRecord> recs;
    for (const auto& p : paths) {
      try {
        recs.push_back(exp::parse_record(io::read_file(p.string())));
      } catch (const Error& e) {
        fail(e.kind(), p.string() + ": " + e.what());
      }
    }
    const auto files = report::build_report(recs);
    for (const auto& [name, content] : files) io::write_atomic((fs::path(out_dir) / name).string(), content);
    if (n_files) *n_files = files.size();
  });
}

}  // extern "C"
