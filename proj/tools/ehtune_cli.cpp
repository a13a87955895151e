// ehtune command-line driver: pretrain, run, sweep, report.
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ehtune/ehtune.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Failure {
  int code;
};

int exit_code_for(eht_status s) {
  switch (s) {
    case EHT_OK: return kExitOk;
    case EHT_ERR_ARGUMENT:
    case EHT_ERR_CONFIG:
    case EHT_ERR_CHECKPOINT: return kExitUsage;
    default: return kExitRuntime;
  }
}

void check(eht_status s, const char* what) {
  if (s == EHT_OK) return;
  std::fprintf(stderr, "ehtune: %s failed (%s): %s\n", what, eht_status_name(s), eht_last_error());
  throw Failure{exit_code_for(s)};
}

[[noreturn]] void usage_error(const std::string& msg) {
  std::fprintf(stderr, "ehtune: %s\n", msg.c_str());
  throw Failure{kExitUsage};
}

struct ConfigDel { void operator()(eht_config* p) const { eht_config_free(p); } };
struct BackboneDel { void operator()(eht_backbone* p) const { eht_backbone_free(p); } };
struct RecordsDel { void operator()(eht_records* p) const { eht_records_free(p); } };
struct StringDel { void operator()(char* p) const { eht_string_free(p); } };
using ConfigPtr = std::unique_ptr<eht_config, ConfigDel>;
using BackbonePtr = std::unique_ptr<eht_backbone, BackboneDel>;
using RecordsPtr = std::unique_ptr<eht_records, RecordsDel>;
using StringPtr = std::unique_ptr<char, StringDel>;

ConfigPtr load_config(const std::string& path) {
  eht_config* cfg = nullptr;
  check(eht_config_load(path.c_str(), &cfg), "loading config");
  return ConfigPtr(cfg);
}

std::string output_dir(const eht_config* cfg, const std::string& override_dir) {
  if (!override_dir.empty()) return override_dir;
  char* s = nullptr;
  check(eht_config_output_dir(cfg, &s), "reading output_dir");
  return StringPtr(s).get();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
      std::fprintf(stderr, "ehtune: cannot write %s\n", tmp.c_str());
      throw Failure{kExitRuntime};
    }
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::fprintf(stderr, "ehtune: cannot write %s: %s\n", path.string().c_str(), ec.message().c_str());
    throw Failure{kExitRuntime};
  }
}

int thread_count() {
  const char* env = std::getenv("EHTUNE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  errno = 0;
  const long n = std::strtol(env, &end, 10);
  if (errno || *end || n < 1 || n > 1024) usage_error(std::string("EHTUNE_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<int>(n);
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!item.empty()) {
      char* end = nullptr;
      const double v = std::strtod(item.c_str(), &end);
      if (*end || !std::isfinite(v)) usage_error("--values: '" + item + "' is not a number");
      out.push_back(v);
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) usage_error("--values must list at least one value");
  return out;
}

std::string format_value(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

int cmd_pretrain(const std::string& config_path, const std::string& out_path) {
  auto cfg = load_config(config_path);
  eht_backbone* raw = nullptr;
  check(eht_pretrain(cfg.get(), &raw), "pretraining");
  BackbonePtr bb(raw);
  check(eht_backbone_save(bb.get(), out_path.c_str()), "saving checkpoint");
  char* csv = nullptr;
  check(eht_backbone_loss_csv(bb.get(), &csv), "writing loss curve");
  const std::string csv_path = out_path + ".loss.csv";
  write_text(csv_path, StringPtr(csv).get());
  double before = 0.0, after = 0.0;
  check(eht_backbone_heldout(bb.get(), &before, &after), "reading held-out loss");
  std::printf("checkpoint %s\nloss curve %s\nheld-out MLM loss %.4f -> %.4f\n", out_path.c_str(), csv_path.c_str(), before,
              after);
  return kExitOk;
}

BackbonePtr load_backbone(const std::string& path, const eht_config* cfg) {
  eht_backbone* raw = nullptr;
  check(eht_backbone_load(path.c_str(), cfg, &raw), "loading checkpoint");
  return BackbonePtr(raw);
}

BackbonePtr backbone_for(const std::string& path, const eht_config* cfg) {
  if (!path.empty()) return load_backbone(path, cfg);
  eht_backbone* raw = nullptr;
  check(eht_pretrain(cfg, &raw), "pretraining");
  return BackbonePtr(raw);
}

int cmd_run(const std::string& config_path, const std::string& ckpt, const std::string& strategy,
            const std::string& task, int n_seeds, const std::string& out_override) {
  auto cfg = load_config(config_path);
  auto bb = load_backbone(ckpt, cfg.get());
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n_seeds; ++i) seeds.push_back(static_cast<std::uint64_t>(i));
  eht_records* raw = nullptr;
  check(eht_run(cfg.get(), bb.get(), strategy.c_str(), task.c_str(), n_seeds > 0 ? seeds.data() : nullptr,
                seeds.size(), thread_count(), &raw),
        "run");
  RecordsPtr recs(raw);
  const std::filesystem::path out = output_dir(cfg.get(), out_override);
  check(eht_records_write(recs.get(), cfg.get(), (out / "records").string().c_str(), nullptr), "writing records");
  char* agg = nullptr;
  check(eht_records_aggregate_csv(recs.get(), &agg), "aggregating");
  const std::string agg_text = StringPtr(agg).get();
  write_text(out / ("aggregate__" + task + "__" + strategy + ".csv"), agg_text);
  for (std::size_t i = 0; i < eht_records_count(recs.get()); ++i) {
    eht_run_summary s{};
    check(eht_records_summary(recs.get(), i, &s), "summary");
    std::printf("seed %llu  metric %.2f  feature_change %.4f  param_distance %.6f  steps %d+%d\n",
                static_cast<unsigned long long>(s.seed), s.final_metric, s.feature_change_pre_final,
                s.param_distance_final, s.stage1_steps, s.stage2_steps);
  }
  std::printf("%s", agg_text.c_str());
  return kExitOk;
}

int cmd_sweep(const std::string& config_path, const std::string& ckpt, const std::string& axis,
              const std::string& mode, const std::string& values_text, const std::string& out_override) {
  const auto values = parse_values(values_text);
  auto cfg = load_config(config_path);
  auto bb = backbone_for(ckpt, cfg.get());
  eht_records* raw = nullptr;
  char* csv = nullptr;
  check(eht_sweep(cfg.get(), bb.get(), axis.c_str(), mode.c_str(), values.data(), values.size(), thread_count(), &raw,
                  &csv),
        "sweep");
  RecordsPtr recs(raw);
  StringPtr csv_text(csv);
  const std::string tag = axis == "lora_rank" ? axis : axis + "__" + mode;
  const std::filesystem::path out = output_dir(cfg.get(), out_override);
  write_text(out / ("sweep__" + tag + ".csv"), csv_text.get());
  const std::size_t count = eht_records_count(recs.get());
  const std::size_t per_value = count / values.size();
  const std::string record_dir = (out / ("sweep__" + tag)).string();
  for (std::size_t i = 0; i < count; ++i) {
    const std::string suffix = "__" + axis + "_" + format_value(values[i / per_value]);
    check(eht_records_write_one(recs.get(), i, cfg.get(), record_dir.c_str(), suffix.c_str()), "writing records");
  }
  std::printf("%s", csv_text.get());
  return kExitOk;
}

int cmd_report(const std::string& runs, const std::string& out) {
  size_t n = 0;
  check(eht_report(runs.c_str(), out.c_str(), &n), "report");
  std::printf("wrote %zu report files to %s\n", n, out.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Efficient head finetuning experiments at desk scale"};
  app.require_subcommand(1);

  std::string config, out, backbone, strategy, task, axis, mode = "fixed-total", values, runs;
  int seeds = 0;

  auto* pre = app.add_subcommand("pretrain", "Pretrain a backbone with masked-token prediction");
  pre->add_option("--config", config, "Experiment config (JSON)")->required();
  pre->add_option("--out", out, "Checkpoint path")->required();

  auto* run = app.add_subcommand("run", "Run one strategy on one task over the seeds");
  run->add_option("--config", config, "Experiment config (JSON)")->required();
  run->add_option("--backbone", backbone, "Pretrained checkpoint")->required();
  run->add_option("--strategy", strategy, "ft, lp, lp-ft, eh-ft-bitfit, eh-ft-lora, eh-ft-prefix, "
                                          "eh-ft-reserve-bitfit, eh-ft-reserve-lora, topk, bitfit, lora, prefix")
      ->required();
  run->add_option("--task", task, "topic-pair, topic-pair-large, parity, similarity")->required();
  run->add_option("--seeds", seeds, "Use seeds 0..N-1 instead of the config's list")->check(CLI::PositiveNumber);
  run->add_option("--out", out, "Output directory (default: config output_dir)");

  auto* sweep = app.add_subcommand("sweep", "Sweep stage1_fraction or lora_rank");
  sweep->add_option("--config", config, "Experiment config (JSON)")->required();
  sweep->add_option("--backbone", backbone, "Pretrained checkpoint (default: pretrain from the config)");
  sweep->add_option("--axis", axis, "stage1_fraction or lora_rank")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--mode", mode, "fixed-total or fixed-stage2 (stage1_fraction only)");
  sweep->add_option("--out", out, "Output directory (default: config output_dir)");

  auto* rep = app.add_subcommand("report", "Render CSV tables and SVG charts from run records");
  rep->add_option("--runs", runs, "Directory of run records")->required();
  rep->add_option("--out", out, "Report directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*pre) return cmd_pretrain(config, out);
    if (*run) return cmd_run(config, backbone, strategy, task, seeds, out);
    if (*sweep) return cmd_sweep(config, backbone, axis, mode, values, out);
    if (*rep) return cmd_report(runs, out);
  } catch (const Failure& f) {
    return f.code;
  }
  return kExitUsage;
}
