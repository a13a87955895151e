#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ehtune/trainer.hpp"

namespace ehtune::report {

// One row per record: strategy, task, seed, final_metric, metric_name,
// feature_change_pre_final, feature_change_stage1_final, param_distance_final,
// steps_to_threshold, grad_ratio_window, stage1_steps, stage2_steps.
// Empty cells mean "not applicable" or "never reached".
std::string results_csv(const std::vector<train::RunRecord>& records);

// Mean and sample sd of final_metric per (strategy, task).
std::string aggregate_csv(const std::vector<train::RunRecord>& records);

// Mean stage-2 backbone gradient norm (first grad_window steps) of every
// strategy relative to FT on the same task.
std::string grad_ratio_csv(const std::vector<train::RunRecord>& records);

// x,y,label,split
std::string projection_csv(const train::ProjectionRecord& p);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Standalone SVG line chart.
std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

// Every report file keyed by file name.
std::map<std::string, std::string> build_report(const std::vector<train::RunRecord>& records);

}  // namespace ehtune::report
