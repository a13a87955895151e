#include "ehtune/report.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "ehtune/analysis.hpp"
#include "ehtune/error.hpp"

namespace ehtune::report {

namespace {

std::string num(double v) { return fmt::format("{:.6f}", v); }

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : ""; }

std::optional<analysis::GradNormSummary> grad_summary(const train::RunRecord& r) {
  if (r.grad_log.empty()) return std::nullopt;
  return analysis::grad_norm_summary(r.grad_log, r.options.grad_window);
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Mean curve over the records of one (task, strategy) group.
std::vector<std::pair<double, double>> mean_curve(const std::vector<const train::RunRecord*>& group,
                                                  bool distance) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto* r : group) {
    if (distance) {
      for (const auto& d : r->param_distance) {
        auto& [s, n] = acc[d.step];
        s += d.distance;
        ++n;
      }
    } else {
      for (std::size_t i = 0; i < r->train_loss.size(); ++i) {
        auto& [s, n] = acc[static_cast<int>(i)];
        s += r->train_loss[i];
        ++n;
      }
    }
  }
  std::vector<std::pair<double, double>> out;
  for (const auto& [step, sn] : acc) out.emplace_back(step, sn.first / sn.second);
  return out;
}

// Trailing-mean smoothing keeps noisy minibatch losses readable.
std::vector<std::pair<double, double>> smooth(const std::vector<std::pair<double, double>>& pts, int window) {
  std::vector<std::pair<double, double>> out;
  double sum = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    sum += pts[i].second;
    if (i >= static_cast<std::size_t>(window)) sum -= pts[i - static_cast<std::size_t>(window)].second;
    const double n = static_cast<double>(std::min<std::size_t>(i + 1, static_cast<std::size_t>(window)));
    out.emplace_back(pts[i].first, sum / n);
  }
  return out;
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return out;
}

}  // namespace

std::string results_csv(const std::vector<train::RunRecord>& records) {
  std::string out =
      "strategy,task,seed,final_metric,metric_name,feature_change_pre_final,feature_change_stage1_final,"
      "param_distance_final,steps_to_threshold,grad_ratio_window,stage1_steps,stage2_steps\n";
  for (const auto& r : records) {
    const auto stt = r.final_stage_steps_to_threshold(r.options.threshold_window);
    const auto g = grad_summary(r);
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}\n", train::to_string(r.plan.strategy), r.task, r.plan.seed,
                       num(r.final_metric), r.metric_name, opt_num(r.feature_change_value("pretrained_final")),
                       opt_num(r.feature_change_value("stage1_final")), num(r.param_distance_final),
                       stt ? std::to_string(*stt) : "", g ? opt_num(g->ratio) : "", r.stage1_steps, r.stage2_steps);
  }
  return out;
}

std::string aggregate_csv(const std::vector<train::RunRecord>& records) {
  std::string out = "strategy,task,metric_name,n,mean,sd\n";
  for (const auto& row : train::aggregate(records)) {
    out += fmt::format("{},{},{},{},{},{}\n", row.strategy, row.task, row.metric_name, row.n, num(row.mean), num(row.sd));
  }
  return out;
}

std::string grad_ratio_csv(const std::vector<train::RunRecord>& records) {
  // (task, strategy) -> backbone means over seeds
  std::map<std::pair<std::string, std::string>, std::vector<double>> means;
  for (const auto& r : records) {
    if (const auto g = grad_summary(r)) means[{r.task, train::to_string(r.plan.strategy)}].push_back(g->backbone_mean);
  }
  std::string out = "task,strategy,backbone_grad_mean,ft_backbone_grad_mean,ratio_vs_ft\n";
  for (const auto& [key, vals] : means) {
    const double m = train::mean_sd(vals).first;
    const auto ft = means.find({key.first, "ft"});
    std::string ft_cell, ratio;
    if (ft != means.end()) {
      const double f = train::mean_sd(ft->second).first;
      ft_cell = num(f);
      if (f > 0.0) ratio = num(m / f);
    }
    out += fmt::format("{},{},{},{},{}\n", key.first, key.second, num(m), ft_cell, ratio);
  }
  return out;
}

std::string projection_csv(const train::ProjectionRecord& p) {
  std::string out = "x,y,label,split\n";
  for (std::size_t i = 0; i < p.labels.size() && 2 * i + 1 < p.points.size(); ++i) {
    out += fmt::format("{},{},{},dev\n", num(p.points[2 * i]), num(p.points[2 * i + 1]), p.labels[i]);
  }
  return out;
}

std::string line_chart_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  constexpr double W = 640, H = 400, L = 70, R = 170, T = 40, B = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

  std::string svg = fmt::format(
      "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n"
      "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n"
      "<text x=\"{2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">{3}</text>\n",
      W, H, L, xml_escape(title));
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", L, H - B, W - R);
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", L, H - B, T);
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{:.4g}</text>\n",
                       px(xv), H - B + 15, xv);
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{:.4g}</text>\n",
                       L - 5, py(yv) + 3, yv);
  }
  svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
                     (L + W - R) / 2, H - 12, xml_escape(x_label));
  svg += fmt::format("<text x=\"16\" y=\"{:.1f}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1f})\">{}</text>\n",
                     (T + H - B) / 2, (T + H - B) / 2, xml_escape(y_label));
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kColors[k % std::size(kColors)];
    std::string pts;
    for (const auto& [x, y] : series[k].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      pts += fmt::format("{:.2f},{:.2f} ", px(x), py(y));
    }
    if (!pts.empty()) pts.pop_back();
    svg += fmt::format("<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>\n", color, pts);
    const double ly = T + 14.0 * static_cast<double>(k);
    svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"{3}\" stroke-width=\"2\"/>\n", W - R + 10,
                       ly, W - R + 28, color);
    svg += fmt::format("<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n", W - R + 33, ly + 4,
                       xml_escape(series[k].name));
  }
  svg += "</svg>\n";
  return svg;
}

std::map<std::string, std::string> build_report(const std::vector<train::RunRecord>& records) {
  if (records.empty()) fail(ErrorKind::Contract, "report: no run records");
  std::map<std::string, std::string> files;
  files["results.csv"] = results_csv(records);
  files["aggregate.csv"] = aggregate_csv(records);
  files["grad_ratio.csv"] = grad_ratio_csv(records);

  std::map<std::string, std::map<std::string, std::vector<const train::RunRecord*>>> groups;  // task -> strategy
  for (const auto& r : records) {
    groups[r.task][train::to_string(r.plan.strategy)].push_back(&r);
    for (const auto& p : r.projections) {
      files["projections/" + safe_name(r.task) + "__" + safe_name(train::to_string(r.plan.strategy)) + "__seed" +
            std::to_string(r.plan.seed) + "__" + safe_name(p.tag) + ".csv"] = projection_csv(p);
    }
  }
  for (const auto& [task, by_strategy] : groups) {
    std::vector<Series> loss, dist;
    for (const auto& [strategy, group] : by_strategy) {
      loss.push_back({strategy, smooth(mean_curve(group, false), 20)});
      dist.push_back({strategy, mean_curve(group, true)});
    }
    files["charts/" + safe_name(task) + "__loss.svg"] =
        line_chart_svg(task + ": training loss (seed mean, trailing mean 20)", "optimizer step", "loss", loss);
    files["charts/" + safe_name(task) + "__param_distance.svg"] =
        line_chart_svg(task + ": squared distance to pretrained backbone", "optimizer step", "||theta - theta0||^2", dist);
  }
  return files;
}

}  // namespace ehtune::report
