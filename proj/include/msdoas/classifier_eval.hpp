// classifier_eval.hpp - binary-classifier evaluation of a trained scorer
//
// Scores a tracklet test set once, then sweeps a threshold grid: a score of
// at least th predicts a positive. Produces per-threshold confusion counts
// and rates, the argmax-F1 and argmax-accuracy operating points, CSV/SVG
// reports, and the 5x5 train-set x test-set experiment grid.
#pragma once

#include <array>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "msdoas/common.hpp"
#include "msdoas/model.hpp"
#include "msdoas/tracklet.hpp"

namespace msdoas {

struct ConfusionCounts {
  long tp = 0, tn = 0, fp = 0, fn = 0;
  long total() const { return tp + tn + fp + fn; }
};

struct Rates {
  double tpr = 0.0, fpr = 0.0, ppv = 0.0, f1 = 0.0, accuracy = 0.0;
};

struct RocPoint {
  double threshold = 0.0;
  ConfusionCounts counts;
  double tpr = 0.0, fpr = 0.0, ppv = 0.0, f1 = 0.0, accuracy = 0.0;
};

struct EvalReport {
  std::vector<RocPoint> points;  // thresholds strictly increasing
  RocPoint best_f1;
  RocPoint best_accuracy;
  long sample_count = 0;
  std::string set_kind;
};

// prediction = positive iff score >= th; th = 0 is the all-positive endpoint
inline ConfusionCounts confusion(std::span<const double> scores,
                                 std::span<const int> labels, double th) {
  if (scores.size() != labels.size())
    throw DataError("confusion: score/label length mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= th;
    const bool actual = labels[i] == 1;
    if (predicted && actual) ++c.tp;
    else if (predicted && !actual) ++c.fp;
    else if (!predicted && actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Degenerate denominators yield 0, keeping threshold sweeps total.
inline Rates rates(const ConfusionCounts& c) {
  Rates r;
  r.tpr = (c.tp + c.fn) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fn) : 0.0;
  r.fpr = (c.fp + c.tn) > 0 ? static_cast<double>(c.fp) / (c.fp + c.tn) : 0.0;
  r.ppv = (c.tp + c.fp) > 0 ? static_cast<double>(c.tp) / (c.tp + c.fp) : 0.0;
  r.f1 = (r.ppv + r.tpr) > 0.0 ? 2.0 * r.ppv * r.tpr / (r.ppv + r.tpr) : 0.0;
  r.accuracy =
      c.total() > 0 ? static_cast<double>(c.tp + c.tn) / c.total() : 0.0;
  return r;
}

// 0.00, 0.05, ..., 1.00 - the granularity the operating-point tables use
inline std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 20; ++i) grid.push_back(i * 0.05);
  return grid;
}

inline std::pair<std::vector<double>, std::vector<int>> score_set(
    const MsDoasModel& model, std::span<const FeatureTracklet> set) {
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(set.size());
  labels.reserve(set.size());
  std::vector<FeatureVector> history(model.config.memory);
  for (const FeatureTracklet& t : set) {
    if (t.memory() != model.config.memory)
      throw DataError("score_set: tracklet memory " +
                      std::to_string(t.memory()) +
                      " does not match model T=" +
                      std::to_string(model.config.memory));
    for (int i = 0; i < model.config.memory; ++i)
      history[i] = t.components[i + 1].feature;
    scores.push_back(msdoas(model, t.components[0].feature, history));
    labels.push_back(t.label);
  }
  return {std::move(scores), std::move(labels)};
}

// Sweep over precomputed scores. Best points break ties toward the smaller
// threshold.
inline EvalReport roc_sweep(std::span<const double> scores,
                            std::span<const int> labels,
                            const std::vector<double>& thresholds) {
  if (scores.empty()) throw DataError("roc_sweep: empty test set");
  if (thresholds.empty()) throw UsageError("roc_sweep: empty threshold grid");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] < 0.0 || thresholds[i] > 1.0)
      throw UsageError("roc_sweep: thresholds must lie in [0, 1]");
    if (i > 0 && thresholds[i] <= thresholds[i - 1])
      throw UsageError("roc_sweep: thresholds must strictly increase");
  }

  EvalReport report;
  report.sample_count = static_cast<long>(scores.size());
  for (double th : thresholds) {
    RocPoint p;
    p.threshold = th;
    p.counts = confusion(scores, labels, th);
    const Rates r = rates(p.counts);
    p.tpr = r.tpr;
    p.fpr = r.fpr;
    p.ppv = r.ppv;
    p.f1 = r.f1;
    p.accuracy = r.accuracy;
    report.points.push_back(p);
  }
  report.best_f1 = report.points.front();
  report.best_accuracy = report.points.front();
  for (const RocPoint& p : report.points) {
    if (p.f1 > report.best_f1.f1) report.best_f1 = p;
    if (p.accuracy > report.best_accuracy.accuracy) report.best_accuracy = p;
  }
  return report;
}

inline EvalReport roc_sweep(const MsDoasModel& model,
                            std::span<const FeatureTracklet> set,
                            const std::vector<double>& thresholds) {
  const auto [scores, labels] = score_set(model, set);
  return roc_sweep(scores, labels, thresholds);
}

inline EvalReport roc_sweep(const MsDoasModel& model,
                            std::span<const FeatureTracklet> set) {
  return roc_sweep(model, set, default_threshold_grid());
}

// ---------------------------------------------------------------------------
// Experiment grid
// ---------------------------------------------------------------------------

struct GridResult {
  std::array<MsDoasModel, 5> models;                 // one per training set
  std::array<std::array<EvalReport, 5>, 5> reports;  // [train][test]
};

// Trains one model per training set and evaluates each on every test set.
// Per-model init seeds derive from the train seed so the grid is
// reproducible as a whole.
inline GridResult experiment_grid(
    const std::array<std::vector<FeatureTracklet>, 5>& train_sets,
    const std::array<std::vector<FeatureTracklet>, 5>& test_sets,
    const ModelConfig& model_cfg, const TrainConfig& train_cfg) {
  GridResult grid;
  for (int i = 0; i < 5; ++i) {
    TrainConfig cfg_i = train_cfg;
    cfg_i.seed = mix_seed(train_cfg.seed, static_cast<std::uint64_t>(i));
    grid.models[i] = init_model(model_cfg, cfg_i.seed, cfg_i.init_scale);
    train(grid.models[i], train_sets[i], cfg_i);
    for (int j = 0; j < 5; ++j) {
      grid.reports[i][j] = roc_sweep(grid.models[i], test_sets[j]);
      grid.reports[i][j].set_kind = "TS" + std::to_string(j + 1);
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

enum class ReportFormat { csv, svg };

inline void emit_report_csv(const EvalReport& report, const std::string& path) {
  std::string out = "th,TPR,FPR,PPV,F1,A\n";
  for (const RocPoint& p : report.points) {
    out += format_fixed(p.threshold, 6);
    out += ',' + format_fixed(p.tpr, 6);
    out += ',' + format_fixed(p.fpr, 6);
    out += ',' + format_fixed(p.ppv, 6);
    out += ',' + format_fixed(p.f1, 6);
    out += ',' + format_fixed(p.accuracy, 6);
    out += '\n';
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << out;
  if (!f) throw DataError("write failed: " + path);
}

// Self-contained ROC plot: axes, a dashed chance diagonal, and the
// (FPR, TPR) polyline swept from the lowest threshold to the highest.
inline void emit_report_svg(const EvalReport& report, const std::string& path) {
  constexpr int size = 480;
  constexpr double margin = 48.0;
  constexpr double span = size - 2.0 * margin;
  const auto px = [&](double fpr) { return margin + fpr * span; };
  const auto py = [&](double tpr) { return margin + (1.0 - tpr) * span; };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(size) + "\" height=\"" + std::to_string(size) +
         "\" viewBox=\"0 0 " + std::to_string(size) + " " +
         std::to_string(size) + "\">\n";
  svg += "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "  <line x1=\"" + format_fixed(px(0), 1) + "\" y1=\"" +
         format_fixed(py(0), 1) + "\" x2=\"" + format_fixed(px(1), 1) +
         "\" y2=\"" + format_fixed(py(0), 1) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "  <line x1=\"" + format_fixed(px(0), 1) + "\" y1=\"" +
         format_fixed(py(0), 1) + "\" x2=\"" + format_fixed(px(0), 1) +
         "\" y2=\"" + format_fixed(py(1), 1) +
         "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  svg += "  <line x1=\"" + format_fixed(px(0), 1) + "\" y1=\"" +
         format_fixed(py(0), 1) + "\" x2=\"" + format_fixed(px(1), 1) +
         "\" y2=\"" + format_fixed(py(1), 1) +
         "\" stroke=\"grey\" stroke-width=\"1\" stroke-dasharray=\"4 4\"/>\n";

  std::string points;
  for (auto it = report.points.rbegin(); it != report.points.rend(); ++it) {
    points += format_fixed(px(it->fpr), 2) + "," +
              format_fixed(py(it->tpr), 2) + " ";
  }
  svg += "  <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" "
         "points=\"" + points + "\"/>\n";
  svg += "  <text x=\"" + format_fixed(size / 2.0, 1) + "\" y=\"" +
         format_fixed(size - 12.0, 1) +
         "\" text-anchor=\"middle\" font-size=\"14\">FPR</text>\n";
  svg += "  <text x=\"16\" y=\"" + format_fixed(size / 2.0, 1) +
         "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 "
         "16 " + format_fixed(size / 2.0, 1) + ")\">TPR</text>\n";
  svg += "</svg>\n";

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  f << svg;
  if (!f) throw DataError("write failed: " + path);
}

inline void emit_report(const EvalReport& report, const std::string& path,
                        ReportFormat format) {
  if (format == ReportFormat::csv) emit_report_csv(report, path);
  else emit_report_svg(report, path);
}

}  // namespace msdoas
