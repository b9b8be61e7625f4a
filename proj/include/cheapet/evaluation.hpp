#pragma once

// Offline measurement over a labeled trace: route each record by its trust
// score, score the combined system (local labels where trusted, remote
// labels elsewhere), and sweep the threshold across every distinct routing
// partition to produce the cost-accuracy curve.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "cheapet/errors.hpp"
#include "cheapet/routing.hpp"
#include "cheapet/trace.hpp"

namespace cheapet {

struct CurvePoint {
  double forward_fraction = 0.0;
  double system_accuracy = 0.0;
  double cost_saving = 0.0;
  double threshold = 0.0;
  std::int64_t n_local = 0;
  std::int64_t n_remote = 0;

  bool operator==(const CurvePoint&) const = default;
};

struct SystemEvaluation {
  double accuracy = 0.0;
  double forward_fraction = 0.0;
  double cost_saving = 0.0;
  std::int64_t n_local = 0;
  std::int64_t n_remote = 0;
};

struct EvaluationReport {
  std::vector<CurvePoint> curve;  // ordered by forward_fraction
  double local_only_accuracy = 0.0;
  double remote_only_accuracy = 0.0;
  SupervisorKind supervisor_kind = SupervisorKind::SM;
  std::string trace_id;
  // Cheapest point whose accuracy is at least the remote-only accuracy, and
  // the maximum-accuracy point (smallest fraction among ties).
  std::size_t min_match_remote_index = 0;
  std::size_t argmax_accuracy_index = 0;
};

namespace detail {

inline void require_labels(const std::vector<PredictionRecord>& records,
                           const std::vector<TrustScore>& scores,
                           bool allow_missing_remote = false) {
  if (records.empty()) throw ValidationError("evaluation requires a non-empty trace");
  if (records.size() != scores.size()) {
    throw ValidationError("trace has " + std::to_string(records.size()) + " records but " +
                          std::to_string(scores.size()) + " scores");
  }
  for (const auto& record : records) {
    if (!record.true_label) {
      throw ValidationError("record '" + record.id + "' has no true_label");
    }
    if (!record.remote_label && !allow_missing_remote) {
      throw ValidationError("record '" + record.id + "' has no remote_label");
    }
  }
}

}  // namespace detail

// Accuracy, forwarding fraction and cost saving of the system at one
// threshold. Cost saving is relative to forwarding every input: uniform
// cost counts requests, otherwise each record's remote_cost_units weigh it.
// allow_missing_remote admits records without a remote answer; forwarding
// such a record counts as incorrect.
inline SystemEvaluation system_accuracy(const std::vector<PredictionRecord>& records,
                                        const std::vector<TrustScore>& scores,
                                        double threshold,
                                        bool uniform_cost = true,
                                        bool allow_missing_remote = false) {
  detail::require_labels(records, scores, allow_missing_remote);
  const std::size_t n = records.size();
  std::int64_t correct = 0;
  std::int64_t n_remote = 0;
  double forwarded_cost = 0.0;
  double total_cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const PredictionRecord& record = records[i];
    const bool trusted = scores[i].value >= threshold;
    if (trusted) {
      if (record.local_label == *record.true_label) ++correct;
    } else if (record.remote_label && *record.remote_label == *record.true_label) {
      ++correct;
    }
    const double cost = record.remote_cost_units.value_or(0.0);
    total_cost += cost;
    if (!trusted) {
      ++n_remote;
      forwarded_cost += cost;
    }
  }
  SystemEvaluation eval;
  eval.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  eval.forward_fraction = static_cast<double>(n_remote) / static_cast<double>(n);
  eval.n_remote = n_remote;
  eval.n_local = static_cast<std::int64_t>(n) - n_remote;
  if (uniform_cost) {
    eval.cost_saving = 1.0 - eval.forward_fraction;
  } else {
    eval.cost_saving = total_cost > 0.0 ? 1.0 - forwarded_cost / total_cost : 1.0;
  }
  return eval;
}

// Evaluate every distinct routing partition: sorted-score cut points plus
// the forward-nothing and forward-everything extremes. With N distinct
// scores this is exactly N+1 points; tied scores collapse the partitions
// they cannot separate.
inline EvaluationReport sweep_curve(const std::vector<PredictionRecord>& records,
                                    const std::vector<TrustScore>& scores,
                                    bool uniform_cost = true,
                                    SupervisorKind supervisor_kind = SupervisorKind::SM,
                                    std::string trace_id = {},
                                    bool allow_missing_remote = false) {
  detail::require_labels(records, scores, allow_missing_remote);
  const std::size_t n = records.size();

  std::vector<double> sorted;
  sorted.reserve(n);
  for (const auto& s : scores) {
    if (!std::isfinite(s.value)) throw ValidationError("sweep_curve: non-finite trust score");
    sorted.push_back(s.value);
  }
  std::sort(sorted.begin(), sorted.end());

  std::vector<double> thresholds;
  thresholds.push_back(sorted.front());  // forwards nothing
  for (std::size_t c = 1; c < n; ++c) {
    if (sorted[c - 1] < sorted[c]) thresholds.push_back(sorted[c]);
  }
  thresholds.push_back(
      std::nextafter(sorted.back(), std::numeric_limits<double>::infinity()));  // forwards all

  EvaluationReport report;
  report.supervisor_kind = supervisor_kind;
  report.trace_id = std::move(trace_id);
  std::int64_t local_correct = 0;
  std::int64_t remote_correct = 0;
  for (const auto& record : records) {
    if (record.local_label == *record.true_label) ++local_correct;
    if (record.remote_label && *record.remote_label == *record.true_label) ++remote_correct;
  }
  report.local_only_accuracy = static_cast<double>(local_correct) / static_cast<double>(n);
  report.remote_only_accuracy = static_cast<double>(remote_correct) / static_cast<double>(n);

  for (double threshold : thresholds) {
    const SystemEvaluation eval =
        system_accuracy(records, scores, threshold, uniform_cost, allow_missing_remote);
    report.curve.push_back(CurvePoint{eval.forward_fraction, eval.accuracy, eval.cost_saving,
                                      threshold, eval.n_local, eval.n_remote});
  }

  report.argmax_accuracy_index = 0;
  for (std::size_t i = 1; i < report.curve.size(); ++i) {
    if (report.curve[i].system_accuracy > report.curve[report.argmax_accuracy_index].system_accuracy) {
      report.argmax_accuracy_index = i;
    }
  }
  report.min_match_remote_index = report.curve.size() - 1;
  for (std::size_t i = 0; i < report.curve.size(); ++i) {
    if (report.curve[i].system_accuracy >= report.remote_only_accuracy) {
      report.min_match_remote_index = i;
      break;
    }
  }
  return report;
}

enum class ReportFormat { Csv, Jsonl };

inline ReportFormat report_format_from_string(const std::string& name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "jsonl") return ReportFormat::Jsonl;
  throw ValidationError("unknown report format '" + name + "' (expected csv or jsonl)");
}

namespace detail {

inline void require_emittable(const EvaluationReport& report) {
  if (report.curve.size() < 2) {
    throw ValidationError("report curve must hold both endpoints (>= 2 points), has " +
                          std::to_string(report.curve.size()));
  }
}

}  // namespace detail

inline void write_report_csv(const EvaluationReport& report, std::ostream& out) {
  detail::require_emittable(report);
  out << "forward_fraction,system_accuracy,cost_saving,threshold,n_local,n_remote\n";
  char line[256];
  for (const CurvePoint& p : report.curve) {
    std::snprintf(line, sizeof(line), "%.6f,%.6f,%.6f,%.6f,%lld,%lld\n", p.forward_fraction,
                  p.system_accuracy, p.cost_saving, p.threshold,
                  static_cast<long long>(p.n_local), static_cast<long long>(p.n_remote));
    out << line;
  }
}

inline nlohmann::json curve_point_to_json(const CurvePoint& p) {
  return nlohmann::json{{"forward_fraction", p.forward_fraction},
                        {"system_accuracy", p.system_accuracy},
                        {"cost_saving", p.cost_saving},
                        {"threshold", p.threshold},
                        {"n_local", p.n_local},
                        {"n_remote", p.n_remote}};
}

inline void write_report_jsonl(const EvaluationReport& report, std::ostream& out) {
  detail::require_emittable(report);
  for (const CurvePoint& p : report.curve) out << curve_point_to_json(p).dump() << '\n';
}

inline void emit_report(const EvaluationReport& report, ReportFormat format,
                        const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  if (format == ReportFormat::Csv) {
    write_report_csv(report, out);
  } else {
    write_report_jsonl(report, out);
  }
  if (!out) throw IoError("failed writing report to '" + path + "'");
}

// Rebuild a report from a JSONL curve file. Endpoint accuracies are the
// curve's own endpoints (they are equal by construction on write);
// supervisor kind and trace id are not stored in the format and must be
// supplied by the caller when they matter.
inline EvaluationReport read_report_jsonl(const std::string& path,
                                          SupervisorKind supervisor_kind = SupervisorKind::SM,
                                          std::string trace_id = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report '" + path + "'");
  EvaluationReport report;
  report.supervisor_kind = supervisor_kind;
  report.trace_id = std::move(trace_id);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      CurvePoint p;
      p.forward_fraction = j.at("forward_fraction").get<double>();
      p.system_accuracy = j.at("system_accuracy").get<double>();
      p.cost_saving = j.at("cost_saving").get<double>();
      p.threshold = j.at("threshold").get<double>();
      p.n_local = j.at("n_local").get<std::int64_t>();
      p.n_remote = j.at("n_remote").get<std::int64_t>();
      report.curve.push_back(p);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  detail::require_emittable(report);
  report.local_only_accuracy = report.curve.front().system_accuracy;
  report.remote_only_accuracy = report.curve.back().system_accuracy;
  report.argmax_accuracy_index = 0;
  for (std::size_t i = 1; i < report.curve.size(); ++i) {
    if (report.curve[i].system_accuracy > report.curve[report.argmax_accuracy_index].system_accuracy) {
      report.argmax_accuracy_index = i;
    }
  }
  report.min_match_remote_index = report.curve.size() - 1;
  for (std::size_t i = 0; i < report.curve.size(); ++i) {
    if (report.curve[i].system_accuracy >= report.remote_only_accuracy) {
      report.min_match_remote_index = i;
      break;
    }
  }
  return report;
}

}  // namespace cheapet
