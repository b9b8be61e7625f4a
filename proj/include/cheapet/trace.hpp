#pragma once

// Prediction traces: one JSON object per line, each describing one input's
// local prediction, tap-layer activation, and (optionally) ground truth and
// the remote model's outcome. Traces are the unit of offline evaluation and
// calibration; they carry precomputed model outputs so no model has to run
// during replay.
//
// Known fields: "id", "local_probs", "activation", "true_label",
// "remote_label", "remote_cost_units" (required with remote_label),
// "features". A stored "local_label" is validated against argmax of
// local_probs. Unknown fields are ignored and preserved on rewrite.

#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cheapet/errors.hpp"
#include "cheapet/supervision.hpp"

namespace cheapet {

struct PredictionRecord {
  std::string id;
  std::vector<double> local_probs;
  std::vector<double> activation;
  ClassId local_label = 0;  // always argmax(local_probs), lowest index on ties
  std::optional<ClassId> true_label;
  std::optional<ClassId> remote_label;
  std::optional<double> remote_cost_units;  // present whenever remote_label is
  std::optional<std::vector<double>> features;
  nlohmann::json extra = nlohmann::json::object();  // unknown fields, kept on rewrite

  bool operator==(const PredictionRecord&) const = default;
};

inline void validate_record(const PredictionRecord& record) {
  validate_probability_vector(record.local_probs);
  validate_activation_vector(record.activation);
  if (record.local_label != argmax_class(record.local_probs)) {
    throw ValidationError("record '" + record.id + "': local_label " +
                          std::to_string(record.local_label) +
                          " is not the argmax of local_probs");
  }
  if (record.remote_label.has_value() != record.remote_cost_units.has_value()) {
    throw ValidationError("record '" + record.id +
                          "': remote_label and remote_cost_units must appear together");
  }
  if (record.remote_cost_units && !(*record.remote_cost_units >= 0.0)) {
    throw ValidationError("record '" + record.id + "': remote_cost_units must be >= 0");
  }
  if (record.features) {
    for (double v : *record.features) {
      if (!std::isfinite(v)) {
        throw ValidationError("record '" + record.id + "': non-finite feature value");
      }
    }
  }
}

namespace detail {

inline std::vector<double> number_array(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw ValidationError("field '" + field + "' must be an array of numbers");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw ValidationError("field '" + field + "' must be an array of numbers");
    out.push_back(v.get<double>());  // 32-bit values in the file widen here
  }
  return out;
}

}  // namespace detail

// Parse one trace line. With repair_local_label, a stored local_label that
// disagrees with argmax(local_probs) is replaced instead of rejected.
inline PredictionRecord record_from_json(const nlohmann::json& j, bool repair_local_label = false) {
  if (!j.is_object()) throw ValidationError("trace line is not a JSON object");
  PredictionRecord record;
  if (!j.contains("id") || !j.at("id").is_string()) {
    throw ValidationError("record is missing string field 'id'");
  }
  record.id = j.at("id").get<std::string>();
  if (!j.contains("local_probs")) {
    throw ValidationError("record '" + record.id + "' is missing 'local_probs'");
  }
  record.local_probs = detail::number_array(j.at("local_probs"), "local_probs");
  if (!j.contains("activation")) {
    throw ValidationError("record '" + record.id + "' is missing 'activation'");
  }
  record.activation = detail::number_array(j.at("activation"), "activation");
  validate_probability_vector(record.local_probs);
  validate_activation_vector(record.activation);
  record.local_label = argmax_class(record.local_probs);
  if (j.contains("local_label")) {
    const ClassId stored = j.at("local_label").get<ClassId>();
    if (stored != record.local_label && !repair_local_label) {
      throw ValidationError("record '" + record.id + "': stored local_label " +
                            std::to_string(stored) + " is not the argmax of local_probs");
    }
  }
  if (j.contains("true_label")) record.true_label = j.at("true_label").get<ClassId>();
  if (j.contains("remote_label")) record.remote_label = j.at("remote_label").get<ClassId>();
  if (j.contains("remote_cost_units")) {
    record.remote_cost_units = j.at("remote_cost_units").get<double>();
  }
  if (j.contains("features")) {
    record.features = detail::number_array(j.at("features"), "features");
  }
  for (const auto& [key, value] : j.items()) {
    static const char* known[] = {"id",           "local_probs",  "activation",
                                  "local_label",  "true_label",   "remote_label",
                                  "remote_cost_units", "features"};
    bool is_known = false;
    for (const char* k : known) {
      if (key == k) {
        is_known = true;
        break;
      }
    }
    if (!is_known) record.extra[key] = value;
  }
  validate_record(record);
  return record;
}

inline nlohmann::json record_to_json(const PredictionRecord& record) {
  nlohmann::json j = record.extra.is_object() ? record.extra : nlohmann::json::object();
  j["id"] = record.id;
  j["local_probs"] = record.local_probs;
  j["activation"] = record.activation;
  if (record.true_label) j["true_label"] = *record.true_label;
  if (record.remote_label) j["remote_label"] = *record.remote_label;
  if (record.remote_cost_units) j["remote_cost_units"] = *record.remote_cost_units;
  if (record.features) j["features"] = *record.features;
  return j;
}

// Streaming reader: one record per call, constant memory in trace length.
// Errors carry the offending line number.
class TraceReader {
 public:
  explicit TraceReader(const std::string& path, bool repair_local_label = false)
      : in_(path), path_(path), repair_(repair_local_label) {
    if (!in_) throw IoError("cannot open trace '" + path + "'");
  }

  std::optional<PredictionRecord> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path_ + ":" + std::to_string(line_) + ": " + e.what());
      }
      try {
        return record_from_json(j, repair_);
      } catch (const ValidationError& e) {
        throw ValidationError(path_ + ":" + std::to_string(line_) + ": " + e.what());
      }
    }
    return std::nullopt;
  }

  std::size_t line_number() const { return line_; }

 private:
  std::ifstream in_;
  std::string path_;
  std::size_t line_ = 0;
  bool repair_ = false;
};

inline std::vector<PredictionRecord> read_trace(const std::string& path,
                                                bool repair_local_label = false) {
  TraceReader reader(path, repair_local_label);
  std::vector<PredictionRecord> records;
  while (auto record = reader.next()) records.push_back(std::move(*record));
  return records;
}

inline void write_trace(const std::vector<PredictionRecord>& records, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& record : records) out << record_to_json(record).dump() << '\n';
  if (!out) throw IoError("failed writing trace to '" + path + "'");
}

inline TrustScore trust_score(SupervisorKind kind, const PredictionRecord& record,
                              const MdsaModel* mdsa = nullptr) {
  return trust_score(kind, record.local_probs, record.activation, mdsa);
}

// Score a whole trace with one supervisor.
inline std::vector<TrustScore> score_trace(const std::vector<PredictionRecord>& records,
                                           SupervisorKind kind,
                                           const MdsaModel* mdsa = nullptr) {
  std::vector<TrustScore> scores;
  scores.reserve(records.size());
  for (const auto& record : records) scores.push_back(trust_score(kind, record, mdsa));
  return scores;
}

}  // namespace cheapet
