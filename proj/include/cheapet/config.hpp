#pragma once

// Gateway configuration. Files use a small TOML subset:
//
//   # comment
//   [section]
//   key = "string"        # or  key = 12  /  key = 0.5  /  key = true
//
// Every key in the file must belong to the known schema; typos fail fast.
// Any value can be overridden through the environment as
// CHEAPET_<SECTION>_<KEY> (uppercase), e.g. CHEAPET_REMOTE_BASE_URL.

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "cheapet/errors.hpp"
#include "cheapet/remote_client.hpp"
#include "cheapet/supervision.hpp"

namespace cheapet {

enum class RemoteFailurePolicy { kLocalFallback, kError };

inline RemoteFailurePolicy remote_failure_policy_from_string(const std::string& s) {
  if (s == "local_fallback") return RemoteFailurePolicy::kLocalFallback;
  if (s == "error") return RemoteFailurePolicy::kError;
  throw ConfigError("unknown remote_failure_policy '" + s +
                    "' (expected 'local_fallback' or 'error')");
}

inline std::string to_string(RemoteFailurePolicy p) {
  return p == RemoteFailurePolicy::kLocalFallback ? "local_fallback" : "error";
}

struct GatewayConfig {
  std::string listen_address = "127.0.0.1:8080";
  SupervisorKind supervisor_kind = SupervisorKind::SM;
  std::string local_model_path;
  std::string mdsa_model_path;

  // Either a fixed threshold or "auto", in which case the gateway calibrates
  // one at startup from calibration_trace_path.
  std::optional<double> threshold;
  std::optional<double> target_forward_fraction;
  std::string calibration_trace_path;

  bool adaptation_enabled = false;
  RemoteFailurePolicy remote_failure_policy = RemoteFailurePolicy::kLocalFallback;
  int ledger_report_interval_s = 0;  // 0 disables the periodic report
  std::string currency_unit = "USD";

  RemoteEndpointConfig remote;

  bool auto_threshold() const { return !threshold.has_value(); }

  void validate() const {
    if (local_model_path.empty()) throw ConfigError("gateway.local_model_path is required");
    if (listen_address.empty()) throw ConfigError("gateway.listen_address must not be empty");
    if (ledger_report_interval_s < 0) {
      throw ConfigError("gateway.ledger_report_interval_s must be >= 0");
    }
    if (supervisor_kind == SupervisorKind::MDSA && mdsa_model_path.empty()) {
      throw ConfigError("gateway.mdsa_model_path is required when supervisor_kind is 'mdsa'");
    }
    if (auto_threshold()) {
      if (!target_forward_fraction) {
        throw ConfigError(
            "gateway.threshold = \"auto\" requires gateway.target_forward_fraction");
      }
      if (calibration_trace_path.empty()) {
        throw ConfigError(
            "gateway.threshold = \"auto\" requires gateway.calibration_trace_path");
      }
    }
    if (target_forward_fraction &&
        !(*target_forward_fraction >= 0.0 && *target_forward_fraction <= 1.0)) {
      throw ConfigError("gateway.target_forward_fraction must lie in [0, 1]");
    }
    if (adaptation_enabled && !target_forward_fraction) {
      throw ConfigError("gateway.adaptation_enabled requires gateway.target_forward_fraction");
    }
    remote.validate();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

struct RawValue {
  std::string text;
  bool quoted = false;
};

// section.key -> raw value
using RawConfig = std::map<std::string, RawValue>;

inline RawValue parse_toml_value(const std::string& raw, int line_no) {
  std::string v = trim(raw);
  if (v.empty()) {
    throw ConfigError("line " + std::to_string(line_no) + ": missing value");
  }
  if (v.front() == '"') {
    std::string out;
    std::size_t i = 1;
    for (; i < v.size() && v[i] != '"'; ++i) {
      if (v[i] == '\\' && i + 1 < v.size()) {
        char c = v[++i];
        if (c == 'n') out += '\n';
        else if (c == 't') out += '\t';
        else out += c;
      } else {
        out += v[i];
      }
    }
    if (i >= v.size()) {
      throw ConfigError("line " + std::to_string(line_no) + ": unterminated string");
    }
    std::string rest = trim(v.substr(i + 1));
    if (!rest.empty() && rest.front() != '#') {
      throw ConfigError("line " + std::to_string(line_no) + ": trailing characters after string");
    }
    return {out, true};
  }
  std::size_t hash = v.find('#');
  if (hash != std::string::npos) v = trim(v.substr(0, hash));
  if (v.empty()) {
    throw ConfigError("line " + std::to_string(line_no) + ": missing value");
  }
  return {v, false};
}

inline RawConfig parse_toml_subset(std::istream& in) {
  RawConfig out;
  std::string section;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) {
        throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
      }
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key = trim(t.substr(0, eq));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    }
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section]");
    }
    std::string full = section + "." + key;
    if (out.count(full)) {
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + full + "'");
    }
    out[full] = parse_toml_value(t.substr(eq + 1), line_no);
  }
  return out;
}

inline std::string env_name_for(const std::string& dotted_key) {
  std::string name = "CHEAPET_" + dotted_key;
  for (char& c : name) {
    if (c == '.') c = '_';
    else c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  return name;
}

inline void apply_env_overrides(RawConfig& raw, const std::set<std::string>& known_keys) {
  for (const auto& key : known_keys) {
    if (const char* v = std::getenv(env_name_for(key).c_str())) {
      raw[key] = RawValue{v, true};
    }
  }
}

inline double to_double(const RawValue& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v.text, &pos);
    if (pos != v.text.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v.text + "'");
  }
}

inline long long to_int(const RawValue& v, const std::string& key) {
  try {
    std::size_t pos = 0;
    long long i = std::stoll(v.text, &pos);
    if (pos != v.text.size()) throw std::invalid_argument("trailing");
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v.text + "'");
  }
}

inline bool to_bool(const RawValue& v, const std::string& key) {
  if (v.text == "true") return true;
  if (v.text == "false") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v.text + "'");
}

}  // namespace detail

inline GatewayConfig gateway_config_from_stream(std::istream& in, bool apply_env = true) {
  static const std::set<std::string> kKnownKeys = {
      "gateway.listen_address",
      "gateway.supervisor_kind",
      "gateway.local_model_path",
      "gateway.mdsa_model_path",
      "gateway.threshold",
      "gateway.target_forward_fraction",
      "gateway.calibration_trace_path",
      "gateway.adaptation_enabled",
      "gateway.remote_failure_policy",
      "gateway.ledger_report_interval_s",
      "gateway.currency_unit",
      "remote.base_url",
      "remote.timeout_ms",
      "remote.max_retries",
      "remote.retry_backoff_base_ms",
      "remote.cost_per_kilotoken",
      "remote.bearer_token",
  };

  detail::RawConfig raw = detail::parse_toml_subset(in);
  for (const auto& [key, value] : raw) {
    (void)value;
    if (!kKnownKeys.count(key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  if (apply_env) detail::apply_env_overrides(raw, kKnownKeys);

  GatewayConfig cfg;
  auto get = [&raw](const std::string& key) -> const detail::RawValue* {
    auto it = raw.find(key);
    return it == raw.end() ? nullptr : &it->second;
  };

  if (auto* v = get("gateway.listen_address")) cfg.listen_address = v->text;
  if (auto* v = get("gateway.supervisor_kind")) {
    cfg.supervisor_kind = supervisor_from_string(v->text);
  }
  if (auto* v = get("gateway.local_model_path")) cfg.local_model_path = v->text;
  if (auto* v = get("gateway.mdsa_model_path")) cfg.mdsa_model_path = v->text;
  if (auto* v = get("gateway.threshold")) {
    if (v->text == "auto") {
      cfg.threshold.reset();
    } else {
      cfg.threshold = detail::to_double(*v, "gateway.threshold");
    }
  }
  if (auto* v = get("gateway.target_forward_fraction")) {
    cfg.target_forward_fraction = detail::to_double(*v, "gateway.target_forward_fraction");
  }
  if (auto* v = get("gateway.calibration_trace_path")) cfg.calibration_trace_path = v->text;
  if (auto* v = get("gateway.adaptation_enabled")) {
    cfg.adaptation_enabled = detail::to_bool(*v, "gateway.adaptation_enabled");
  }
  if (auto* v = get("gateway.remote_failure_policy")) {
    cfg.remote_failure_policy = remote_failure_policy_from_string(v->text);
  }
  if (auto* v = get("gateway.ledger_report_interval_s")) {
    cfg.ledger_report_interval_s =
        static_cast<int>(detail::to_int(*v, "gateway.ledger_report_interval_s"));
  }
  if (auto* v = get("gateway.currency_unit")) cfg.currency_unit = v->text;

  if (auto* v = get("remote.base_url")) cfg.remote.base_url = v->text;
  if (auto* v = get("remote.timeout_ms")) {
    cfg.remote.timeout = std::chrono::milliseconds(detail::to_int(*v, "remote.timeout_ms"));
  }
  if (auto* v = get("remote.max_retries")) {
    cfg.remote.max_retries = static_cast<int>(detail::to_int(*v, "remote.max_retries"));
  }
  if (auto* v = get("remote.retry_backoff_base_ms")) {
    cfg.remote.retry_backoff_base =
        std::chrono::milliseconds(detail::to_int(*v, "remote.retry_backoff_base_ms"));
  }
  if (auto* v = get("remote.cost_per_kilotoken")) {
    cfg.remote.cost_per_kilotoken = detail::to_double(*v, "remote.cost_per_kilotoken");
  }
  if (auto* v = get("remote.bearer_token")) cfg.remote.bearer_token = v->text;

  cfg.validate();
  return cfg;
}

inline GatewayConfig load_gateway_config(const std::string& path, bool apply_env = true) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  return gateway_config_from_stream(in, apply_env);
}

// Splits "host:port". Host may be empty ("":8080 is rejected); port must parse.
inline std::pair<std::string, int> split_listen_address(const std::string& addr) {
  std::size_t colon = addr.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 >= addr.size()) {
    throw ConfigError("listen_address must look like 'host:port', got '" + addr + "'");
  }
  std::string host = addr.substr(0, colon);
  int port;
  try {
    std::size_t pos = 0;
    port = std::stoi(addr.substr(colon + 1), &pos);
    if (pos != addr.size() - colon - 1) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError("listen_address port is not a number: '" + addr + "'");
  }
  if (port < 0 || port > 65535) {
    throw ConfigError("listen_address port out of range: '" + addr + "'");
  }
  return {host, port};
}

}  // namespace cheapet
