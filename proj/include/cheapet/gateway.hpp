#pragma once

// HTTP gateway that fronts a remote prediction service with the local
// surrogate. Clients speak the ordinary prediction protocol; the gateway
// answers trusted inputs itself and proxies the rest, so swapping it in
// requires only a base-URL change.
//
// Responses gain three extension fields: "route" ("local", "remote" or
// "local_fallback"), "trust_score", and a "cost_units" value the gateway
// computes itself (0 for local answers). Everything else in a proxied
// response is passed through untouched.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#ifdef _res
#undef _res  // glibc resolv.h macro; breaks unrelated headers using _res as a name
#endif
#include <json.hpp>

#include "cheapet/config.hpp"
#include "cheapet/cost_ledger.hpp"
#include "cheapet/errors.hpp"
#include "cheapet/local_model.hpp"
#include "cheapet/remote_client.hpp"
#include "cheapet/routing.hpp"
#include "cheapet/supervision.hpp"
#include "cheapet/trace.hpp"

namespace cheapet {

class Gateway {
 public:
  explicit Gateway(GatewayConfig config)
      : config_(std::move(config)),
        ledger_(config_.currency_unit),
        client_(config_.remote) {
    config_.validate();
    local_ = load_local_model(config_.local_model_path);
    if (config_.supervisor_kind == SupervisorKind::MDSA) {
      mdsa_ = load_mdsa(config_.mdsa_model_path);
      const auto tap_dim =
          static_cast<int>(local_.layers[local_.activation_tap].bias.size());
      if (mdsa_->dimension() != tap_dim) {
        throw ConfigError("mdsa model dimension " + std::to_string(mdsa_->dimension()) +
                          " does not match activation tap width " + std::to_string(tap_dim));
      }
    }

    policy_.supervisor_kind = config_.supervisor_kind;
    policy_.target_forward_fraction = config_.target_forward_fraction;
    double initial_forward_rate = config_.target_forward_fraction.value_or(0.5);
    if (config_.auto_threshold()) {
      auto records = read_trace(config_.calibration_trace_path);
      auto scores = score_trace(records, config_.supervisor_kind, mdsa_ptr());
      std::vector<double> values;
      values.reserve(scores.size());
      for (const TrustScore& s : scores) values.push_back(s.value);
      CalibrationResult cal =
          calibrate_threshold(std::move(values), *config_.target_forward_fraction);
      policy_.threshold = cal.threshold;
      initial_forward_rate = cal.achieved_forward_fraction;
    } else {
      policy_.threshold = *config_.threshold;
    }
    if (config_.adaptation_enabled) {
      adapt_state_ = make_adaptation_state(initial_forward_rate);
    }

    server_.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
      handle_predict(req, res);
    });
    server_.Get("/v1/ledger", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(ledger_json().dump(), "application/json");
    });
  }

  ~Gateway() { stop(); }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;

  // Binds a free loopback port and serves in the background; returns the port.
  int start() {
    probe_remote();
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ < 0) throw IoError("gateway failed to bind a port");
    listen_thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    start_report_thread();
    return port_;
  }

  // Serves on the configured listen_address in the calling thread. If a stop
  // flag is supplied (typically flipped by a signal handler), a monitor
  // thread shuts the server down once it becomes true.
  void run(const std::atomic<bool>* stop_flag = nullptr) {
    probe_remote();
    auto [host, port] = split_listen_address(config_.listen_address);
    if (!server_.bind_to_port(host, port)) {
      throw IoError("gateway failed to bind " + config_.listen_address);
    }
    port_ = port;
    start_report_thread();
    std::thread monitor;
    if (stop_flag) {
      monitor = std::thread([this, stop_flag] {
        while (!stop_flag->load() && !stopping_.load()) {
          std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
        server_.stop();
      });
    }
    std::fprintf(stderr, "gateway listening on %s (supervisor=%s threshold=%.6f)\n",
                 config_.listen_address.c_str(), to_string(config_.supervisor_kind).c_str(),
                 current_threshold());
    server_.listen_after_bind();
    stopping_.store(true);
    if (monitor.joinable()) monitor.join();
    if (report_thread_.joinable()) report_thread_.join();
  }

  void stop() {
    stopping_.store(true);
    server_.stop();
    if (listen_thread_.joinable()) listen_thread_.join();
    if (report_thread_.joinable()) report_thread_.join();
  }

  int port() const { return port_; }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  double current_threshold() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return policy_.threshold;
  }

  CostLedger::Snapshot ledger_snapshot() const { return ledger_.snapshot(); }

 private:
  const MdsaModel* mdsa_ptr() const { return mdsa_ ? &*mdsa_ : nullptr; }

  static void fail(httplib::Response& res, int status, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
  }

  nlohmann::json ledger_json() const {
    CostLedger::Snapshot snap = ledger_.snapshot();
    const std::uint64_t total = snap.local_count + snap.remote_count;
    return nlohmann::json{
        {"local_count", snap.local_count},
        {"remote_count", snap.remote_count},
        {"total_count", total},
        {"forward_fraction",
         total == 0 ? 0.0
                    : static_cast<double>(snap.remote_count) / static_cast<double>(total)},
        {"remote_cost_total", snap.remote_cost_total},
        {"currency_unit", snap.currency_unit},
        {"supervisor_kind", to_string(config_.supervisor_kind)},
        {"threshold", current_threshold()},
    };
  }

  void handle_predict(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      return fail(res, 400, "request body is not JSON");
    }
    if (!body.is_object() || !body.contains("input")) {
      return fail(res, 400, "missing field 'input'");
    }
    const auto& input = body.at("input");
    if (input.is_string()) {
      return fail(res, 400,
                  "this gateway's local model takes a numeric feature array, not a string");
    }
    if (!input.is_array()) {
      return fail(res, 400, "'input' must be an array of numbers");
    }
    std::vector<double> features;
    features.reserve(input.size());
    for (const auto& v : input) {
      if (!v.is_number()) return fail(res, 400, "'input' must contain only numbers");
      features.push_back(v.get<double>());
    }

    LocalPrediction lp;
    TrustScore score;
    try {
      lp = predict_local(local_, features);
      score = trust_score(config_.supervisor_kind, lp.probs, lp.activation, mdsa_ptr());
    } catch (const ValidationError& e) {
      return fail(res, 400, e.what());
    } catch (const Error& e) {
      return fail(res, 500, e.what());
    }

    RoutingDecision decision;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      decision = decide(score, policy_);
      if (adapt_state_) {
        std::tie(*adapt_state_, policy_) = adapt(std::move(*adapt_state_), policy_, decision);
      }
    }

    if (decision.route == Route::Local) {
      ledger_.record_local();
      res.set_content(local_response(lp, decision, "local").dump(), "application/json");
      return;
    }

    try {
      RemotePrediction rp = client_.post(req.body);
      ledger_.record_remote(rp.cost_units);
      nlohmann::json out = rp.raw_response;
      out["route"] = "remote";
      out["trust_score"] = decision.trust_score;
      out["cost_units"] = rp.cost_units;
      res.set_content(out.dump(), "application/json");
    } catch (const Error& e) {
      if (config_.remote_failure_policy == RemoteFailurePolicy::kLocalFallback) {
        ledger_.record_local();
        res.set_content(local_response(lp, decision, "local_fallback").dump(),
                        "application/json");
      } else {
        fail(res, 502, std::string("remote prediction failed: ") + e.what());
      }
    }
  }

  static nlohmann::json local_response(const LocalPrediction& lp, const RoutingDecision& decision,
                                       const char* route) {
    return nlohmann::json{{"label", argmax_class(lp.probs)},
                          {"probs", lp.probs},
                          {"cost_units", 0.0},
                          {"route", route},
                          {"trust_score", decision.trust_score}};
  }

  // Best-effort startup check; a dead remote is worth a warning but the
  // gateway can still serve local answers (and fall back if configured).
  void probe_remote() const {
    httplib::Client probe(config_.remote.base_url);
    probe.set_connection_timeout(1, 0);
    probe.set_read_timeout(1, 0);
    if (!probe.Get("/")) {
      std::fprintf(stderr, "warning: remote %s is unreachable; remote routes will %s\n",
                   config_.remote.base_url.c_str(),
                   config_.remote_failure_policy == RemoteFailurePolicy::kLocalFallback
                       ? "fall back to the local model"
                       : "fail");
    }
  }

  void start_report_thread() {
    if (config_.ledger_report_interval_s <= 0) return;
    report_thread_ = std::thread([this] {
      const auto interval = std::chrono::seconds(config_.ledger_report_interval_s);
      auto last = std::chrono::steady_clock::now();
      while (!stopping_.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
        if (std::chrono::steady_clock::now() - last < interval) continue;
        last = std::chrono::steady_clock::now();
        CostLedger::Snapshot snap = ledger_.snapshot();
        std::fprintf(stderr, "[ledger] local=%llu remote=%llu cost=%.6f %s\n",
                     static_cast<unsigned long long>(snap.local_count),
                     static_cast<unsigned long long>(snap.remote_count),
                     snap.remote_cost_total, snap.currency_unit.c_str());
      }
    });
  }

  GatewayConfig config_;
  CostLedger ledger_;
  RemoteClient client_;
  LocalModel local_;
  std::optional<MdsaModel> mdsa_;

  mutable std::mutex mutex_;
  RoutingPolicy policy_;
  std::optional<AdaptationState> adapt_state_;

  httplib::Server server_;
  std::thread listen_thread_;
  std::thread report_thread_;
  std::atomic<bool> stopping_{false};
  int port_ = -1;
};

}  // namespace cheapet
