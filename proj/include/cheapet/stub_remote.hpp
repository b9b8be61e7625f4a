#pragma once

// Deterministic stand-in for the expensive remote service, used by tests
// and demos. Implements the same wire protocol as a real provider.
//
// All behavior is a pure function of (seed, request): correctness and
// failure injection are decided by hashing the request id (or the input
// itself) rather than by a shared RNG stream, so results do not depend on
// request ordering or concurrency.

#include <atomic>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#ifdef _res
#undef _res  // glibc resolv.h macro; breaks unrelated headers using _res as a name
#endif
#include <json.hpp>

#include "cheapet/errors.hpp"

namespace cheapet {

struct StubRemoteOptions {
  double accuracy = 1.0;      // chance a response matches the caller's true_label hint
  int latency_ms = 0;
  double failure_rate = 0.0;  // chance of an injected transient 500, per arrival
  std::uint64_t seed = 0;
  int num_classes = 2;
  std::optional<double> fixed_cost_units;  // report cost_units directly when set
  std::int64_t tokens_per_request = 1000;  // otherwise report a token count
};

namespace detail {

inline std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t len) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

// Stable hash of (seed, tag, key) mapped to [0, 1).
inline double hash01(std::uint64_t seed, const std::string& tag, const std::string& key,
                     std::uint64_t counter = 0) {
  std::uint64_t h = 14695981039346656037ULL;
  h = fnv1a(h, &seed, sizeof(seed));
  h = fnv1a(h, tag.data(), tag.size());
  h = fnv1a(h, key.data(), key.size());
  h = fnv1a(h, &counter, sizeof(counter));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace detail

class StubRemoteServer {
 public:
  explicit StubRemoteServer(StubRemoteOptions options = {}) : options_(options) {
    server_.Post("/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
      handle_predict(req, res);
    });
    server_.Get("/v1/stats", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json j{{"requests", requests_.load()},
                       {"responses_served", served_.load()},
                       {"failures_injected", failures_.load()}};
      res.set_content(j.dump(), "application/json");
    });
  }

  ~StubRemoteServer() { stop(); }

  // Binds a free port and serves on a background thread; returns the port.
  int start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ < 0) throw IoError("stub remote failed to bind a port");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void start_on(const std::string& host, int port) {
    if (!server_.bind_to_port(host, port)) {
      throw IoError("stub remote failed to bind " + host + ":" + std::to_string(port));
    }
    port_ = port;
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    if (thread_.joinable()) {
      server_.stop();
      thread_.join();
    }
  }

  int port() const { return port_; }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::uint64_t request_count() const { return requests_.load(); }

  std::vector<std::string> seen_ids() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return seen_ids_;
  }

 private:
  void handle_predict(const httplib::Request& req, httplib::Response& res) {
    requests_.fetch_add(1);
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error&) {
      res.status = 400;
      res.set_content(R"({"error":"request body is not JSON"})", "application/json");
      return;
    }
    if (!body.contains("input")) {
      res.status = 400;
      res.set_content(R"({"error":"missing field 'input'"})", "application/json");
      return;
    }

    // Key every decision on the request id when the caller provides one,
    // else on the input itself.
    std::string key = body.at("input").dump();
    std::optional<ClassId> true_label;
    if (body.contains("metadata") && body.at("metadata").is_object()) {
      const auto& meta = body.at("metadata");
      if (meta.contains("id") && meta.at("id").is_string()) {
        key = meta.at("id").get<std::string>();
      }
      if (meta.contains("true_label") && meta.at("true_label").is_number_integer()) {
        true_label = meta.at("true_label").get<ClassId>();
      }
    }

    std::uint64_t arrival;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      arrival = arrivals_[key]++;
      seen_ids_.push_back(key);
    }
    if (detail::hash01(options_.seed, "fail", key, arrival) < options_.failure_rate) {
      failures_.fetch_add(1);
      res.status = 500;
      res.set_content(R"({"error":"injected transient failure"})", "application/json");
      return;
    }
    if (options_.latency_ms > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(options_.latency_ms));
    }

    const int k = options_.num_classes;
    const ClassId expected =
        true_label.value_or(static_cast<ClassId>(detail::hash01(options_.seed, "cls", key) * k));
    const bool correct = detail::hash01(options_.seed, "label", key) < options_.accuracy;
    const ClassId label = correct ? expected : (expected + 1) % k;

    std::vector<double> probs(k, 0.1 / std::max(k - 1, 1));
    probs[label] = 1.0 - 0.1;
    nlohmann::json response{{"label", label}, {"probs", probs}};
    if (options_.fixed_cost_units) {
      response["cost_units"] = *options_.fixed_cost_units;
    } else {
      response["tokens"] = options_.tokens_per_request;
    }
    served_.fetch_add(1);
    res.set_content(response.dump(), "application/json");
  }

  StubRemoteOptions options_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> served_{0};
  std::atomic<std::uint64_t> failures_{0};
  mutable std::mutex mutex_;
  std::map<std::string, std::uint64_t> arrivals_;
  std::vector<std::string> seen_ids_;
};

}  // namespace cheapet
