#pragma once

// Client for the remote prediction service. Wire contract:
//
//   POST {base_url}/v1/predict
//   request  {"input": <string or number array>, "metadata": optional object}
//   response {"label": int, "probs": optional array,
//             "cost_units": optional number, "tokens": optional int}
//
// 5xx, timeouts and connection failures are retried with full-jitter
// exponential backoff; 4xx is permanent and never retried. Cost source of
// truth is the server's cost_units when present; a token count is converted
// at cost_per_kilotoken otherwise; a response carrying neither is a
// protocol error.

#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#ifdef _res
#undef _res  // glibc resolv.h macro; breaks unrelated headers using _res as a name
#endif
#include <json.hpp>

#include "cheapet/errors.hpp"
#include "cheapet/supervision.hpp"

namespace cheapet {

struct RemoteEndpointConfig {
  std::string base_url = "http://127.0.0.1:9090";
  std::chrono::milliseconds timeout{2000};
  int max_retries = 3;
  std::chrono::milliseconds retry_backoff_base{100};
  double cost_per_kilotoken = 0.12;
  std::string bearer_token;  // optional static pass-through

  void validate() const {
    if (timeout.count() <= 0) throw ValidationError("remote timeout must be > 0");
    if (retry_backoff_base.count() <= 0) throw ValidationError("retry_backoff_base must be > 0");
    if (max_retries < 0) throw ValidationError("max_retries must be >= 0");
    if (!(cost_per_kilotoken >= 0.0)) throw ValidationError("cost_per_kilotoken must be >= 0");
    if (base_url.empty()) throw ValidationError("remote base_url must not be empty");
  }
};

struct RemotePrediction {
  ClassId label = 0;
  std::optional<std::vector<double>> probs;
  double cost_units = 0.0;
  std::chrono::milliseconds latency{0};
  int attempts = 1;
  nlohmann::json raw_response;  // verbatim server object, for proxying
};

inline double token_cost(double cost_per_kilotoken, double tokens) {
  return cost_per_kilotoken * tokens / 1000.0;
}

// Backoff ceiling before jitter: base * 2^attempt, non-decreasing in attempt.
inline std::chrono::milliseconds backoff_cap(std::chrono::milliseconds base, int attempt) {
  const int shift = std::min(attempt, 20);
  return base * (std::int64_t{1} << shift);
}

class RemoteClient {
 public:
  explicit RemoteClient(RemoteEndpointConfig config) : config_(std::move(config)) {
    config_.validate();
  }

  const RemoteEndpointConfig& config() const { return config_; }

  RemotePrediction predict(const nlohmann::json& request_body) const {
    return post(request_body.dump());
  }

  // Issues the request and applies the retry contract. The body is sent
  // verbatim, which lets the gateway proxy client requests untouched.
  RemotePrediction post(const std::string& body) const {
    const auto started = std::chrono::steady_clock::now();
    std::string last_cause = "no attempt made";
    const int total_attempts = config_.max_retries + 1;
    for (int attempt = 0; attempt < total_attempts; ++attempt) {
      httplib::Client client(config_.base_url);
      client.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.timeout).count(),
                                    (config_.timeout.count() % 1000) * 1000);
      client.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(config_.timeout).count(),
                              (config_.timeout.count() % 1000) * 1000);
      if (!config_.bearer_token.empty()) {
        client.set_default_headers({{"Authorization", "Bearer " + config_.bearer_token}});
      }
      auto res = client.Post("/v1/predict", body, "application/json");
      if (!res) {
        last_cause = "connection failure (" + httplib::to_string(res.error()) + ")";
      } else if (res->status >= 500) {
        last_cause = "HTTP " + std::to_string(res->status);
      } else if (res->status >= 400) {
        throw PermanentRequestError("remote rejected request with HTTP " +
                                    std::to_string(res->status) + ": " + res->body);
      } else if (res->status == 200) {
        RemotePrediction prediction = parse_response(res->body);
        prediction.attempts = attempt + 1;
        prediction.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - started);
        return prediction;
      } else {
        throw ProtocolError("unexpected HTTP status " + std::to_string(res->status) +
                            " from remote");
      }
      if (attempt + 1 < total_attempts) {
        std::this_thread::sleep_for(jittered_backoff(attempt));
      }
    }
    throw RemoteUnavailableError("remote unavailable after " + std::to_string(total_attempts) +
                                     " attempts, last cause: " + last_cause,
                                 total_attempts);
  }

 private:
  RemotePrediction parse_response(const std::string& body) const {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::parse_error& e) {
      throw ProtocolError(std::string("remote response is not JSON: ") + e.what());
    }
    RemotePrediction prediction;
    prediction.raw_response = j;
    if (!j.contains("label") || !j.at("label").is_number_integer()) {
      throw ProtocolError("remote response is missing integer field 'label'");
    }
    prediction.label = j.at("label").get<ClassId>();
    if (j.contains("probs")) {
      if (!j.at("probs").is_array()) throw ProtocolError("remote 'probs' must be an array");
      prediction.probs = j.at("probs").get<std::vector<double>>();
    }
    if (j.contains("cost_units")) {
      prediction.cost_units = j.at("cost_units").get<double>();
    } else if (j.contains("tokens")) {
      prediction.cost_units = token_cost(config_.cost_per_kilotoken, j.at("tokens").get<double>());
    } else {
      throw ProtocolError("remote response carries neither 'cost_units' nor 'tokens'");
    }
    if (!(prediction.cost_units >= 0.0)) {
      throw ProtocolError("remote reported a negative cost");
    }
    return prediction;
  }

  std::chrono::milliseconds jittered_backoff(int attempt) const {
    const auto cap = backoff_cap(config_.retry_backoff_base, attempt);
    thread_local std::mt19937_64 rng{std::random_device{}()};
    std::uniform_int_distribution<std::int64_t> dist(0, cap.count());
    return std::chrono::milliseconds(dist(rng));
  }

  RemoteEndpointConfig config_;
};

}  // namespace cheapet
