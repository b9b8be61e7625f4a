#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "cheapet/cost_ledger.hpp"
#include "cheapet/remote_client.hpp"
#include "cheapet/stub_remote.hpp"

using namespace cheapet;
using Catch::Matchers::ContainsSubstring;

namespace {

// Minimal scriptable endpoint for exercising the client's retry contract.
struct ScriptedServer {
  httplib::Server server;
  std::thread thread;
  int port = -1;
  std::atomic<int> hits{0};

  int start() {
    port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
    return port;
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port); }

  ~ScriptedServer() {
    server.stop();
    if (thread.joinable()) thread.join();
  }
};

RemoteEndpointConfig fast_config(const std::string& url, int max_retries = 3) {
  RemoteEndpointConfig config;
  config.base_url = url;
  config.timeout = std::chrono::milliseconds(2000);
  config.max_retries = max_retries;
  config.retry_backoff_base = std::chrono::milliseconds(1);
  return config;
}

}  // namespace

TEST_CASE("token cost is exact for the reference tariff") {
  // 4000 tokens at 0.12 per 1000 tokens cost exactly 0.48.
  REQUIRE(token_cost(0.12, 4000) == 0.48);
  REQUIRE(token_cost(0.12, 1000) == 0.12);
  REQUIRE(token_cost(0.0, 123456) == 0.0);
}

TEST_CASE("backoff cap doubles per attempt and saturates") {
  const std::chrono::milliseconds base(100);
  REQUIRE(backoff_cap(base, 0) == std::chrono::milliseconds(100));
  REQUIRE(backoff_cap(base, 1) == std::chrono::milliseconds(200));
  REQUIRE(backoff_cap(base, 2) == std::chrono::milliseconds(400));
  for (int attempt = 1; attempt < 30; ++attempt) {
    REQUIRE(backoff_cap(base, attempt) >= backoff_cap(base, attempt - 1));
  }
  REQUIRE(backoff_cap(base, 25) == backoff_cap(base, 20));
}

TEST_CASE("remote endpoint config validation") {
  RemoteEndpointConfig config;
  REQUIRE_NOTHROW(config.validate());
  SECTION("zero timeout") {
    config.timeout = std::chrono::milliseconds(0);
    REQUIRE_THROWS_AS(config.validate(), ValidationError);
  }
  SECTION("negative retries") {
    config.max_retries = -1;
    REQUIRE_THROWS_AS(config.validate(), ValidationError);
  }
  SECTION("negative tariff") {
    config.cost_per_kilotoken = -0.1;
    REQUIRE_THROWS_AS(config.validate(), ValidationError);
  }
  SECTION("empty base url") {
    config.base_url.clear();
    REQUIRE_THROWS_AS(config.validate(), ValidationError);
  }
}

TEST_CASE("cost ledger is exact under concurrency") {
  CostLedger ledger("USD");
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t) {
    threads.emplace_back([&ledger] {
      for (int i = 0; i < 100; ++i) {
        ledger.record_local();
        ledger.record_remote(0.25);
      }
    });
  }
  for (auto& t : threads) t.join();

  CostLedger::Snapshot snap = ledger.snapshot();
  REQUIRE(snap.local_count == 800);
  REQUIRE(snap.remote_count == 800);
  REQUIRE(snap.remote_cost_total == 200.0);  // quarters add without rounding
  REQUIRE(snap.currency_unit == "USD");

  REQUIRE_THROWS_AS(ledger.record_remote(-0.1), ValidationError);
  REQUIRE_THROWS_AS(ledger.record_remote(std::nan("")), ValidationError);
}

TEST_CASE("response parsing and cost precedence") {
  ScriptedServer scripted;
  scripted.server.Post("/v1/predict", [](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const std::string which = body.at("input").get<std::string>();
    if (which == "both") {
      res.set_content(R"({"label":2,"probs":[0.1,0.2,0.7],"cost_units":1.5,"tokens":9999})",
                      "application/json");
    } else if (which == "tokens") {
      res.set_content(R"({"label":1,"tokens":4000})", "application/json");
    } else if (which == "neither") {
      res.set_content(R"({"label":1})", "application/json");
    } else if (which == "no-label") {
      res.set_content(R"({"cost_units":1.0})", "application/json");
    } else if (which == "bad-label") {
      res.set_content(R"({"label":"zero","cost_units":1.0})", "application/json");
    } else if (which == "bad-probs") {
      res.set_content(R"({"label":0,"probs":42,"cost_units":1.0})", "application/json");
    } else if (which == "negative-cost") {
      res.set_content(R"({"label":0,"cost_units":-2.0})", "application/json");
    } else {
      res.set_content("this is not json", "application/json");
    }
  });
  scripted.start();
  RemoteClient client(fast_config(scripted.url(), 0));

  SECTION("cost_units beats tokens") {
    RemotePrediction p = client.predict({{"input", "both"}});
    REQUIRE(p.label == 2);
    REQUIRE(p.probs == std::vector<double>{0.1, 0.2, 0.7});
    REQUIRE(p.cost_units == 1.5);
    REQUIRE(p.attempts == 1);
    REQUIRE(p.raw_response.at("tokens") == 9999);  // verbatim body survives
  }

  SECTION("tokens convert at the configured tariff") {
    RemotePrediction p = client.predict({{"input", "tokens"}});
    REQUIRE(p.cost_units == 0.48);
  }

  SECTION("protocol violations") {
    REQUIRE_THROWS_AS(client.predict({{"input", "neither"}}), ProtocolError);
    REQUIRE_THROWS_AS(client.predict({{"input", "no-label"}}), ProtocolError);
    REQUIRE_THROWS_AS(client.predict({{"input", "bad-label"}}), ProtocolError);
    REQUIRE_THROWS_AS(client.predict({{"input", "bad-probs"}}), ProtocolError);
    REQUIRE_THROWS_AS(client.predict({{"input", "negative-cost"}}), ProtocolError);
    REQUIRE_THROWS_AS(client.predict({{"input", "garbage"}}), ProtocolError);
  }
}

TEST_CASE("transient failures are retried until success") {
  ScriptedServer scripted;
  scripted.server.Post("/v1/predict", [&](const httplib::Request&, httplib::Response& res) {
    if (scripted.hits.fetch_add(1) < 2) {
      res.status = 500;
      res.set_content(R"({"error":"hiccup"})", "application/json");
    } else {
      res.set_content(R"({"label":0,"cost_units":0.1})", "application/json");
    }
  });
  scripted.start();

  RemoteClient client(fast_config(scripted.url(), 3));
  RemotePrediction p = client.predict({{"input", {1.0, 2.0}}});
  REQUIRE(p.attempts == 3);
  REQUIRE(scripted.hits.load() == 3);
  REQUIRE(p.label == 0);
}

TEST_CASE("4xx responses are permanent and never retried") {
  ScriptedServer scripted;
  scripted.server.Post("/v1/predict", [&](const httplib::Request&, httplib::Response& res) {
    scripted.hits.fetch_add(1);
    res.status = 404;
    res.set_content(R"({"error":"no such model"})", "application/json");
  });
  scripted.start();

  RemoteClient client(fast_config(scripted.url(), 5));
  REQUIRE_THROWS_AS(client.predict({{"input", "x"}}), PermanentRequestError);
  REQUIRE(scripted.hits.load() == 1);
}

TEST_CASE("persistent 5xx exhausts the retry budget") {
  ScriptedServer scripted;
  scripted.server.Post("/v1/predict", [&](const httplib::Request&, httplib::Response& res) {
    scripted.hits.fetch_add(1);
    res.status = 503;
  });
  scripted.start();

  RemoteClient client(fast_config(scripted.url(), 2));
  try {
    client.predict({{"input", "x"}});
    FAIL("expected RemoteUnavailableError");
  } catch (const RemoteUnavailableError& e) {
    REQUIRE(e.attempts() == 3);  // initial try plus two retries
    REQUIRE_THAT(e.what(), ContainsSubstring("HTTP 503"));
  }
  REQUIRE(scripted.hits.load() == 3);
}

TEST_CASE("connection refusal counts as transient") {
  int dead_port;
  {
    ScriptedServer probe;  // find a port that is then closed again
    dead_port = probe.start();
  }
  RemoteClient client(fast_config("http://127.0.0.1:" + std::to_string(dead_port), 1));
  try {
    client.predict({{"input", "x"}});
    FAIL("expected RemoteUnavailableError");
  } catch (const RemoteUnavailableError& e) {
    REQUIRE(e.attempts() == 2);
  }
}

TEST_CASE("bearer tokens are attached when configured") {
  ScriptedServer scripted;
  scripted.server.Post("/v1/predict", [](const httplib::Request& req, httplib::Response& res) {
    if (req.get_header_value("Authorization") != "Bearer sesame") {
      res.status = 401;
      res.set_content(R"({"error":"who are you"})", "application/json");
      return;
    }
    res.set_content(R"({"label":0,"cost_units":0.0})", "application/json");
  });
  scripted.start();

  RemoteEndpointConfig config = fast_config(scripted.url(), 0);
  REQUIRE_THROWS_AS(RemoteClient(config).predict({{"input", "x"}}), PermanentRequestError);

  config.bearer_token = "sesame";
  REQUIRE(RemoteClient(config).predict({{"input", "x"}}).label == 0);
}

TEST_CASE("stub remote is deterministic per seed and id") {
  StubRemoteOptions options;
  options.accuracy = 0.5;
  options.seed = 9;

  std::vector<ClassId> first;
  {
    StubRemoteServer stub(options);
    stub.start();
    RemoteClient client(fast_config(stub.base_url(), 0));
    for (int i = 0; i < 30; ++i) {
      nlohmann::json req{{"input", "whatever"},
                         {"metadata", {{"id", "q" + std::to_string(i)}, {"true_label", 0}}}};
      first.push_back(client.predict(req).label);
    }
    REQUIRE(stub.request_count() == 30);
  }

  // A fresh server with the same seed answers identically, in any order.
  StubRemoteServer again(options);
  again.start();
  RemoteClient client(fast_config(again.base_url(), 0));
  for (int i = 29; i >= 0; --i) {
    nlohmann::json req{{"input", "whatever"},
                       {"metadata", {{"id", "q" + std::to_string(i)}, {"true_label", 0}}}};
    REQUIRE(client.predict(req).label == first[static_cast<std::size_t>(i)]);
  }

  // Half-accuracy means both outcomes actually occur.
  REQUIRE(std::count(first.begin(), first.end(), 0) > 0);
  REQUIRE(std::count(first.begin(), first.end(), 1) > 0);
}

TEST_CASE("stub remote respects the accuracy dial") {
  SECTION("always correct") {
    StubRemoteOptions options;
    options.accuracy = 1.0;
    StubRemoteServer stub(options);
    stub.start();
    RemoteClient client(fast_config(stub.base_url(), 0));
    for (int i = 0; i < 10; ++i) {
      nlohmann::json req{{"input", "x"},
                         {"metadata", {{"id", "k" + std::to_string(i)}, {"true_label", i % 2}}}};
      REQUIRE(client.predict(req).label == i % 2);
    }
  }

  SECTION("always wrong") {
    StubRemoteOptions options;
    options.accuracy = 0.0;
    options.num_classes = 3;
    StubRemoteServer stub(options);
    stub.start();
    RemoteClient client(fast_config(stub.base_url(), 0));
    for (int i = 0; i < 9; ++i) {
      nlohmann::json req{{"input", "x"},
                         {"metadata", {{"id", "k" + std::to_string(i)}, {"true_label", i % 3}}}};
      REQUIRE(client.predict(req).label == (i % 3 + 1) % 3);
    }
  }
}

TEST_CASE("stub remote reports costs and stats") {
  SECTION("token-based by default") {
    StubRemoteServer stub(StubRemoteOptions{});
    stub.start();
    RemoteEndpointConfig config = fast_config(stub.base_url(), 0);
    config.cost_per_kilotoken = 0.12;
    RemotePrediction p = RemoteClient(config).predict({{"input", "x"}});
    REQUIRE(p.cost_units == 0.12);  // 1000 tokens at 0.12 per 1000
  }

  SECTION("fixed cost units when configured") {
    StubRemoteOptions options;
    options.fixed_cost_units = 2.5;
    StubRemoteServer stub(options);
    stub.start();
    RemotePrediction p = RemoteClient(fast_config(stub.base_url(), 0)).predict({{"input", "x"}});
    REQUIRE(p.cost_units == 2.5);
  }

  SECTION("stats endpoint and request log") {
    StubRemoteServer stub(StubRemoteOptions{});
    stub.start();
    RemoteClient client(fast_config(stub.base_url(), 0));
    client.predict({{"input", "a"}, {"metadata", {{"id", "one"}}}});
    client.predict({{"input", "b"}, {"metadata", {{"id", "two"}}}});
    REQUIRE(stub.seen_ids() == std::vector<std::string>{"one", "two"});

    httplib::Client probe(stub.base_url());
    auto res = probe.Get("/v1/stats");
    REQUIRE(res);
    auto stats = nlohmann::json::parse(res->body);
    REQUIRE(stats.at("requests") == 2);
    REQUIRE(stats.at("responses_served") == 2);
  }
}

TEST_CASE("stub remote injects transient failures deterministically") {
  StubRemoteOptions options;
  options.failure_rate = 1.0;
  StubRemoteServer stub(options);
  stub.start();

  RemoteClient client(fast_config(stub.base_url(), 1));
  REQUIRE_THROWS_AS(client.predict({{"input", "x"}, {"metadata", {{"id", "f"}}}}),
                    RemoteUnavailableError);

  // Rejects malformed requests outright.
  httplib::Client raw(stub.base_url());
  auto res = raw.Post("/v1/predict", R"({"no_input": true})", "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 400);
}
