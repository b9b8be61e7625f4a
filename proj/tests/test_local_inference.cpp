#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "cheapet/local_model.hpp"
#include "cheapet/trace.hpp"
#include "test_util.hpp"

using namespace cheapet;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Layer make_layer(int out, int in, double fill, Nonlinearity nl) {
  Layer layer;
  layer.weights = Eigen::MatrixXd::Constant(out, in, fill);
  layer.bias = Eigen::VectorXd::Zero(out);
  layer.nonlinearity = nl;
  return layer;
}

LocalModel identity_model(int dim) {
  LocalModel model;
  model.input_dim = dim;
  model.num_classes = dim;
  model.activation_tap = 0;
  Layer tap;
  tap.weights = Eigen::MatrixXd::Identity(dim, dim);
  tap.bias = Eigen::VectorXd::Zero(dim);
  tap.nonlinearity = Nonlinearity::Identity;
  Layer head = tap;
  head.nonlinearity = Nonlinearity::Softmax;
  model.layers = {tap, head};
  return model;
}

LocalModel random_model(std::mt19937& rng, int in, int hidden, int classes) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  LocalModel model;
  model.input_dim = in;
  model.num_classes = classes;
  model.activation_tap = 0;
  Layer h;
  h.weights = Eigen::MatrixXd::NullaryExpr(hidden, in, [&] { return unit(rng); });
  h.bias = Eigen::VectorXd::NullaryExpr(hidden, [&] { return unit(rng); });
  h.nonlinearity = Nonlinearity::Relu;
  Layer o;
  o.weights = Eigen::MatrixXd::NullaryExpr(classes, hidden, [&] { return unit(rng); });
  o.bias = Eigen::VectorXd::NullaryExpr(classes, [&] { return unit(rng); });
  o.nonlinearity = Nonlinearity::Softmax;
  model.layers = {std::move(h), std::move(o)};
  return model;
}

}  // namespace

TEST_CASE("zero logits give a uniform distribution") {
  LocalModel model = identity_model(4);
  model.layers[1].weights.setZero();  // softmax of the zero vector
  LocalPrediction p = predict_local(model, {0.3, -0.2, 0.9, 0.0});
  REQUIRE(p.probs.size() == 4);
  for (double v : p.probs) REQUIRE_THAT(v, WithinRel(0.25, 1e-12));
  REQUIRE(p.activation == std::vector<double>{0.3, -0.2, 0.9, 0.0});
}

TEST_CASE("softmax survives huge logits") {
  LocalModel model = identity_model(2);
  model.layers[1].bias << 1000.0, 0.0;
  LocalPrediction p = predict_local(model, {0.0, 0.0});
  REQUIRE(std::isfinite(p.probs[0]));
  REQUIRE_THAT(p.probs[0], WithinAbs(1.0, 1e-12));
  REQUIRE_THAT(p.probs[1], WithinAbs(0.0, 1e-12));
}

TEST_CASE("softmax is invariant to constant logit shifts") {
  LocalModel a = identity_model(3);
  LocalModel b = identity_model(3);
  b.layers[1].bias.array() += 123.0;
  LocalPrediction pa = predict_local(a, {0.1, 0.5, -0.4});
  LocalPrediction pb = predict_local(b, {0.1, 0.5, -0.4});
  for (int i = 0; i < 3; ++i) REQUIRE_THAT(pa.probs[i], WithinAbs(pb.probs[i], 1e-9));
}

TEST_CASE("forward pass matches a naive loop implementation", "[oracle]") {
  std::mt19937 rng(77);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    LocalModel model = random_model(rng, 4, 6, 3);
    std::vector<double> input(4);
    for (double& v : input) v = unit(rng);

    // Tap layer (relu), then softmax, with scalar loops only.
    std::vector<double> hidden(6, 0.0);
    for (int r = 0; r < 6; ++r) {
      double z = model.layers[0].bias(r);
      for (int c = 0; c < 4; ++c) z += model.layers[0].weights(r, c) * input[c];
      hidden[r] = std::max(z, 0.0);
    }
    std::vector<double> logits(3, 0.0);
    for (int r = 0; r < 3; ++r) {
      double z = model.layers[1].bias(r);
      for (int c = 0; c < 6; ++c) z += model.layers[1].weights(r, c) * hidden[c];
      logits[r] = z;
    }
    const double shift = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    for (double z : logits) denom += std::exp(z - shift);

    LocalPrediction p = predict_local(model, input);
    for (int i = 0; i < 6; ++i) REQUIRE_THAT(p.activation[i], WithinAbs(hidden[i], 1e-10));
    for (int i = 0; i < 3; ++i) {
      REQUIRE_THAT(p.probs[i], WithinAbs(std::exp(logits[i] - shift) / denom, 1e-10));
    }
    REQUIRE(argmax_class(p.probs) ==
            static_cast<ClassId>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
  }
}

TEST_CASE("prediction input validation") {
  LocalModel model = identity_model(2);
  REQUIRE_THROWS_AS(predict_local(model, {1.0}), ValidationError);
  REQUIRE_THROWS_AS(predict_local(model, {1.0, std::nan("")}), ValidationError);
}

TEST_CASE("numeric blowups name the offending layer") {
  LocalModel model = identity_model(2);
  model.layers[0].weights *= 1e308;
  REQUIRE_THROWS_WITH(predict_local(model, {10.0, 10.0}), ContainsSubstring("layer 0"));
}

TEST_CASE("model structure validation names both ends of a mismatch") {
  LocalModel model;
  model.input_dim = 3;
  model.num_classes = 2;
  model.activation_tap = 0;
  model.layers = {make_layer(4, 3, 0.1, Nonlinearity::Relu),
                  make_layer(2, 5, 0.1, Nonlinearity::Softmax)};  // expects 5, gets 4
  REQUIRE_THROWS_WITH(model.validate(),
                      ContainsSubstring("layer 1") && ContainsSubstring("layer 0"));

  SECTION("tap cannot be the softmax layer") {
    LocalModel bad = identity_model(2);
    bad.activation_tap = 1;
    REQUIRE_THROWS_WITH(bad.validate(), ContainsSubstring("activation_tap"));
  }

  SECTION("final layer must be softmax") {
    LocalModel bad = identity_model(2);
    bad.layers[1].nonlinearity = Nonlinearity::Identity;
    REQUIRE_THROWS_WITH(bad.validate(), ContainsSubstring("softmax"));
  }

  SECTION("final width must equal num_classes") {
    LocalModel bad = identity_model(2);
    bad.num_classes = 3;
    REQUIRE_THROWS_WITH(bad.validate(), ContainsSubstring("num_classes"));
  }

  SECTION("bias size must match layer output") {
    LocalModel bad = identity_model(2);
    bad.layers[0].bias = Eigen::VectorXd::Zero(3);
    REQUIRE_THROWS_WITH(bad.validate(), ContainsSubstring("bias"));
  }
}

TEST_CASE("weight files load and reject garbage") {
  SECTION("the demo model loads") {
    LocalModel model = load_local_model(std::string(CHEAPET_DEMO_DIR) + "/local_model.json");
    REQUIRE(model.input_dim == 2);
    REQUIRE(model.layers.size() == 2);
    LocalPrediction p = predict_local(model, {2.0, -2.0});
    REQUIRE(p.activation == std::vector<double>{2.0, -2.0});
    REQUIRE(p.probs[0] > 0.95);
  }

  SECTION("missing file") {
    REQUIRE_THROWS_AS(load_local_model("/nonexistent/model.json"), IoError);
  }

  SECTION("syntax errors carry the position") {
    const std::string path = test_util::temp_path("model", ".json");
    test_util::write_file(path, "{\"input_dim\": 2,,}");
    REQUIRE_THROWS_AS(load_local_model(path), ParseError);
    std::filesystem::remove(path);
  }

  SECTION("unknown nonlinearity") {
    nlohmann::json j{{"input_dim", 2},
                     {"num_classes", 2},
                     {"activation_tap", 0},
                     {"layers",
                      {{{"w", {{1.0, 0.0}, {0.0, 1.0}}}, {"b", {0.0, 0.0}}, {"nonlinearity", "tanh"}},
                       {{"w", {{1.0, 0.0}, {0.0, 1.0}}}, {"b", {0.0, 0.0}}, {"nonlinearity", "softmax"}}}}};
    REQUIRE_THROWS_WITH(local_model_from_json(j), ContainsSubstring("tanh"));
  }

  SECTION("ragged weight rows") {
    nlohmann::json j{{"input_dim", 2},
                     {"num_classes", 2},
                     {"activation_tap", 0},
                     {"layers",
                      {{{"w", {{1.0, 0.0}, {0.0}}}, {"b", {0.0, 0.0}}, {"nonlinearity", "identity"}},
                       {{"w", {{1.0, 0.0}, {0.0, 1.0}}}, {"b", {0.0, 0.0}}, {"nonlinearity", "softmax"}}}}};
    REQUIRE_THROWS_WITH(local_model_from_json(j), ContainsSubstring("row 1"));
  }
}

TEST_CASE("trace records round-trip with extras preserved") {
  PredictionRecord record;
  record.id = "x1";
  record.local_probs = {0.6, 0.4};
  record.activation = {1.0, -1.0};
  record.local_label = 0;
  record.true_label = 1;
  record.remote_label = 1;
  record.remote_cost_units = 2.5;
  record.features = std::vector<double>{0.1, 0.2};
  record.extra = {{"note", "keep me"}, {"batch", 7}};

  nlohmann::json j = record_to_json(record);
  PredictionRecord back = record_from_json(j);
  REQUIRE(back == record);
  REQUIRE(back.extra.at("note") == "keep me");

  const std::string path = test_util::temp_path("trace", ".jsonl");
  write_trace({record, record}, path);
  std::vector<PredictionRecord> records = read_trace(path);
  std::filesystem::remove(path);
  REQUIRE(records.size() == 2);
  REQUIRE(records[0] == record);
}

TEST_CASE("trace validation") {
  nlohmann::json base{{"id", "a"},
                      {"local_probs", {0.6, 0.4}},
                      {"activation", {1.0, 2.0}}};

  SECTION("minimal record") {
    PredictionRecord r = record_from_json(base);
    REQUIRE(r.local_label == 0);
    REQUIRE_FALSE(r.true_label);
  }

  SECTION("stored local_label must match the argmax") {
    nlohmann::json j = base;
    j["local_label"] = 1;
    REQUIRE_THROWS_AS(record_from_json(j), ValidationError);
    REQUIRE(record_from_json(j, /*repair_local_label=*/true).local_label == 0);
  }

  SECTION("remote fields travel together") {
    nlohmann::json j = base;
    j["remote_label"] = 1;
    REQUIRE_THROWS_WITH(record_from_json(j), ContainsSubstring("remote_cost_units"));
    j["remote_cost_units"] = -1.0;
    REQUIRE_THROWS_AS(record_from_json(j), ValidationError);
    j["remote_cost_units"] = 0.5;
    REQUIRE_NOTHROW(record_from_json(j));
  }

  SECTION("missing id") {
    nlohmann::json j = base;
    j.erase("id");
    REQUIRE_THROWS_WITH(record_from_json(j), ContainsSubstring("id"));
  }
}

TEST_CASE("trace reader reports line numbers and skips blanks") {
  const std::string path = test_util::temp_path("trace", ".jsonl");
  test_util::write_file(path,
                        "{\"id\":\"a\",\"local_probs\":[0.6,0.4],\"activation\":[1.0]}\n"
                        "\n"
                        "   \n"
                        "{\"id\":\"b\",\"local_probs\":[0.9,0.2],\"activation\":[1.0]}\n");

  TraceReader reader(path);
  REQUIRE(reader.next()->id == "a");
  // Line 4 holds the broken record (probabilities sum to 1.1).
  REQUIRE_THROWS_WITH(reader.next(), ContainsSubstring(":4:"));
  std::filesystem::remove(path);

  const std::string bad_json = test_util::temp_path("trace", ".jsonl");
  test_util::write_file(bad_json, "{\"id\": \"a\"\n");
  TraceReader broken(bad_json);
  REQUIRE_THROWS_AS(broken.next(), ParseError);
  std::filesystem::remove(bad_json);

  REQUIRE_THROWS_AS(TraceReader("/nonexistent/trace.jsonl"), IoError);
}

TEST_CASE("score_trace applies one supervisor to every record") {
  std::vector<PredictionRecord> records = read_trace(std::string(CHEAPET_DEMO_DIR) +
                                                     "/example_trace.jsonl");
  REQUIRE(records.size() == 8);
  std::vector<TrustScore> sm = score_trace(records, SupervisorKind::SM);
  REQUIRE(sm.size() == 8);
  REQUIRE(sm[0].value == 0.98);
  REQUIRE(sm[7].value == 0.51);

  std::vector<std::vector<double>> activations;
  std::vector<ClassId> labels;
  for (const auto& r : records) {
    activations.push_back(r.activation);
    labels.push_back(*r.true_label);
  }
  MdsaModel mdsa = fit_mdsa(activations, labels, true);
  std::vector<TrustScore> scored = score_trace(records, SupervisorKind::MDSA, &mdsa);
  for (const auto& s : scored) REQUIRE(s.value <= 0.0);
}
