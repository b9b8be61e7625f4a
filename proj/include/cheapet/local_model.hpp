#pragma once

// Built-in local surrogate: a plain feed-forward network loaded from a JSON
// weight file. The forward pass exposes both the softmax output and one
// intermediate ("tap") layer's post-nonlinearity activation, which is what
// the MDSA supervisor scores. Trace replay covers surrogates this engine
// cannot express; this exists so the gateway can serve live traffic.

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Core>

#include <json.hpp>

#include "cheapet/errors.hpp"
#include "cheapet/supervision.hpp"

namespace cheapet {

enum class Nonlinearity { Relu, Identity, Softmax };

inline Nonlinearity nonlinearity_from_string(const std::string& name) {
  if (name == "relu") return Nonlinearity::Relu;
  if (name == "identity") return Nonlinearity::Identity;
  if (name == "softmax") return Nonlinearity::Softmax;
  throw ValidationError("unknown nonlinearity '" + name + "' (expected relu, identity or softmax)");
}

struct Layer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
  Nonlinearity nonlinearity = Nonlinearity::Identity;
};

// Immutable after load; safe for unlimited concurrent predict calls.
struct LocalModel {
  std::vector<Layer> layers;
  int input_dim = 0;
  int num_classes = 0;
  int activation_tap = 0;  // layer whose post-nonlinearity output is exported

  void validate() const {
    if (layers.empty()) throw ValidationError("local model has no layers");
    if (input_dim < 1) throw ValidationError("input_dim must be >= 1");
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    Eigen::Index expected_in = input_dim;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const Layer& layer = layers[i];
      if (layer.weights.cols() != expected_in) {
        throw ValidationError("layer " + std::to_string(i) + " expects input dimension " +
                              std::to_string(layer.weights.cols()) + " but layer " +
                              (i == 0 ? std::string("input") : std::to_string(i - 1)) +
                              " provides " + std::to_string(expected_in));
      }
      if (layer.bias.size() != layer.weights.rows()) {
        throw ValidationError("layer " + std::to_string(i) + " bias size " +
                              std::to_string(layer.bias.size()) + " does not match output size " +
                              std::to_string(layer.weights.rows()));
      }
      expected_in = layer.weights.rows();
    }
    const Layer& last = layers.back();
    if (last.nonlinearity != Nonlinearity::Softmax) {
      throw ValidationError("final layer nonlinearity must be softmax");
    }
    if (last.weights.rows() != num_classes) {
      throw ValidationError("final layer output dimension " + std::to_string(last.weights.rows()) +
                            " does not match num_classes " + std::to_string(num_classes));
    }
    if (activation_tap < 0 || activation_tap >= static_cast<int>(layers.size())) {
      throw ValidationError("activation_tap " + std::to_string(activation_tap) +
                            " is out of range for " + std::to_string(layers.size()) + " layers");
    }
    if (activation_tap == static_cast<int>(layers.size()) - 1) {
      throw ValidationError("activation_tap must precede the final softmax layer");
    }
  }
};

struct LocalPrediction {
  std::vector<double> probs;       // softmax output, one entry per class
  std::vector<double> activation;  // tap layer output
};

namespace detail {

inline Eigen::VectorXd stable_softmax(const Eigen::VectorXd& logits) {
  const double shift = logits.maxCoeff();
  Eigen::VectorXd exps = (logits.array() - shift).exp();
  return exps / exps.sum();
}

}  // namespace detail

// Forward pass x_{i+1} = nonlinearity(W_i x_i + b_i). The softmax is shifted
// by the max logit, so large biases do not overflow.
inline LocalPrediction predict_local(const LocalModel& model,
                                     const std::vector<double>& features) {
  if (static_cast<int>(features.size()) != model.input_dim) {
    throw ValidationError("feature vector has dimension " + std::to_string(features.size()) +
                          ", model expects " + std::to_string(model.input_dim));
  }
  for (double v : features) {
    if (!std::isfinite(v)) throw ValidationError("feature vector has non-finite entries");
  }
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(features.data(), features.size());
  LocalPrediction out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    Eigen::VectorXd z = layer.weights * x + layer.bias;
    if (!z.allFinite()) {
      throw NumericError("non-finite pre-activation at layer " + std::to_string(i));
    }
    switch (layer.nonlinearity) {
      case Nonlinearity::Relu:
        x = z.cwiseMax(0.0);
        break;
      case Nonlinearity::Identity:
        x = std::move(z);
        break;
      case Nonlinearity::Softmax:
        x = detail::stable_softmax(z);
        break;
    }
    if (!x.allFinite()) {
      throw NumericError("non-finite activation at layer " + std::to_string(i));
    }
    if (static_cast<int>(i) == model.activation_tap) {
      out.activation.assign(x.data(), x.data() + x.size());
    }
  }
  out.probs.assign(x.data(), x.data() + x.size());
  return out;
}

// Weight file: {"input_dim": n, "num_classes": k, "activation_tap": i,
// "layers": [{"w": [[...]], "b": [...], "nonlinearity": "relu"}, ...]}.
// All numbers are widened to 64-bit on load; structural invariants are
// rejected here rather than at prediction time.
inline LocalModel local_model_from_json(const nlohmann::json& j) {
  LocalModel model;
  try {
    model.input_dim = j.at("input_dim").get<int>();
    model.num_classes = j.at("num_classes").get<int>();
    model.activation_tap = j.at("activation_tap").get<int>();
    for (const auto& layer_json : j.at("layers")) {
      Layer layer;
      const auto& w = layer_json.at("w");
      if (!w.is_array() || w.empty()) throw ValidationError("layer weight matrix must be a non-empty 2-D array");
      const std::size_t rows = w.size();
      const std::size_t cols = w.at(0).size();
      layer.weights.resize(rows, cols);
      for (std::size_t r = 0; r < rows; ++r) {
        const auto& row = w.at(r);
        if (row.size() != cols) {
          throw ValidationError("layer weight row " + std::to_string(r) + " has " +
                                std::to_string(row.size()) + " entries, expected " +
                                std::to_string(cols));
        }
        for (std::size_t c = 0; c < cols; ++c) layer.weights(r, c) = row.at(c).get<double>();
      }
      const auto& b = layer_json.at("b");
      layer.bias.resize(b.size());
      for (std::size_t i = 0; i < b.size(); ++i) layer.bias(i) = b.at(i).get<double>();
      layer.nonlinearity = nonlinearity_from_string(layer_json.at("nonlinearity").get<std::string>());
      model.layers.push_back(std::move(layer));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed local model: ") + e.what());
  }
  model.validate();
  return model;
}

inline LocalModel load_local_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open local model '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("local model '" + path + "': " + e.what());
  }
  return local_model_from_json(j);
}

}  // namespace cheapet
