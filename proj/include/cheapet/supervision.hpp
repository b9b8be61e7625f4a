#pragma once

// Trust scoring for local predictions. Two supervisors are provided:
//
//   SM    Vanilla Softmax: the maximum softmax probability of the local
//           prediction, used directly as a confidence score.
//   MDSA  Mahalanobis-Distance Surprise Adequacy: distance between an
//           input's tap-layer activation and the fitted activation
//           distribution of the training set, d(x) = sqrt((x-mu)' P (x-mu))
//           with P the regularized precision matrix. Larger distance means
//           a more surprising input, hence a less trustworthy prediction.
//
// Both are normalized into a TrustScore where higher always means more
// trustworthy: SM confidence as-is, MDSA distance negated. The router
// compares every supervisor with the same rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <json.hpp>

#include "cheapet/errors.hpp"

namespace cheapet {

using ClassId = int;

// Reserved class id used when a model is fitted without class conditioning.
inline constexpr ClassId kGlobalClass = -1;

inline constexpr double kProbSumTolerance = 1e-6;
inline constexpr double kDefaultLambdaScale = 1e-6;
// Absolute floor for the covariance shrinkage lambda; keeps zero-variance
// features invertible. Applied only when lambda_scale > 0 so that
// lambda_scale == 0 still means "no regularization at all".
inline constexpr double kLambdaFloor = 1e-12;
inline constexpr double kPrecisionSymmetryTolerance = 1e-9;

enum class SupervisorKind { SM, MDSA };

inline std::string to_string(SupervisorKind kind) {
  return kind == SupervisorKind::SM ? "sm" : "mdsa";
}

inline SupervisorKind supervisor_from_string(const std::string& name) {
  if (name == "sm" || name == "SM") return SupervisorKind::SM;
  if (name == "mdsa" || name == "MDSA") return SupervisorKind::MDSA;
  throw ValidationError("unknown supervisor kind '" + name + "' (expected sm or mdsa)");
}

// Orientation-normalized supervisor output; higher = more trustworthy.
// SM scores live in [1/K, 1], MDSA scores are -distance, hence <= 0.
struct TrustScore {
  double value = 0.0;
};

inline void validate_probability_vector(const std::vector<double>& probs) {
  if (probs.size() < 2) {
    throw ValidationError("probability vector must have K >= 2 entries, got " +
                          std::to_string(probs.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (!(p >= 0.0 && p <= 1.0)) {  // NaN fails both comparisons
      throw ValidationError("probability entry " + std::to_string(i) + " = " +
                            std::to_string(p) + " is outside [0, 1]");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > kProbSumTolerance) {
    throw ValidationError("probabilities sum to " + std::to_string(sum) +
                          ", expected 1 within " + std::to_string(kProbSumTolerance));
  }
}

inline void validate_activation_vector(const std::vector<double>& activation) {
  if (activation.empty()) {
    throw ValidationError("activation vector must be non-empty");
  }
  for (std::size_t i = 0; i < activation.size(); ++i) {
    if (!std::isfinite(activation[i])) {
      throw ValidationError("activation entry " + std::to_string(i) + " is not finite");
    }
  }
}

// Index of the largest entry; lowest index wins ties.
inline ClassId argmax_class(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("argmax of empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<ClassId>(best);
}

// Maximum softmax probability as a confidence score.
inline double softmax_confidence(const std::vector<double>& probs) {
  validate_probability_vector(probs);
  return *std::max_element(probs.begin(), probs.end());
}

struct MdsaClassStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd precision;  // (Sigma + lambda I)^-1, symmetric positive definite
};

// Fitted activation-distribution model. Immutable after fit; safe for
// unlimited concurrent readers.
struct MdsaModel {
  std::map<ClassId, MdsaClassStats> per_class;
  double lambda_scale = kDefaultLambdaScale;
  bool class_conditional = true;

  int dimension() const {
    return per_class.empty() ? 0 : static_cast<int>(per_class.begin()->second.mean.size());
  }
};

namespace detail {

inline double effective_lambda(double lambda_scale, double trace, int dim) {
  if (lambda_scale == 0.0) return 0.0;
  return std::max(lambda_scale * trace / static_cast<double>(dim), kLambdaFloor);
}

// Regularize, factor, and invert one covariance. Throws SingularityError
// when the Cholesky factorization reports a non-SPD matrix.
inline Eigen::MatrixXd precision_from_covariance(const Eigen::MatrixXd& covariance,
                                                 double lambda_scale,
                                                 const std::string& label) {
  const int d = static_cast<int>(covariance.rows());
  const double lambda = effective_lambda(lambda_scale, covariance.trace(), d);
  Eigen::MatrixXd regularized = covariance;
  regularized.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(regularized);
  if (llt.info() != Eigen::Success) {
    throw SingularityError("covariance for " + label +
                           " is not positive definite after regularization (lambda = " +
                           std::to_string(lambda) + ")");
  }
  Eigen::MatrixXd precision = llt.solve(Eigen::MatrixXd::Identity(d, d));
  // Solve output carries rounding asymmetry in the last bits; store the
  // symmetric part so the model invariant holds exactly.
  precision = ((precision + precision.transpose()) * 0.5).eval();
  return precision;
}

}  // namespace detail

// Fit per-class (or global) activation means and regularized precision
// matrices. Covariance uses the n-1 denominator; every fitted class needs
// at least d+1 samples. labels are ignored when class_conditional is false.
inline MdsaModel fit_mdsa(const std::vector<std::vector<double>>& activations,
                          const std::vector<ClassId>& labels,
                          bool class_conditional,
                          double lambda_scale = kDefaultLambdaScale) {
  if (activations.empty()) throw ValidationError("fit_mdsa: no activation vectors");
  if (!(lambda_scale >= 0.0) || !std::isfinite(lambda_scale)) {
    throw ValidationError("fit_mdsa: lambda_scale must be a non-negative real");
  }
  const std::size_t d = activations.front().size();
  for (std::size_t i = 0; i < activations.size(); ++i) {
    validate_activation_vector(activations[i]);
    if (activations[i].size() != d) {
      throw ValidationError("fit_mdsa: activation " + std::to_string(i) + " has dimension " +
                            std::to_string(activations[i].size()) + ", expected " +
                            std::to_string(d));
    }
  }
  if (class_conditional && labels.size() != activations.size()) {
    throw ValidationError("fit_mdsa: " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(activations.size()) + " activations");
  }

  std::map<ClassId, std::vector<std::size_t>> groups;
  if (class_conditional) {
    for (std::size_t i = 0; i < activations.size(); ++i) groups[labels[i]].push_back(i);
  } else {
    auto& all = groups[kGlobalClass];
    all.resize(activations.size());
    for (std::size_t i = 0; i < activations.size(); ++i) all[i] = i;
  }

  MdsaModel model;
  model.lambda_scale = lambda_scale;
  model.class_conditional = class_conditional;

  for (const auto& [cls, indices] : groups) {
    const std::size_t n = indices.size();
    if (n < d + 1) {
      throw InsufficientDataError("class " + std::to_string(cls) + " has " + std::to_string(n) +
                                  " samples, need at least d+1 = " + std::to_string(d + 1));
    }
    Eigen::MatrixXd samples(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      samples.row(r) = Eigen::Map<const Eigen::VectorXd>(activations[indices[r]].data(), d);
    }
    const Eigen::VectorXd mean = samples.colwise().mean();
    const Eigen::MatrixXd centered = samples.rowwise() - mean.transpose();
    const Eigen::MatrixXd covariance =
        (centered.transpose() * centered) / static_cast<double>(n - 1);
    MdsaClassStats stats;
    stats.mean = mean;
    stats.precision = detail::precision_from_covariance(covariance, lambda_scale,
                                                        "class " + std::to_string(cls));
    model.per_class.emplace(cls, std::move(stats));
  }
  return model;
}

// Build a model directly from known moments instead of samples. Useful when
// means/covariances are computed elsewhere (and for oracle tests).
inline MdsaModel mdsa_from_moments(
    const std::map<ClassId, std::pair<Eigen::VectorXd, Eigen::MatrixXd>>& moments,
    bool class_conditional,
    double lambda_scale = kDefaultLambdaScale) {
  if (moments.empty()) throw ValidationError("mdsa_from_moments: no classes");
  if (!(lambda_scale >= 0.0) || !std::isfinite(lambda_scale)) {
    throw ValidationError("mdsa_from_moments: lambda_scale must be a non-negative real");
  }
  MdsaModel model;
  model.lambda_scale = lambda_scale;
  model.class_conditional = class_conditional;
  const auto d = moments.begin()->second.first.size();
  for (const auto& [cls, mc] : moments) {
    const auto& [mean, covariance] = mc;
    if (mean.size() != d || covariance.rows() != d || covariance.cols() != d) {
      throw ValidationError("mdsa_from_moments: inconsistent dimensions for class " +
                            std::to_string(cls));
    }
    MdsaClassStats stats;
    stats.mean = mean;
    stats.precision = detail::precision_from_covariance(covariance, lambda_scale,
                                                        "class " + std::to_string(cls));
    model.per_class.emplace(cls, std::move(stats));
  }
  if (!class_conditional &&
      (model.per_class.size() != 1 || model.per_class.begin()->first != kGlobalClass)) {
    throw ValidationError("global model must hold exactly one entry under the reserved class id");
  }
  return model;
}

// Mahalanobis distance of an activation to the fitted distribution of
// predicted_class (or the global distribution). Zero iff x equals the mean.
inline double mdsa_distance(const MdsaModel& model,
                            const std::vector<double>& activation,
                            ClassId predicted_class) {
  validate_activation_vector(activation);
  const ClassId key = model.class_conditional ? predicted_class : kGlobalClass;
  const auto it = model.per_class.find(key);
  if (it == model.per_class.end()) {
    throw LookupError("mdsa model has no statistics for class " + std::to_string(key));
  }
  const MdsaClassStats& stats = it->second;
  if (static_cast<Eigen::Index>(activation.size()) != stats.mean.size()) {
    throw ValidationError("activation dimension " + std::to_string(activation.size()) +
                          " does not match model dimension " + std::to_string(stats.mean.size()));
  }
  const Eigen::Map<const Eigen::VectorXd> x(activation.data(), activation.size());
  const Eigen::VectorXd diff = x - stats.mean;
  const double q = diff.dot(stats.precision * diff);
  return std::sqrt(std::max(q, 0.0));
}

// Unified scoring entry point. SM needs local probabilities; MDSA needs the
// activation vector plus a fitted model, and scores against the class the
// local model predicted (argmax of local_probs, lowest index on ties).
inline TrustScore trust_score(SupervisorKind kind,
                              const std::vector<double>& local_probs,
                              const std::vector<double>& activation,
                              const MdsaModel* mdsa = nullptr) {
  switch (kind) {
    case SupervisorKind::SM:
      if (local_probs.empty()) {
        throw ConfigError("SM supervisor requires local probabilities");
      }
      return TrustScore{softmax_confidence(local_probs)};
    case SupervisorKind::MDSA: {
      if (mdsa == nullptr) throw ConfigError("MDSA supervisor requires a fitted model");
      if (activation.empty()) throw ConfigError("MDSA supervisor requires an activation vector");
      if (local_probs.empty()) {
        throw ConfigError("MDSA supervisor requires local probabilities to pick the predicted class");
      }
      validate_probability_vector(local_probs);
      const ClassId predicted = argmax_class(local_probs);
      return TrustScore{-mdsa_distance(*mdsa, activation, predicted)};
    }
  }
  throw ConfigError("unknown supervisor kind");
}

// ---------------------------------------------------------------------------
// Model store (JSON)

inline constexpr const char* kMdsaFormatTag = "cheapet-mdsa";
inline constexpr int kMdsaFormatVersion = 1;

inline nlohmann::json mdsa_to_json(const MdsaModel& model) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [cls, stats] : model.per_class) {
    nlohmann::json mean = nlohmann::json::array();
    for (Eigen::Index i = 0; i < stats.mean.size(); ++i) mean.push_back(stats.mean(i));
    nlohmann::json precision = nlohmann::json::array();
    for (Eigen::Index r = 0; r < stats.precision.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < stats.precision.cols(); ++c) row.push_back(stats.precision(r, c));
      precision.push_back(std::move(row));
    }
    classes.push_back({{"class_id", cls}, {"mean", std::move(mean)}, {"precision", std::move(precision)}});
  }
  return nlohmann::json{{"format", kMdsaFormatTag},
                        {"version", kMdsaFormatVersion},
                        {"class_conditional", model.class_conditional},
                        {"lambda_scale", model.lambda_scale},
                        {"dimension", model.dimension()},
                        {"classes", std::move(classes)}};
}

inline void save_mdsa(const MdsaModel& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << mdsa_to_json(model).dump(2) << '\n';
  if (!out) throw IoError("failed writing mdsa model to '" + path + "'");
}

// Validates the full model invariant set: consistent dimensions, symmetric
// precision within 1e-9, positive definiteness, and the single-global-entry
// rule for unconditioned models.
inline MdsaModel mdsa_from_json(const nlohmann::json& j) {
  MdsaModel model;
  try {
    if (j.value("format", "") != kMdsaFormatTag) {
      throw ValidationError("not an mdsa model file (missing format tag)");
    }
    model.class_conditional = j.at("class_conditional").get<bool>();
    model.lambda_scale = j.at("lambda_scale").get<double>();
    const int d = j.at("dimension").get<int>();
    if (d < 1) throw ValidationError("mdsa model dimension must be >= 1");
    for (const auto& entry : j.at("classes")) {
      const ClassId cls = entry.at("class_id").get<ClassId>();
      MdsaClassStats stats;
      const auto& mean = entry.at("mean");
      if (static_cast<int>(mean.size()) != d) {
        throw ValidationError("mean for class " + std::to_string(cls) + " has dimension " +
                              std::to_string(mean.size()) + ", expected " + std::to_string(d));
      }
      stats.mean.resize(d);
      for (int i = 0; i < d; ++i) stats.mean(i) = mean.at(i).get<double>();
      const auto& precision = entry.at("precision");
      if (static_cast<int>(precision.size()) != d) {
        throw ValidationError("precision for class " + std::to_string(cls) + " is not " +
                              std::to_string(d) + "x" + std::to_string(d));
      }
      stats.precision.resize(d, d);
      for (int r = 0; r < d; ++r) {
        const auto& row = precision.at(r);
        if (static_cast<int>(row.size()) != d) {
          throw ValidationError("precision row " + std::to_string(r) + " for class " +
                                std::to_string(cls) + " has " + std::to_string(row.size()) +
                                " entries, expected " + std::to_string(d));
        }
        for (int c = 0; c < d; ++c) stats.precision(r, c) = row.at(c).get<double>();
      }
      if (!stats.precision.allFinite()) {
        throw ValidationError("precision for class " + std::to_string(cls) + " has non-finite entries");
      }
      const double asym = (stats.precision - stats.precision.transpose()).cwiseAbs().maxCoeff();
      if (asym > kPrecisionSymmetryTolerance) {
        throw ValidationError("precision for class " + std::to_string(cls) +
                              " is asymmetric beyond tolerance (" + std::to_string(asym) + ")");
      }
      Eigen::LLT<Eigen::MatrixXd> llt(stats.precision);
      if (llt.info() != Eigen::Success) {
        throw ValidationError("precision for class " + std::to_string(cls) +
                              " is not positive definite");
      }
      model.per_class.emplace(cls, std::move(stats));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed mdsa model: ") + e.what());
  }
  if (model.per_class.empty()) throw ValidationError("mdsa model has no classes");
  if (!model.class_conditional &&
      (model.per_class.size() != 1 || model.per_class.begin()->first != kGlobalClass)) {
    throw ValidationError("global mdsa model must hold exactly one entry under the reserved class id");
  }
  return model;
}

inline MdsaModel load_mdsa(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mdsa model '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("mdsa model '" + path + "': " + e.what());
  }
  return mdsa_from_json(j);
}

}  // namespace cheapet
