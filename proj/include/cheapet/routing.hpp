#pragma once

// Turns a trust score into a local-vs-remote decision and keeps the
// threshold pointed at a target forwarding fraction, either by one-shot
// quantile calibration on a score sample or by online adaptation.
//
// Boundary rule: a score exactly equal to the threshold is TRUSTED
// (>=, not >). Calibration correctness depends on this.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "cheapet/errors.hpp"
#include "cheapet/supervision.hpp"

namespace cheapet {

enum class Route { Local, Remote };

inline std::string to_string(Route route) {
  return route == Route::Local ? "local" : "remote";
}

inline constexpr double kDefaultEmaAlpha = 0.02;
inline constexpr double kDefaultStepGain = 0.5;
// Adaptation leaves the threshold untouched for this many initial decisions
// so a freshly calibrated gateway does not thrash on startup noise.
inline constexpr std::size_t kColdStartDecisions = 50;
inline constexpr std::size_t kScoreWindowCapacity = 256;

struct RoutingPolicy {
  SupervisorKind supervisor_kind = SupervisorKind::SM;
  double threshold = 0.0;
  std::optional<double> target_forward_fraction;
};

struct RoutingDecision {
  bool trusted = false;
  double trust_score = 0.0;
  double threshold_used = 0.0;
  Route route = Route::Remote;
};

// Controller state for online threshold adaptation. The score window is a
// ring buffer feeding the interquartile-range estimate that makes the
// correction step score-scale-aware.
struct AdaptationState {
  double ema_forward_rate = 0.0;
  double ema_alpha = kDefaultEmaAlpha;
  double step_gain = kDefaultStepGain;
  std::size_t decisions_seen = 0;
  std::vector<double> score_window;
  std::size_t window_next = 0;
};

inline AdaptationState make_adaptation_state(double initial_forward_rate,
                                             double ema_alpha = kDefaultEmaAlpha,
                                             double step_gain = kDefaultStepGain) {
  if (!(ema_alpha > 0.0 && ema_alpha <= 1.0)) {
    throw ValidationError("ema_alpha must be in (0, 1]");
  }
  if (!(step_gain > 0.0)) throw ValidationError("step_gain must be positive");
  if (!(initial_forward_rate >= 0.0 && initial_forward_rate <= 1.0)) {
    throw ValidationError("initial forward rate must be in [0, 1]");
  }
  AdaptationState state;
  state.ema_forward_rate = initial_forward_rate;
  state.ema_alpha = ema_alpha;
  state.step_gain = step_gain;
  state.score_window.reserve(kScoreWindowCapacity);
  return state;
}

inline RoutingDecision decide(TrustScore score, const RoutingPolicy& policy) {
  if (!std::isfinite(score.value)) throw ValidationError("trust score is not finite");
  if (!std::isfinite(policy.threshold)) throw ValidationError("routing threshold is not finite");
  const bool trusted = score.value >= policy.threshold;
  return RoutingDecision{trusted, score.value, policy.threshold,
                         trusted ? Route::Local : Route::Remote};
}

struct CalibrationResult {
  double threshold = 0.0;
  double target_forward_fraction = 0.0;
  double achieved_forward_fraction = 0.0;  // measured on the calibration set
};

// Pick the threshold whose forwarding fraction on the calibration set is the
// smallest reachable value >= floor(target*N)/N (the fraction distinct scores
// would achieve exactly). With all-distinct scores this lands within 1/N of
// the target; duplicated scores may force a larger fraction, which is
// reported rather than hidden.
inline CalibrationResult calibrate_threshold(std::vector<double> scores, double target) {
  if (scores.empty()) throw ValidationError("calibrate_threshold: empty score list");
  for (double s : scores) {
    if (!std::isfinite(s)) throw ValidationError("calibrate_threshold: non-finite score");
  }
  if (!(target >= 0.0 && target <= 1.0)) {
    throw ValidationError("target_forward_fraction must be in [0, 1]");
  }
  const std::size_t n = scores.size();
  std::sort(scores.begin(), scores.end());
  if (target == 0.0) {
    return CalibrationResult{scores.front() - 1.0, target, 0.0};  // below everything
  }
  if (target == 1.0) {
    return CalibrationResult{
        std::nextafter(scores.back(), std::numeric_limits<double>::infinity()), target, 1.0};
  }
  const auto desired = static_cast<std::size_t>(
      std::floor(target * static_cast<double>(n) + 1e-9));
  // A forward count c is reachable when the c lowest scores sit strictly
  // below the rest; walk upward from the desired count to the next cut.
  std::size_t count = std::min(desired, n);
  while (count > 0 && count < n && !(scores[count - 1] < scores[count])) ++count;
  double threshold;
  if (count == 0) {
    threshold = scores.front();
  } else if (count == n) {
    threshold = std::nextafter(scores.back(), std::numeric_limits<double>::infinity());
  } else {
    threshold = scores[count];
  }
  return CalibrationResult{threshold, target,
                           static_cast<double>(count) / static_cast<double>(n)};
}

namespace detail {

// Type-7 quantile (linear interpolation) of an unsorted sample.
inline double quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline double interquartile_range(const std::vector<double>& window) {
  if (window.size() < 2) return 0.0;
  return quantile(window, 0.75) - quantile(window, 0.25);
}

}  // namespace detail

// One online-adaptation step. Updates the forwarding-rate EMA from the
// decision, then nudges the threshold against the rate error:
//
//   threshold -= step_gain * (ema_forward_rate - target) * IQR(recent scores)
//
// Forwarding too much lowers the threshold (trusting more), forwarding too
// little raises it. Pure function; the caller serializes concurrent updates.
inline std::pair<AdaptationState, RoutingPolicy> adapt(AdaptationState state,
                                                       RoutingPolicy policy,
                                                       const RoutingDecision& decision) {
  if (!policy.target_forward_fraction) {
    throw ConfigError("adapt requires a target_forward_fraction on the policy");
  }
  const double target = *policy.target_forward_fraction;
  if (!(target >= 0.0 && target <= 1.0)) {
    throw ValidationError("target_forward_fraction must be in [0, 1]");
  }
  const double forwarded = decision.route == Route::Remote ? 1.0 : 0.0;
  state.ema_forward_rate =
      (1.0 - state.ema_alpha) * state.ema_forward_rate + state.ema_alpha * forwarded;
  state.ema_forward_rate = std::clamp(state.ema_forward_rate, 0.0, 1.0);

  if (state.score_window.size() < kScoreWindowCapacity) {
    state.score_window.push_back(decision.trust_score);
  } else {
    state.score_window[state.window_next] = decision.trust_score;
    state.window_next = (state.window_next + 1) % kScoreWindowCapacity;
  }
  state.decisions_seen += 1;

  if (state.decisions_seen > kColdStartDecisions) {
    const double scale = detail::interquartile_range(state.score_window);
    if (scale > 0.0) {
      policy.threshold -= state.step_gain * (state.ema_forward_rate - target) * scale;
    }
  }
  return {std::move(state), policy};
}

}  // namespace cheapet
