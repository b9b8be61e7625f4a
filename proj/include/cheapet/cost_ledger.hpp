#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>

#include "cheapet/errors.hpp"

namespace cheapet {

// Monotone accounting of local/remote request counts and accumulated remote
// cost. Updates are atomic; a snapshot may lag concurrent writers but each
// counter is exact once writers quiesce.
class CostLedger {
 public:
  explicit CostLedger(std::string currency_unit = "USD")
      : currency_unit_(std::move(currency_unit)) {}

  void record_local() { local_.fetch_add(1, std::memory_order_relaxed); }

  void record_remote(double cost_units) {
    if (!(cost_units >= 0.0) || !std::isfinite(cost_units)) {
      throw ValidationError("remote cost must be a non-negative finite number");
    }
    remote_.fetch_add(1, std::memory_order_relaxed);
    double current = cost_.load(std::memory_order_relaxed);
    while (!cost_.compare_exchange_weak(current, current + cost_units,
                                        std::memory_order_relaxed)) {
    }
  }

  struct Snapshot {
    std::uint64_t local_count = 0;
    std::uint64_t remote_count = 0;
    double remote_cost_total = 0.0;
    std::string currency_unit;
  };

  Snapshot snapshot() const {
    return Snapshot{local_.load(std::memory_order_relaxed),
                    remote_.load(std::memory_order_relaxed),
                    cost_.load(std::memory_order_relaxed), currency_unit_};
  }

 private:
  std::atomic<std::uint64_t> local_{0};
  std::atomic<std::uint64_t> remote_{0};
  std::atomic<double> cost_{0.0};
  std::string currency_unit_;
};

}  // namespace cheapet
