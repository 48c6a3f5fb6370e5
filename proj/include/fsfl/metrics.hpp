#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace fsfl {

struct DeviceMetrics {
  double acc = 0.0;
  std::optional<double> top5;          // classes > 5 only
  std::optional<double> distill_loss;  // CMFD only; c(w) before the distillation step
  std::uint64_t bytes = 0;             // sent this epoch

  bool operator==(const DeviceMetrics&) const = default;
};

struct MetricsRecord {
  std::size_t epoch = 0;
  std::vector<DeviceMetrics> devices;
  std::optional<double> d_t;

  double acc() const;
  double max_min() const;
  std::optional<double> top5() const;
  std::optional<double> mean_distill_loss() const;
  std::uint64_t bytes() const;

  bool operator==(const MetricsRecord&) const = default;
};

}  // namespace fsfl
