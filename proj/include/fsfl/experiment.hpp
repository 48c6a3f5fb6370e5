#pragma once

#include "fsfl/cmfd.hpp"
#include "fsfl/data.hpp"
#include "fsfl/graph.hpp"
#include "fsfl/meta.hpp"
#include "fsfl/metrics.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace fsfl {

inline constexpr const char* kVersion = "1.0.0";
inline constexpr int kConfigSchemaVersion = 1;

enum class Algorithm { Meta, Cmfd, ParamAvg, Toy };

std::string to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

struct DatasetSpec {
  std::string source = "blobs";  // blobs | mnist
  std::size_t classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  double spread = 0.15;
  double radius = 1.0;
  std::size_t per_device = 200;
  std::size_t labels_per_device = 2;
  std::string rule = "ring";  // ring | random
  std::size_t public_size = 500;
  std::string images, labels, test_images, test_labels;  // mnist paths
};

struct MetaSpec {
  std::size_t grid_size = 64;
  std::size_t dim_out = 1;
  std::string loss = "mse";          // mse | kl
  std::string measures = "two-block";  // two-block | iid | data
  std::string init = "auto";         // auto | zero | uniform | random
  double headroom = 1.1;
};

struct ToySpec {
  ToyState init{ToyDevice{0.5, 0.5}, ToyDevice{-2.0, -1.0}};
  ToyScheme scheme = ToyScheme::Distill;
  std::vector<double> x{-1.0, -0.5, 0.5, 1.0};
};

struct ExperimentConfig {
  Algorithm algorithm = Algorithm::Cmfd;
  TopologySpec topology;
  EtaSchedule eta{EtaSchedule::Kind::Constant, 0.01};
  std::optional<double> sharing_rate;  // unset: 1/(2 Delta) of the static graph
  std::size_t epochs = 100;
  DatasetSpec dataset;
  std::vector<ModelSpec> models{ModelSpec{{64}}};
  std::size_t batch_size = 50;
  std::size_t distill_batch_size = 50;
  std::size_t eval_every = 1;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  MetaSpec meta;
  ToySpec toy;
  std::string output_dir = "out";
  bool telemetry = false;
  bool dump_functions = false;
};

/// Missing fields keep their defaults; unknown fields are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
/// Fully resolved form, including every seed.
nlohmann::json to_json(const ExperimentConfig& c);

struct Summary {
  std::size_t records = 0;
  std::size_t final_epoch = 0;
  double acc = 0.0;
  double max_min = 0.0;
  double dev = 0.0;
  std::size_t dev_window = 0;
  bool dev_window_short = false;  // fewer records than the 100-record window
  std::optional<double> top5;
  std::optional<double> distill_loss;
  std::optional<double> d_t;
  std::uint64_t bytes = 0;  // last recorded epoch, all devices
};

inline constexpr std::size_t kDevWindow = 100;

/// Pure function of the stream. Throws ParameterError on an empty stream.
Summary summarize(std::span<const MetricsRecord> records, std::size_t dev_window = kDevWindow);
nlohmann::json to_json(const Summary& s);

/// Mean distillation loss averaged over `window` consecutive records from `first`.
double distill_window_mean(std::span<const MetricsRecord> records, std::size_t first, std::size_t window);

struct RunResult {
  std::vector<MetricsRecord> records;
  std::optional<Summary> summary;
  std::optional<MetaTrace> trace;
  std::optional<MetaProblem> problem;
  std::optional<SampleGrid> grid;
  std::vector<ToyState> toy;
  std::vector<BroadcastRecord> broadcasts;
  std::vector<std::string> warnings;
};

/// Assembles local, public and test data; local rows never appear in the test set.
FederatedData build_data(const ExperimentConfig& c);

/// The meta-algorithm instance described by the config, and its grid.
MetaProblem build_meta_problem(const ExperimentConfig& c, SampleGrid* grid_out = nullptr);

RunResult run(const ExperimentConfig& c);

void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> records);
void write_metrics_jsonl(std::ostream& os, std::span<const MetricsRecord> records);
void write_broadcast_jsonl(std::ostream& os, std::span<const BroadcastRecord> records);
void write_toy_csv(std::ostream& os, std::span<const ToyState> trajectory);

/// Writes resolved_config.json and the run's outputs into `dir`.
std::vector<std::filesystem::path> export_run(const RunResult& r, const ExperimentConfig& c,
                                              const std::filesystem::path& dir);

/// Shortest round-trip decimal form.
std::string format_double(double v);

}  // namespace fsfl
