#include "fsfl/experiment.hpp"

#include "fsfl/errors.hpp"
#include "fsfl/idx.hpp"
#include "fsfl/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace fsfl {

// ---- MetricsRecord --------------------------------------------------------

double MetricsRecord::acc() const {
  if (devices.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : devices) s += d.acc;
  return s / static_cast<double>(devices.size());
}

double MetricsRecord::max_min() const {
  if (devices.empty()) return 0.0;
  const auto [lo, hi] = std::minmax_element(devices.begin(), devices.end(),
                                            [](const DeviceMetrics& a, const DeviceMetrics& b) { return a.acc < b.acc; });
  return hi->acc - lo->acc;
}

std::optional<double> MetricsRecord::top5() const {
  if (devices.empty() || !devices.front().top5) return std::nullopt;
  double s = 0.0;
  for (const auto& d : devices) s += d.top5.value_or(0.0);
  return s / static_cast<double>(devices.size());
}

std::optional<double> MetricsRecord::mean_distill_loss() const {
  double s = 0.0;
  std::size_t k = 0;
  for (const auto& d : devices)
    if (d.distill_loss) {
      s += *d.distill_loss;
      ++k;
    }
  if (k == 0) return std::nullopt;
  return s / static_cast<double>(k);
}

std::uint64_t MetricsRecord::bytes() const {
  std::uint64_t s = 0;
  for (const auto& d : devices) s += d.bytes;
  return s;
}

// ---- config ---------------------------------------------------------------

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Meta: return "meta";
    case Algorithm::Cmfd: return "cmfd";
    case Algorithm::ParamAvg: return "param_avg";
    case Algorithm::Toy: return "toy";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& s) {
  if (s == "meta") return Algorithm::Meta;
  if (s == "cmfd") return Algorithm::Cmfd;
  if (s == "param_avg" || s == "paramavg") return Algorithm::ParamAvg;
  if (s == "toy") return Algorithm::Toy;
  throw ConfigError("unknown algorithm '" + s + "'");
}

namespace {

void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw ConfigError("unknown field '" + key + "' in " + where);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ModelSpec model_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"hidden", "dropout"}, "model spec");
  ModelSpec m;
  m.hidden.clear();
  read(j, "hidden", m.hidden);
  read(j, "dropout", m.dropout);
  return m;
}

ToyScheme parse_scheme(const std::string& s) {
  if (s == "distill") return ToyScheme::Distill;
  if (s == "avg" || s == "param_avg") return ToyScheme::ParamAvg;
  throw ConfigError("unknown toy scheme '" + s + "'");
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  try {
    reject_unknown(j,
                   {"algorithm", "topology", "eta", "sharing_rate", "epochs", "dataset", "models", "batch_size",
                    "distill_batch_size", "eval_every", "threads", "seed", "meta", "toy", "output_dir", "telemetry",
                    "dump_functions", "schema_version"},
                   "config");
    ExperimentConfig c;
    if (j.contains("algorithm")) c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
    read(j, "seed", c.seed);
    if (j.contains("topology")) {
      c.topology = topology_spec_from_json(j.at("topology"));
      if (!j.at("topology").contains("seed")) c.topology.seed = c.seed;
    } else {
      c.topology.seed = c.seed;
    }
    if (j.contains("eta")) {
      const auto& e = j.at("eta");
      c.eta = e.is_number() ? EtaSchedule{EtaSchedule::Kind::Constant, e.get<double>()}
                            : EtaSchedule::parse(e.get<std::string>());
    }
    if (j.contains("sharing_rate")) {
      const auto& s = j.at("sharing_rate");
      if (s.is_string()) {
        if (s.get<std::string>() != "max") throw ConfigError("sharing_rate must be a number or \"max\"");
        c.sharing_rate.reset();
      } else {
        c.sharing_rate = s.get<double>();
      }
    }
    read(j, "epochs", c.epochs);
    read(j, "batch_size", c.batch_size);
    read(j, "distill_batch_size", c.distill_batch_size);
    read(j, "eval_every", c.eval_every);
    read(j, "threads", c.threads);
    read(j, "output_dir", c.output_dir);
    read(j, "telemetry", c.telemetry);
    read(j, "dump_functions", c.dump_functions);
    if (j.contains("models")) {
      c.models.clear();
      for (const auto& m : j.at("models")) c.models.push_back(model_from_json(m));
      if (c.models.empty()) throw ConfigError("models must not be empty");
    }
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      reject_unknown(d,
                     {"source", "classes", "train_per_class", "test_per_class", "spread", "radius", "per_device",
                      "labels_per_device", "rule", "public_size", "images", "labels", "test_images", "test_labels"},
                     "dataset");
      auto& s = c.dataset;
      read(d, "source", s.source);
      read(d, "classes", s.classes);
      read(d, "train_per_class", s.train_per_class);
      read(d, "test_per_class", s.test_per_class);
      read(d, "spread", s.spread);
      read(d, "radius", s.radius);
      read(d, "per_device", s.per_device);
      read(d, "labels_per_device", s.labels_per_device);
      read(d, "rule", s.rule);
      read(d, "public_size", s.public_size);
      read(d, "images", s.images);
      read(d, "labels", s.labels);
      read(d, "test_images", s.test_images);
      read(d, "test_labels", s.test_labels);
    }
    if (j.contains("meta")) {
      const auto& m = j.at("meta");
      reject_unknown(m, {"grid_size", "dim_out", "loss", "measures", "init", "headroom"}, "meta");
      read(m, "grid_size", c.meta.grid_size);
      read(m, "dim_out", c.meta.dim_out);
      read(m, "loss", c.meta.loss);
      read(m, "measures", c.meta.measures);
      read(m, "init", c.meta.init);
      read(m, "headroom", c.meta.headroom);
    }
    if (j.contains("toy")) {
      const auto& t = j.at("toy");
      reject_unknown(t, {"init", "scheme", "x"}, "toy");
      if (t.contains("init")) {
        const auto v = t.at("init").get<std::vector<double>>();
        if (v.size() != 4) throw ConfigError("toy.init needs four numbers wa0,wb0,wa1,wb1");
        c.toy.init = ToyState{ToyDevice{v[0], v[1]}, ToyDevice{v[2], v[3]}};
      }
      if (t.contains("scheme")) c.toy.scheme = parse_scheme(t.at("scheme").get<std::string>());
      read(t, "x", c.toy.x);
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : c.models) models.push_back({{"hidden", m.hidden}, {"dropout", m.dropout}});
  const auto& d = c.dataset;
  nlohmann::json j{
      {"schema_version", kConfigSchemaVersion},
      {"algorithm", to_string(c.algorithm)},
      {"seed", c.seed},
      {"topology", to_json(c.topology)},
      {"eta", c.eta.to_string()},
      {"epochs", c.epochs},
      {"models", models},
      {"batch_size", c.batch_size},
      {"distill_batch_size", c.distill_batch_size},
      {"eval_every", c.eval_every},
      {"threads", c.threads},
      {"dataset",
       {{"source", d.source}, {"classes", d.classes}, {"train_per_class", d.train_per_class},
        {"test_per_class", d.test_per_class}, {"spread", d.spread}, {"radius", d.radius},
        {"per_device", d.per_device}, {"labels_per_device", d.labels_per_device}, {"rule", d.rule},
        {"public_size", d.public_size}, {"images", d.images}, {"labels", d.labels},
        {"test_images", d.test_images}, {"test_labels", d.test_labels}}},
      {"meta",
       {{"grid_size", c.meta.grid_size}, {"dim_out", c.meta.dim_out}, {"loss", c.meta.loss},
        {"measures", c.meta.measures}, {"init", c.meta.init}, {"headroom", c.meta.headroom}}},
      {"toy",
       {{"init", {c.toy.init[0].wa, c.toy.init[0].wb, c.toy.init[1].wa, c.toy.init[1].wb}},
        {"scheme", c.toy.scheme == ToyScheme::Distill ? "distill" : "avg"},
        {"x", c.toy.x}}},
      {"output_dir", c.output_dir},
      {"telemetry", c.telemetry},
      {"dump_functions", c.dump_functions},
  };
  if (c.sharing_rate) j["sharing_rate"] = *c.sharing_rate;
  else j["sharing_rate"] = "max";
  return j;
}

// ---- summary --------------------------------------------------------------

Summary summarize(std::span<const MetricsRecord> records, std::size_t dev_window) {
  if (records.empty()) throw ParameterError("summarize: empty metrics stream");
  const auto& last = records.back();
  Summary s;
  s.records = records.size();
  s.final_epoch = last.epoch;
  s.acc = last.acc();
  s.max_min = last.max_min();
  s.top5 = last.top5();
  s.distill_loss = last.mean_distill_loss();
  s.d_t = last.d_t;
  s.bytes = last.bytes();
  s.dev_window = std::min(dev_window, records.size());
  s.dev_window_short = records.size() < dev_window;
  const auto window = records.subspan(records.size() - s.dev_window);
  const std::size_t n = last.devices.size();
  double dev_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double shift = window.front().devices.at(i).acc;
    double mean = 0.0;
    for (const auto& r : window) mean += r.devices.at(i).acc - shift;
    mean /= static_cast<double>(window.size());
    double var = 0.0;
    for (const auto& r : window) {
      const double dv = r.devices.at(i).acc - shift - mean;
      var += dv * dv;
    }
    dev_sum += std::sqrt(var / static_cast<double>(window.size()));
  }
  s.dev = n == 0 ? 0.0 : dev_sum / static_cast<double>(n);
  return s;
}

nlohmann::json to_json(const Summary& s) {
  nlohmann::json j{{"records", s.records},       {"final_epoch", s.final_epoch},
                   {"acc", s.acc},               {"max_min", s.max_min},
                   {"dev", s.dev},               {"dev_window", s.dev_window},
                   {"dev_window_short", s.dev_window_short}, {"bytes", s.bytes}};
  j["top5"] = s.top5 ? nlohmann::json(*s.top5) : nlohmann::json(nullptr);
  j["distill_loss"] = s.distill_loss ? nlohmann::json(*s.distill_loss) : nlohmann::json(nullptr);
  j["d_t"] = s.d_t ? nlohmann::json(*s.d_t) : nlohmann::json(nullptr);
  return j;
}

double distill_window_mean(std::span<const MetricsRecord> records, std::size_t first, std::size_t window) {
  if (window == 0 || first + window > records.size()) throw ParameterError("distill_window_mean: window out of range");
  double s = 0.0;
  std::size_t k = 0;
  for (const auto& r : records.subspan(first, window))
    if (auto v = r.mean_distill_loss()) {
      s += *v;
      ++k;
    }
  if (k == 0) throw ParameterError("distill_window_mean: no distillation losses in window");
  return s / static_cast<double>(k);
}

// ---- data and problems ----------------------------------------------------

FederatedData build_data(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const std::size_t n = c.topology.n;
  LabeledDataset train, test;
  bool same_root = true;
  if (d.source == "blobs") {
    const auto full = synth_blobs(d.classes, d.train_per_class + d.test_per_class, d.spread, c.seed, d.radius);
    auto split = train_test_split(full, d.test_per_class, c.seed);
    train = std::move(split.train);
    test = std::move(split.test);
  } else if (d.source == "mnist") {
    if (d.images.empty() || d.labels.empty()) throw ConfigError("mnist source needs dataset.images and dataset.labels");
    auto pool = mnist_load(d.images, d.labels);
    if (!d.test_images.empty()) {
      train = std::move(pool);
      test = mnist_load(d.test_images, d.test_labels);
      same_root = false;
    } else {
      auto split = train_test_split(pool, d.test_per_class, c.seed);
      train = std::move(split.train);
      test = std::move(split.test);
    }
    test.num_classes = train.num_classes = std::max(train.num_classes, test.num_classes);
  } else {
    throw ConfigError("unknown dataset source '" + d.source + "'");
  }

  FederatedData out;
  if (d.rule == "ring") out.locals = partition_ring(train, n, d.per_device, c.seed, d.labels_per_device);
  else if (d.rule == "random") out.locals = partition_random_pairs(train, n, d.per_device, c.seed, d.labels_per_device);
  else throw ConfigError("unknown partition rule '" + d.rule + "'");
  out.shared = make_public(train, d.public_size, c.seed);
  out.test = std::move(test);

  if (same_root) {
    const std::set<std::size_t> held_out(out.test.origin.begin(), out.test.origin.end());
    for (const auto& l : out.locals)
      for (auto o : l.origin)
        if (held_out.count(o)) throw ConfigError("local row " + std::to_string(o) + " is also in the test set");
  }
  return out;
}

MetaProblem build_meta_problem(const ExperimentConfig& c, SampleGrid* grid_out) {
  const auto& m = c.meta;
  const std::size_t n = c.topology.n;
  const std::size_t S = m.grid_size;
  if (S < 2) throw ConfigError("meta.grid_size must be at least 2");
  const bool kl = m.loss == "kl";
  if (!kl && m.loss != "mse") throw ConfigError("unknown meta loss '" + m.loss + "'");
  const std::size_t M = m.dim_out;
  if (M == 0 || (kl && M < 2)) throw ConfigError("meta.dim_out must be at least 1 (2 for KL)");

  SampleGrid grid;
  std::vector<MeasureWeights> locals;
  if (m.measures == "data") {
    const auto ds = synth_blobs(c.dataset.classes, c.dataset.train_per_class, c.dataset.spread, c.seed,
                                c.dataset.radius);
    grid = grid_from_pool(ds.inputs, S, c.seed, M);
    const auto parts = partition_ring(ds, n, c.dataset.per_device, c.seed, c.dataset.labels_per_device);
    const auto ms = measures_from_partition(parts, grid);
    for (std::size_t i = 0; i < n; ++i) locals.push_back(ms.local(i));
  } else {
    grid = SampleGrid::linspace(-1.0, 1.0, S, M);
    for (std::size_t i = 0; i < n; ++i) {
      MeasureWeights w = MeasureWeights::Zero(static_cast<Eigen::Index>(S));
      if (m.measures == "iid") {
        w.setConstant(1.0 / static_cast<double>(S));
      } else if (m.measures == "two-block") {
        // devices 0..n/2-1 on the left half of the grid, the rest on the right half
        const std::size_t half = S / 2;
        const bool left = i < n / 2;
        const std::size_t lo = left ? 0 : half, hi = left ? half : S;
        for (std::size_t s = lo; s < hi; ++s) w(static_cast<Eigen::Index>(s)) = 1.0 / static_cast<double>(hi - lo);
      } else {
        throw ConfigError("unknown meta measures '" + m.measures + "'");
      }
      locals.push_back(std::move(w));
    }
  }

  FunctionGrid target(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(M));
  for (Eigen::Index s = 0; s < target.rows(); ++s) {
    double u = 0.0;
    for (Eigen::Index k = 0; k < grid.points.cols(); ++k) u += grid.points(s, k);
    for (Eigen::Index k = 0; k < target.cols(); ++k)
      target(s, k) = kl ? std::cos(std::numbers::pi * u + 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(M))
                        : std::sin(std::numbers::pi * u + std::numbers::pi * static_cast<double>(k) / static_cast<double>(M));
    if (kl) {
      auto row = target.row(s);
      row = (row.array() - row.maxCoeff()).exp().matrix();
      row /= row.sum();
    }
  }

  std::string init = m.init;
  if (init == "auto") init = kl ? "uniform" : "zero";
  FederatedGrid f0;
  if (init == "zero") {
    if (kl) throw ConfigError("zero initialization is outside the KL domain");
    f0 = FederatedGrid::zeros(n, static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(M));
  } else if (init == "uniform") {
    f0 = FederatedGrid::replicate(n, FunctionGrid::Constant(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(M),
                                                            1.0 / static_cast<double>(M)));
  } else if (init == "random") {
    std::vector<FunctionGrid> parts;
    std::normal_distribution<double> g(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(c.seed, {kInitStream, i}));
      FunctionGrid p(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(M));
      for (Eigen::Index s = 0; s < p.rows(); ++s)
        for (Eigen::Index k = 0; k < p.cols(); ++k) p(s, k) = g(rng);
      if (kl) p = softmax_rows(p);
      parts.push_back(std::move(p));
    }
    f0 = FederatedGrid(std::move(parts));
  } else {
    throw ConfigError("unknown meta init '" + m.init + "'");
  }

  if (grid_out) *grid_out = grid;
  return MetaProblem{topology_at(c.topology, 0), MeasureSet::from_locals(std::move(locals)),
                     LossFunctional{kl ? LossKind::Kl : LossKind::Mse, std::move(target)}, std::move(f0)};
}

// ---- run ------------------------------------------------------------------

namespace {

double resolve_sharing_rate(const ExperimentConfig& c) {
  if (c.sharing_rate) return *c.sharing_rate;
  const auto t = topology_at(c.topology, 0);
  if (t.max_degree() == 0) return 1.0;
  return 0.5 / static_cast<double>(t.max_degree());
}

TrainingConfig training_config(const ExperimentConfig& c) {
  if (c.eta.kind != EtaSchedule::Kind::Constant)
    throw ConfigError("neural-network runs take a constant learning rate");
  TrainingConfig t;
  t.topology = c.topology;
  t.models = c.models;
  t.eta = c.eta.scale;
  t.sharing_rate = resolve_sharing_rate(c);
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.distill_batch_size = c.distill_batch_size;
  t.eval_every = c.eval_every;
  t.threads = c.threads;
  t.seed = c.seed;
  return t;
}

RunResult run_unchecked(const ExperimentConfig& c) {
  RunResult r;
  switch (c.algorithm) {
    case Algorithm::Meta: {
      SampleGrid grid;
      auto problem = build_meta_problem(c, &grid);
      MetaOptions opt{c.eta, resolve_sharing_rate(c), c.epochs, c.threads};
      r.trace = run_meta(problem, opt, c.meta.headroom);
      r.warnings = r.trace->warnings;
      r.problem = std::move(problem);
      r.grid = std::move(grid);
      break;
    }
    case Algorithm::Cmfd:
    case Algorithm::ParamAvg: {
      const auto data = build_data(c);
      const auto tc = training_config(c);
      auto sink = [&](const MetricsRecord& m) { r.records.push_back(m); };
      if (c.algorithm == Algorithm::Cmfd) {
        BroadcastSink bs;
        if (c.telemetry) bs = [&](const BroadcastRecord& b) { r.broadcasts.push_back(b); };
        run_cmfd(tc, data, sink, bs);
      } else {
        run_param_avg(tc, data, sink);
      }
      r.summary = summarize(r.records);
      if (r.summary->dev_window_short)
        r.warnings.push_back("dev computed over " + std::to_string(r.summary->dev_window) + " records, fewer than " +
                             std::to_string(kDevWindow));
      break;
    }
    case Algorithm::Toy: {
      if (c.eta.kind != EtaSchedule::Kind::Constant) throw ConfigError("toy runs take a constant learning rate");
      ToyOptions o{c.toy.x, c.eta.scale, c.sharing_rate.value_or(0.02), c.epochs};
      r.toy = run_toy(c.toy.scheme, c.toy.init, o);
      break;
    }
  }
  return r;
}

std::string context(const ExperimentConfig& c) {
  return "[" + to_string(c.algorithm) + ", n=" + std::to_string(c.topology.n) + ", seed=" + std::to_string(c.seed) +
         "] ";
}

}  // namespace

RunResult run(const ExperimentConfig& c) {
  try {
    return run_unchecked(c);
  } catch (const ConfigError& e) {
    throw ConfigError(context(c) + e.what());
  } catch (const ParameterError& e) {
    throw ParameterError(context(c) + e.what());
  } catch (const DomainError& e) {
    throw DomainError(context(c) + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(context(c) + e.what());
  }
}

// ---- export ---------------------------------------------------------------

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {
std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }
nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
}  // namespace

void write_metrics_csv(std::ostream& os, std::span<const MetricsRecord> records) {
  os << "epoch,device,acc,top5,distill_loss,d_t,bytes\n";
  for (const auto& r : records)
    for (std::size_t i = 0; i < r.devices.size(); ++i) {
      const auto& d = r.devices[i];
      os << r.epoch << ',' << i << ',' << format_double(d.acc) << ',' << opt(d.top5) << ',' << opt(d.distill_loss)
         << ',' << opt(r.d_t) << ',' << d.bytes << '\n';
    }
}

void write_metrics_jsonl(std::ostream& os, std::span<const MetricsRecord> records) {
  for (const auto& r : records) {
    nlohmann::json acc = nlohmann::json::array(), top5 = nlohmann::json::array(), dl = nlohmann::json::array(),
                   bytes = nlohmann::json::array();
    for (const auto& d : r.devices) {
      acc.push_back(d.acc);
      top5.push_back(opt_json(d.top5));
      dl.push_back(opt_json(d.distill_loss));
      bytes.push_back(d.bytes);
    }
    nlohmann::json j{{"epoch", r.epoch}, {"acc", acc},          {"top5", top5},
                     {"distill_loss", dl}, {"d_t", opt_json(r.d_t)}, {"bytes", bytes},
                     {"mean_acc", r.acc()}, {"max_min", r.max_min()}};
    os << j.dump() << '\n';
  }
}

void write_broadcast_jsonl(std::ostream& os, std::span<const BroadcastRecord> records) {
  for (const auto& b : records) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(b.outputs_digest));
    os << nlohmann::json{{"epoch", b.epoch}, {"device", b.device}, {"outputs_digest", hex}}.dump() << '\n';
  }
}

void write_toy_csv(std::ostream& os, std::span<const ToyState> trajectory) {
  os << "step,wa0,wb0,wa1,wb1,product0,product1\n";
  for (std::size_t k = 0; k < trajectory.size(); ++k) {
    const auto& s = trajectory[k];
    os << k << ',' << format_double(s[0].wa) << ',' << format_double(s[0].wb) << ',' << format_double(s[1].wa) << ','
       << format_double(s[1].wb) << ',' << format_double(s[0].product()) << ',' << format_double(s[1].product())
       << '\n';
  }
}

std::vector<std::filesystem::path> export_run(const RunResult& r, const ExperimentConfig& c,
                                              const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto open = [&](const std::string& name) {
    written.push_back(dir / name);
    std::ofstream f(written.back(), std::ios::binary);
    if (!f) throw ConfigError("cannot write " + written.back().string());
    return f;
  };
  {
    auto f = open("resolved_config.json");
    f << to_json(c).dump(2) << '\n';
  }
  nlohmann::json summary{{"algorithm", to_string(c.algorithm)}, {"warnings", r.warnings}};
  if (!r.records.empty()) {
    auto csv = open("metrics.csv");
    write_metrics_csv(csv, r.records);
    auto jl = open("metrics.jsonl");
    write_metrics_jsonl(jl, r.records);
  }
  if (r.summary) summary["summary"] = to_json(*r.summary);
  if (!r.broadcasts.empty()) {
    auto f = open("broadcast.jsonl");
    write_broadcast_jsonl(f, r.broadcasts);
  }
  if (r.trace) {
    auto f = open("trace.csv");
    write_trace_csv(f, *r.trace);
    const auto& t = *r.trace;
    summary["bounds"] = to_json(t.bounds);
    summary["lipschitz"] = t.lipschitz;
    summary["gamma_violations"] = t.gamma_violations();
    summary["rhs_violations"] = t.rhs_violations();
    summary["loss_optimum"] = t.loss_optimum;
    summary["clamped"] = t.clamped;
    if (!t.d.empty()) {
      summary["final_d_t"] = t.d.back();
      summary["final_gap"] = t.loss_best.back() - t.loss_optimum;
    }
    if (c.dump_functions && r.grid) {
      std::filesystem::create_directories(dir / "functions");
      for (std::size_t i = 0; i < t.final.size(); ++i) {
        auto f = open("functions/device_" + std::to_string(i) + ".csv");
        write_function_csv(f, *r.grid, t.final[i]);
      }
    }
  }
  if (!r.toy.empty()) {
    auto f = open("toy.csv");
    write_toy_csv(f, r.toy);
    const auto& last = r.toy.back();
    summary["final_products"] = {last[0].product(), last[1].product()};
  }
  {
    auto f = open("summary.json");
    f << summary.dump(2) << '\n';
  }
  return written;
}

}  // namespace fsfl
