#include "fsfl/errors.hpp"
#include "fsfl/experiment.hpp"
#include "fsfl/idx.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

using nlohmann::json;

// Graph selection shared by `topology` and `bounds`.
struct GraphArgs {
  std::vector<std::size_t> ring, ba;
  std::size_t complete = 0;
  std::string preset;
  std::uint64_t seed = 0;
  bool dynamic = false;

  void add(CLI::App* app) {
    app->add_option("--ring", ring, "ring lattice: n k")->expected(2);
    app->add_option("--ba", ba, "preferential attachment: n m")->expected(2);
    app->add_option("--complete", complete, "complete graph on n nodes");
    app->add_option("--preset", preset, "R1 R2 R3 BA1 BA2");
    app->add_option("--seed", seed, "graph seed");
  }

  fsfl::TopologySpec spec() const {
    const int chosen = !ring.empty() + !ba.empty() + (complete > 0) + !preset.empty();
    if (chosen != 1) throw fsfl::ConfigError("choose exactly one of --ring, --ba, --complete, --preset");
    if (!preset.empty()) return fsfl::TopologySpec::preset(preset, seed);
    fsfl::TopologySpec s;
    s.seed = seed;
    if (!ring.empty()) s = {fsfl::TopologyKind::Ring, ring[0], ring[1], seed, false};
    else if (!ba.empty()) s = {fsfl::TopologyKind::BarabasiAlbert, ba[0], ba[1], seed, false};
    else s = {fsfl::TopologyKind::Complete, complete, 0, seed, false};
    return s;
  }
};

// Run options; flag names mirror config fields.
struct RunArgs {
  std::string config, output_dir, topology, eta, sharing_rate;
  std::optional<std::size_t> epochs, threads, eval_every, batch_size, distill_batch_size, per_device, public_size;
  std::optional<std::uint64_t> seed;
  bool telemetry = false, dump_functions = false;
  // toy
  std::vector<double> init;
  std::string scheme;

  void add(CLI::App* app, bool toy) {
    app->add_option("--config", config, "JSON config file");
    app->add_option("--output-dir", output_dir, "output directory");
    app->add_option("--topology", topology, "topology preset (R1 R2 R3 BA1 BA2)");
    app->add_option("--eta", eta, "learning rate: number, const:c, inv:c or invsqrt:c");
    app->add_option("--sharing-rate", sharing_rate, "sharing rate, or 'max' for 1/(2 Delta)");
    app->add_option("--epochs", epochs, "epochs (toy: steps)");
    app->add_option("--threads", threads, "worker threads; results do not depend on it");
    app->add_option("--seed", seed, "master seed");
    if (toy) {
      app->add_option("--init", init, "wa0,wb0,wa1,wb1")->delimiter(',')->expected(4);
      app->add_option("--scheme", scheme, "distill or avg");
      return;
    }
    app->add_option("--eval-every", eval_every, "metric cadence in epochs");
    app->add_option("--batch-size", batch_size, "local minibatch size");
    app->add_option("--distill-batch-size", distill_batch_size, "distillation minibatch size");
    app->add_option("--per-device", per_device, "local samples per device");
    app->add_option("--public-size", public_size, "public set size");
    app->add_flag("--telemetry", telemetry, "write per-epoch broadcast digests");
    app->add_flag("--dump-functions", dump_functions, "write final device functions (meta)");
  }

  fsfl::ExperimentConfig resolve(fsfl::Algorithm algorithm) const {
    json j = json::object();
    if (!config.empty()) {
      std::ifstream in(config);
      if (!in) throw fsfl::ConfigError("cannot open config " + config);
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw fsfl::ConfigError("config " + config + ": " + e.what());
      }
    }
    if (j.contains("algorithm") && fsfl::parse_algorithm(j["algorithm"].get<std::string>()) != algorithm)
      throw fsfl::ConfigError("config algorithm '" + j["algorithm"].get<std::string>() + "' does not match subcommand");
    j["algorithm"] = fsfl::to_string(algorithm);
    if (!output_dir.empty()) j["output_dir"] = output_dir;
    if (!topology.empty()) j["topology"] = {{"preset", topology}};
    if (!eta.empty()) {
      double v = 0.0;
      std::istringstream is(eta);
      if (is >> v && is.eof()) j["eta"] = v;
      else j["eta"] = eta;
    }
    if (!sharing_rate.empty()) {
      if (sharing_rate == "max") j["sharing_rate"] = "max";
      else j["sharing_rate"] = std::stod(sharing_rate);
    }
    if (epochs) j["epochs"] = *epochs;
    if (threads) j["threads"] = *threads;
    if (seed) j["seed"] = *seed;
    if (eval_every) j["eval_every"] = *eval_every;
    if (batch_size) j["batch_size"] = *batch_size;
    if (distill_batch_size) j["distill_batch_size"] = *distill_batch_size;
    if (per_device) j["dataset"]["per_device"] = *per_device;
    if (public_size) j["dataset"]["public_size"] = *public_size;
    if (telemetry) j["telemetry"] = true;
    if (dump_functions) j["dump_functions"] = true;
    if (!init.empty()) j["toy"]["init"] = init;
    if (!scheme.empty()) j["toy"]["scheme"] = scheme;
    return fsfl::config_from_json(j);
  }
};

void write_log(const std::filesystem::path& dir, const std::string& line) {
  std::ofstream log(dir / "run.log", std::ios::app);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
  log << stamp << ' ' << line << '\n';
}

void print_run(const fsfl::RunResult& r) {
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
  if (r.summary) {
    const auto& s = *r.summary;
    std::printf("%-8s %-8s %-8s %-8s %-8s\n", "epoch", "acc", "max-min", "dev", "top5");
    std::printf("%-8zu %-8.4f %-8.4f %-8.4f %-8s\n", s.final_epoch, s.acc, s.max_min, s.dev,
                s.top5 ? fsfl::format_double(*s.top5).substr(0, 6).c_str() : "-");
  }
  if (r.trace) {
    const auto& t = *r.trace;
    std::printf("epochs %zu  D_t %.6g  gamma_t %.6g  gap %.6g  violations D/gamma %zu  gap/rhs %zu\n", t.d.size(),
                t.d.empty() ? 0.0 : t.d.back(), t.gamma.empty() ? 0.0 : t.gamma.back(),
                t.loss_best.empty() ? 0.0 : t.loss_best.back() - t.loss_optimum, t.gamma_violations(),
                t.rhs_violations());
  }
  if (!r.toy.empty()) {
    const auto& s = r.toy.back();
    std::printf("steps %zu  product0 %.9f  product1 %.9f\n", r.toy.size() - 1, s[0].product(), s[1].product());
  }
}

int run_experiment(const RunArgs& args, fsfl::Algorithm algorithm) {
  const auto config = args.resolve(algorithm);
  const auto result = fsfl::run(config);
  const std::filesystem::path dir = config.output_dir;
  const auto files = fsfl::export_run(result, config, dir);
  write_log(dir, fsfl::to_string(algorithm) + " finished, " + std::to_string(files.size()) + " files written");
  print_run(result);
  std::printf("outputs in %s\n", dir.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Function-space federated learning simulator"};
  app.set_version_flag("--version", std::string("fsfl ") + fsfl::kVersion + " (config schema " +
                                        std::to_string(fsfl::kConfigSchemaVersion) + ")");
  app.require_subcommand(1);

  GraphArgs topo_args;
  bool with_edges = false;
  auto* topology = app.add_subcommand("topology", "print the Laplacian spectral summary of a graph as JSON");
  topo_args.add(topology);
  topology->add_flag("--edges", with_edges, "include the edge list");

  GraphArgs bound_args;
  double eps = 0.0, eta = 0.1, lm = 1.0, c1 = 0.0;
  auto* bounds = app.add_subcommand("bounds", "print the bound report for a graph and rates as JSON");
  bound_args.add(bounds);
  bounds->add_option("--eps", eps, "sharing rate (default 1/(2 Delta))");
  bounds->add_option("--eta", eta, "initial or constant learning rate");
  bounds->add_option("--lm", lm, "L_m = max_i sqrt(S_i) L_i");
  bounds->add_option("--c1", c1, "||mean f_2 - f*||^2");

  RunArgs meta_args, cmfd_args, avg_args, toy_args;
  auto* meta = app.add_subcommand("meta", "run the function-space meta-algorithm with bound tracking");
  meta_args.add(meta, false);
  auto* cmfd = app.add_subcommand("cmfd", "run consensus-based distillation");
  cmfd_args.add(cmfd, false);
  auto* avg = app.add_subcommand("paramavg", "run the parameter-averaging baseline");
  avg_args.add(avg, false);
  auto* toy = app.add_subcommand("toy", "run the two-device toy model");
  toy_args.add(toy, true);

  RunArgs data_args;
  std::string images, labels;
  auto* data = app.add_subcommand("data", "build and validate datasets, write a manifest");
  data_args.add(data, false);
  data->add_option("--images", images, "IDX image file to validate");
  data->add_option("--labels", labels, "IDX label file to validate");

  if (argc <= 1) {
    std::cout << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*topology) {
      const auto t = fsfl::make_topology(topo_args.spec());
      auto j = fsfl::to_json(fsfl::spectral_summary(t));
      j["n"] = t.size();
      j["average_degree"] = t.average_degree();
      if (with_edges) j["edges"] = fsfl::to_json(t)["edges"];
      std::cout << j.dump(2) << '\n';
    } else if (*bounds) {
      const auto t = fsfl::make_topology(bound_args.spec());
      const auto s = fsfl::spectral_summary(t);
      const double rate = eps > 0.0 ? eps : s.max_sharing_rate();
      auto j = fsfl::to_json(fsfl::make_bound_report(c1, lm, s, rate, eta, t.size()));
      j["sharing_rate"] = rate;
      j["eta"] = eta;
      j["n"] = t.size();
      std::cout << j.dump(2) << '\n';
    } else if (*meta) {
      return run_experiment(meta_args, fsfl::Algorithm::Meta);
    } else if (*cmfd) {
      return run_experiment(cmfd_args, fsfl::Algorithm::Cmfd);
    } else if (*avg) {
      return run_experiment(avg_args, fsfl::Algorithm::ParamAvg);
    } else if (*toy) {
      return run_experiment(toy_args, fsfl::Algorithm::Toy);
    } else if (*data) {
      if (!images.empty() || !labels.empty()) {
        if (images.empty() || labels.empty()) throw fsfl::ConfigError("--images and --labels go together");
        const auto ds = fsfl::mnist_load(images, labels);
        ds.validate();
        std::printf("%zu items, %zu inputs, %zu classes\n", ds.size(), ds.dim(), ds.num_classes);
        return 0;
      }
      const auto config = data_args.resolve(fsfl::Algorithm::Cmfd);
      const auto fed = fsfl::build_data(config);
      const std::filesystem::path dir = config.output_dir;
      std::filesystem::create_directories(dir);
      std::ofstream(dir / "manifest.json")
          << fsfl::to_json(fsfl::DataManifest{config.dataset.source, config.seed, config.dataset.per_device,
                                              config.dataset.rule})
                 .dump(2)
          << '\n';
      std::printf("%-8s %-8s %s\n", "device", "rows", "class counts");
      for (std::size_t i = 0; i < fed.locals.size(); ++i) {
        std::string counts;
        for (auto c : fed.locals[i].class_counts()) counts += std::to_string(c) + ' ';
        std::printf("%-8zu %-8zu %s\n", i, fed.locals[i].size(), counts.c_str());
      }
      std::printf("public %zu  test %zu\n", fed.shared.size(), fed.test.size());
    }
    return 0;
  } catch (const fsfl::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const fsfl::ParameterError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
