#include "fsfl/errors.hpp"
#include "fsfl/experiment.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace fsfl;

namespace {

MetricsRecord constant_record(std::size_t epoch, std::vector<double> accs) {
  MetricsRecord r;
  r.epoch = epoch;
  for (double a : accs) r.devices.push_back(DeviceMetrics{a, std::nullopt, std::nullopt, 0});
  return r;
}

nlohmann::json small_cmfd_json() {
  return nlohmann::json::parse(R"({
    "algorithm": "cmfd",
    "topology": {"type": "ring", "n": 4, "param": 1},
    "eta": 0.02, "sharing_rate": 0.01, "epochs": 3, "seed": 11,
    "dataset": {"classes": 4, "train_per_class": 60, "test_per_class": 20, "per_device": 40, "public_size": 30},
    "models": [{"hidden": [8]}], "batch_size": 10, "distill_batch_size": 10
  })");
}

std::string csv_of(const RunResult& r) {
  std::ostringstream os;
  write_metrics_csv(os, r.records);
  return os.str();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("summary of a constant stream") {
    std::vector<MetricsRecord> recs;
    for (std::size_t e = 0; e < 120; ++e) recs.push_back(constant_record(e, {0.6, 0.7}));
    const auto s = summarize(recs);
    CHECK(s.acc == doctest::Approx(0.65));
    CHECK(s.max_min == doctest::Approx(0.10));
    CHECK(s.dev == 0.0);
    CHECK(s.dev_window == 100);
    CHECK_FALSE(s.dev_window_short);
    CHECK(s.final_epoch == 119);
    CHECK_THROWS_AS(summarize(std::span<const MetricsRecord>{}), ParameterError);
  }

  TEST_CASE("dev over the trailing window") {
    std::vector<MetricsRecord> recs;
    // device 0 alternates 0.5 / 0.7 (population sd 0.1), device 1 is constant
    for (std::size_t e = 0; e < 10; ++e) recs.push_back(constant_record(e, {e % 2 ? 0.7 : 0.5, 0.9}));
    const auto s = summarize(recs);
    CHECK(s.dev_window_short);
    CHECK(s.dev_window == 10);
    CHECK(s.dev == doctest::Approx(0.05));
    // the window only sees the last 4 records
    recs.push_back(constant_record(10, {0.6, 0.9}));
    const auto w = summarize(recs, 3);
    CHECK_FALSE(w.dev_window_short);
    // last three for device 0: 0.5, 0.7, 0.6 -> population sd sqrt(0.02/3)
    CHECK(w.dev == doctest::Approx(std::sqrt(0.02 / 3.0) / 2.0));
  }

  TEST_CASE("top5 with perfect top-1") {
    Mlp id({10, 10}, Head::Softmax);
    id.weights(0) = RowMatrix::Identity(10, 10);
    LabeledDataset test{Eigen::MatrixXd::Identity(10, 10), {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 10, {}};
    const auto a = evaluate(id, test);
    CHECK(a.top1 == 1.0);
    REQUIRE(a.top5.has_value());
    CHECK(*a.top5 == 1.0);
    MetricsRecord r;
    r.devices = {DeviceMetrics{a.top1, a.top5, std::nullopt, 0}};
    CHECK(*summarize(std::vector<MetricsRecord>{r}).top5 == 1.0);
  }

  TEST_CASE("distillation windows") {
    std::vector<MetricsRecord> recs;
    for (std::size_t e = 0; e < 6; ++e) {
      auto r = constant_record(e, {0.5, 0.5});
      if (e > 0) r.devices[0].distill_loss = r.devices[1].distill_loss = static_cast<double>(10 - e);
      recs.push_back(r);
    }
    CHECK(distill_window_mean(recs, 0, 3) == doctest::Approx(8.5));  // record 0 has no loss
    CHECK(distill_window_mean(recs, 3, 3) == doctest::Approx(6.0));
    CHECK_THROWS_AS(distill_window_mean(recs, 4, 3), ParameterError);
    CHECK_THROWS_AS(distill_window_mean(recs, 0, 1), ParameterError);
  }

  TEST_CASE("config parsing") {
    const auto c = config_from_json(small_cmfd_json());
    CHECK(c.algorithm == Algorithm::Cmfd);
    CHECK(c.topology.n == 4);
    CHECK(c.topology.seed == 11);
    CHECK(*c.sharing_rate == 0.01);
    CHECK(c.eta.scale == 0.02);
    CHECK(c.dataset.public_size == 30);

    const auto round = config_from_json(to_json(c));
    CHECK(to_json(round) == to_json(c));
    CHECK(to_json(c).at("schema_version") == kConfigSchemaVersion);

    auto j = small_cmfd_json();
    j["sharing_rate"] = "max";
    j["eta"] = "inv:0.5";
    const auto m = config_from_json(j);
    CHECK_FALSE(m.sharing_rate.has_value());
    CHECK(m.eta.kind == EtaSchedule::Kind::InverseT);

    for (const char* bad : {R"({"epoch": 3})", R"({"dataset": {"colour": 1}})", R"({"algorithm": "sgd"})",
                            R"({"sharing_rate": "min"})", R"({"eta": "exp:1"})", R"({"epochs": "many"})",
                            R"({"topology": {"type": "torus"}})", R"({"models": [{"hidden": [4], "act": "tanh"}]})"}) {
      INFO(bad);
      CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(bad)), ConfigError);
    }
    CHECK(parse_algorithm("paramavg") == Algorithm::ParamAvg);
    CHECK(to_string(Algorithm::ParamAvg) == "param_avg");
  }

  TEST_CASE("test data is disjoint from local data") {
    const auto c = config_from_json(small_cmfd_json());
    const auto d = build_data(c);
    CHECK(d.locals.size() == 4);
    CHECK(d.shared.size() == 30);
    CHECK(d.test.class_counts() == std::vector<std::size_t>(4, 20));
    std::set<std::size_t> test(d.test.origin.begin(), d.test.origin.end());
    for (const auto& l : d.locals)
      for (auto o : l.origin) CHECK(test.count(o) == 0);
  }

  TEST_CASE("zero epochs summarize the initial models") {
    auto j = small_cmfd_json();
    j["epochs"] = 0;
    const auto r = run(config_from_json(j));
    REQUIRE(r.records.size() == 1);
    CHECK(r.records[0].epoch == 0);
    CHECK(r.summary->final_epoch == 0);
    CHECK(r.summary->bytes == 0);
  }

  TEST_CASE("replay is byte-identical") {
    const auto c = config_from_json(small_cmfd_json());
    const auto a = run(c), b = run(c);
    CHECK(csv_of(a) == csv_of(b));
    CHECK(to_json(*a.summary).dump() == to_json(*b.summary).dump());
    auto threaded = c;
    threaded.threads = 3;
    CHECK(csv_of(run(threaded)) == csv_of(a));
    // summary is a pure function of the stream
    CHECK(to_json(summarize(a.records)).dump() == to_json(*a.summary).dump());
  }

  TEST_CASE("metrics CSV format") {
    std::vector<MetricsRecord> recs{constant_record(0, {0.25})};
    recs[0].devices[0].bytes = 40000;
    MetricsRecord r = constant_record(1, {0.5});
    r.devices[0].top5 = 1.0;
    r.devices[0].distill_loss = 0.1;
    r.d_t = 0.03;
    recs.push_back(r);
    std::ostringstream os;
    write_metrics_csv(os, recs);
    CHECK(os.str() == "epoch,device,acc,top5,distill_loss,d_t,bytes\n0,0,0.25,,,,40000\n1,0,0.5,1,0.1,0.03,0\n");
    std::ostringstream js;
    write_metrics_jsonl(js, recs);
    std::istringstream lines(js.str());
    std::string line;
    std::size_t count = 0;
    while (std::getline(lines, line)) {
      CHECK(nlohmann::json::parse(line).contains("epoch"));
      ++count;
    }
    CHECK(count == 2);
    CHECK(format_double(0.1) == "0.1");
    CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
  }

  TEST_CASE("export writes provenance next to outputs") {
    auto j = small_cmfd_json();
    j["telemetry"] = true;
    const auto c = config_from_json(j);
    const auto r = run(c);
    const auto dir = std::filesystem::temp_directory_path() / "fsfl_test_export";
    std::filesystem::remove_all(dir);
    export_run(r, c, dir);
    for (const char* f : {"resolved_config.json", "metrics.csv", "metrics.jsonl", "summary.json", "broadcast.jsonl"})
      CHECK(std::filesystem::exists(dir / f));
    const auto resolved = nlohmann::json::parse(slurp(dir / "resolved_config.json"));
    CHECK(resolved.at("seed") == 11);
    CHECK(resolved.at("topology").at("seed") == 11);
    CHECK(slurp(dir / "metrics.csv") == csv_of(r));
    CHECK(config_from_json(resolved).epochs == 3);
  }

  TEST_CASE("meta and toy runs") {
    const auto meta = run(config_from_json(nlohmann::json::parse(
        R"({"algorithm": "meta", "topology": {"preset": "R1"}, "eta": "inv:0.1", "epochs": 50,
            "meta": {"grid_size": 16}})")));
    REQUIRE(meta.trace.has_value());
    CHECK(meta.trace->d.size() == 50);
    CHECK(meta.trace->gamma_violations() == 0);
    CHECK(meta.records.empty());

    const auto kl = run(config_from_json(nlohmann::json::parse(
        R"({"algorithm": "meta", "topology": {"preset": "R2"}, "eta": "inv:0.1", "epochs": 50,
            "meta": {"grid_size": 16, "dim_out": 3, "loss": "kl", "measures": "data"},
            "dataset": {"classes": 4, "train_per_class": 60, "test_per_class": 10, "per_device": 30}})")));
    CHECK(kl.trace->gamma_violations() == 0);

    const auto toy = run(config_from_json(nlohmann::json::parse(R"({"algorithm": "toy", "epochs": 2000})")));
    CHECK(toy.toy.size() == 2001);
    for (const auto& d : toy.toy.back()) CHECK(std::abs(d.product() - 1.0) < 1e-3);
  }

  TEST_CASE("errors carry run context") {
    auto j = small_cmfd_json();
    j["algorithm"] = "param_avg";
    j["models"] = nlohmann::json::parse(R"([{"hidden": [8]}, {"hidden": [4]}, {"hidden": [8]}, {"hidden": [8]}])");
    try {
      run(config_from_json(j));
      FAIL("expected a configuration error");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("param_avg") != std::string::npos);
      CHECK(msg.find("seed=11") != std::string::npos);
    }
    auto k = small_cmfd_json();
    k["dataset"]["per_device"] = 500;
    CHECK_THROWS_AS(run(config_from_json(k)), ConfigError);
    auto e = small_cmfd_json();
    e["eta"] = "inv:0.1";
    CHECK_THROWS_AS(run(config_from_json(e)), ConfigError);
  }
}
