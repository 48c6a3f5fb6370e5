#include "fsfl/cmfd.hpp"
#include "fsfl/data.hpp"
#include "fsfl/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

using namespace fsfl;

namespace {

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n01(rng);
  return m;
}

std::span<const unsigned char> as_bytes(const std::string& s) {
  return {reinterpret_cast<const unsigned char*>(s.data()), s.size()};
}

// Small ring of devices on 4-class blobs.
FederatedData small_data(std::size_t devices, std::uint64_t seed) {
  const auto ds = synth_blobs(4, 120, 0.2, seed);
  const auto split = train_test_split(ds, 20, seed);
  return FederatedData{partition_ring(split.train, devices, 40, seed, 2), make_public(split.train, 30, seed),
                       split.test};
}

TrainingConfig small_config(std::size_t devices) {
  TrainingConfig c;
  c.topology = TopologySpec{};
  c.topology.kind = TopologyKind::Ring;
  c.topology.n = devices;
  c.topology.degree_param = 1;
  c.models = {ModelSpec{{8}}};
  c.eta = 0.02;
  c.sharing_rate = 0.01;
  c.epochs = 6;
  c.batch_size = 10;
  c.distill_batch_size = 10;
  c.eval_every = 4;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_SUITE("cmfd") {
  TEST_CASE("local SGD epoch") {
    const auto data = synth_blobs(3, 20, 0.2, 1);
    const auto y = data.targets();
    auto m = Mlp::he_init({2, 6, 3}, Head::Softmax, 2);
    const auto before = m.parameters();
    Rng order(5);
    local_sgd_epoch(m, data, y, 0.0, 7, NnLoss::CrossEntropy, order);
    CHECK(m.parameters() == before);

    // single example, linear model, MSE: w <- w - eta 2 (w x + b - y) x, b <- b - eta 2 (w x + b - y)
    Mlp lin({1, 1}, Head::Identity);
    lin.weights(0)(0, 0) = 0.5;
    lin.bias(0)(0) = 0.1;
    LabeledDataset one{Eigen::MatrixXd::Constant(1, 1, 2.0), {0}, 1, {}};
    local_sgd_epoch(lin, one, Eigen::MatrixXd::Constant(1, 1, 1.0), 0.1, 4, NnLoss::Mse, order);
    CHECK(lin.weights(0)(0, 0) == doctest::Approx(0.5 - 0.1 * 2 * 0.1 * 2).epsilon(1e-14));
    CHECK(lin.bias(0)(0) == doctest::Approx(0.1 - 0.1 * 2 * 0.1).epsilon(1e-14));

    // replay with an independently constructed generator on the same seed
    auto a = Mlp::he_init({2, 6, 3}, Head::Softmax, 2), b = a;
    Rng r1(77);
    local_sgd_epoch(a, data, y, 0.05, 7, NnLoss::CrossEntropy, r1);
    Rng r2(77);
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), r2);
    for (std::size_t s = 0; s < idx.size(); s += 7) {
      const std::size_t e = std::min(idx.size(), s + 7);
      Eigen::MatrixXd xb(static_cast<Eigen::Index>(e - s), 2), yb(static_cast<Eigen::Index>(e - s), 3);
      for (std::size_t k = s; k < e; ++k) {
        xb.row(static_cast<Eigen::Index>(k - s)) = data.inputs.row(static_cast<Eigen::Index>(idx[k]));
        yb.row(static_cast<Eigen::Index>(k - s)) = y.row(static_cast<Eigen::Index>(idx[k]));
      }
      b.sgd_step(b.gradient(xb, yb, NnLoss::CrossEntropy), 0.05);
    }
    CHECK(a.parameters() == b.parameters());

    CHECK_THROWS_AS(local_sgd_epoch(a, data, y, 0.1, 0, NnLoss::CrossEntropy, r1), ParameterError);
    CHECK_THROWS_AS(local_sgd_epoch(a, LabeledDataset{}, y, 0.1, 3, NnLoss::CrossEntropy, r1), ParameterError);
  }

  TEST_CASE("aggregate targets") {
    Rng rng(1);
    const auto y = gaussian(rng, 5, 3);
    const std::vector<SharedOutputs> one{{2, y}};
    const std::vector<std::size_t> n2{2};
    CHECK(aggregate_targets(n2, one) == y);

    const std::vector<SharedOutputs> opposite{{0, y}, {1, -y}};
    const std::vector<std::size_t> n01{0, 1};
    CHECK(aggregate_targets(n01, opposite).cwiseAbs().maxCoeff() == 0.0);

    std::vector<SharedOutputs> three;
    for (std::size_t j = 0; j < 4; ++j) three.push_back({j, gaussian(rng, 5, 3)});
    const std::vector<std::size_t> n3{0, 2, 3};
    Eigen::MatrixXd mean(5, 3);
    for (Eigen::Index r = 0; r < 5; ++r)
      for (Eigen::Index c = 0; c < 3; ++c)
        mean(r, c) = (three[0].values(r, c) + three[2].values(r, c) + three[3].values(r, c)) / 3.0;
    CHECK((aggregate_targets(n3, three) - mean).cwiseAbs().maxCoeff() < 1e-12);

    const std::vector<std::size_t> missing{0, 7};
    try {
      aggregate_targets(missing, three);
      FAIL("expected a protocol error");
    } catch (const ProtocolError& e) {
      CHECK(std::string(e.what()).find("device 7") != std::string::npos);
    }
    CHECK_THROWS_AS(aggregate_targets(std::vector<std::size_t>{}, three), ParameterError);
    const std::vector<SharedOutputs> ragged{{0, y}, {1, gaussian(rng, 4, 3)}};
    CHECK_THROWS_AS(aggregate_targets(n01, ragged), ProtocolError);
  }

  TEST_CASE("distillation loss") {
    Rng rng(2);
    const auto m = Mlp::he_init({2, 5, 3}, Head::Softmax, 4);
    const PublicSet pub{gaussian(rng, 12, 2)};
    const Eigen::MatrixXd out = m.forward(pub.inputs);
    CHECK(distillation_loss(m, pub, out) == 0.0);

    Mlp lin({1, 1}, Head::Identity);
    lin.weights(0)(0, 0) = 1.5;
    const PublicSet single{Eigen::MatrixXd::Constant(1, 1, 2.0)};
    CHECK(distillation_loss(lin, single, Eigen::MatrixXd::Constant(1, 1, 2.25)) == doctest::Approx(0.75 * 0.75));

    const auto t = gaussian(rng, 12, 3);
    double naive = 0.0;
    for (Eigen::Index r = 0; r < 12; ++r)
      for (Eigen::Index c = 0; c < 3; ++c) naive += (out(r, c) - t(r, c)) * (out(r, c) - t(r, c));
    CHECK(distillation_loss(m, pub, t) == doctest::Approx(naive).epsilon(1e-12));
  }

  TEST_CASE("distillation step") {
    Rng rng(3);
    auto m = Mlp::he_init({2, 5, 3}, Head::Softmax, 4);
    const PublicSet pub{gaussian(rng, 12, 2)};
    const auto before = m.parameters();
    Rng order(1);
    distillation_step(m, pub, m.forward(pub.inputs), 0.1, 2, 5, order);
    CHECK(m.parameters() == before);

    Mlp lin({1, 1}, Head::Identity);
    const double w = 0.7, x = 1.5, target = 2.0, eps = 0.03;
    const std::size_t ni = 3;
    lin.weights(0)(0, 0) = w;
    distillation_step(lin, PublicSet{Eigen::MatrixXd::Constant(1, 1, x)}, Eigen::MatrixXd::Constant(1, 1, target), eps,
                      ni, 1, order);
    CHECK(lin.weights(0)(0, 0) == doctest::Approx(w - eps * ni * 2.0 * (w * x - target) * x).epsilon(1e-14));

    const Eigen::MatrixXd targets = softmax_rows(gaussian(rng, 12, 3));
    const double l0 = distillation_loss(m, pub, targets);
    distillation_step(m, pub, targets, 0.01, 2, 4, order);
    CHECK(distillation_loss(m, pub, targets) < l0);
    CHECK_THROWS_AS(distillation_step(m, pub, targets, 0.0, 2, 4, order), ParameterError);
  }

  TEST_CASE("identical devices distill toward themselves") {
    const auto data = synth_blobs(3, 20, 0.2, 1);
    const PublicSet pub = make_public(data, 15, 2);
    std::vector<Mlp> models(3, Mlp::he_init({2, 6, 3}, Head::Softmax, 9));
    std::vector<SharedOutputs> outs;
    for (std::size_t i = 0; i < 3; ++i) {
      Rng order(4);
      local_sgd_epoch(models[i], data, data.targets(), 0.05, 8, NnLoss::CrossEntropy, order);
      outs.push_back({i, compute_shared_outputs(models[i], pub)});
    }
    const std::vector<std::size_t> nb{1, 2};
    const auto targets = aggregate_targets(nb, outs);
    CHECK((targets - outs[0].values).cwiseAbs().maxCoeff() < 1e-15);
    CHECK(models[0].gradient(pub.inputs, targets, NnLoss::Mse).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("digests") {
    CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64(as_bytes("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64(as_bytes("foobar")) == 0x85944171f73967e8ULL);
    Eigen::MatrixXd o(2, 2);
    o << 1.0, -0.5, 0.25, 3.0;
    CHECK(outputs_digest(o) == 0xc181d2f32aebbbabULL);
    Eigen::MatrixXd p(1, 2);
    p << 0.1, 0.2;
    CHECK(outputs_digest(p) == 0x3f02dbe8ea40d200ULL);
  }

  TEST_CASE("traffic accounting") {
    static_assert(cmfd_link_bytes(1000, 10) == 40000);
    static_assert(param_avg_link_bytes(50890) == 203560);
    CHECK(Mlp({784, 64, 10}, Head::Softmax).parameter_count() == 50890);

    auto c = small_config(5);
    c.epochs = 2;
    c.eval_every = 1;
    const auto data = small_data(5, 1);
    std::vector<MetricsRecord> cm, pa;
    run_cmfd(c, data, [&](const MetricsRecord& r) { cm.push_back(r); });
    run_param_avg(c, data, [&](const MetricsRecord& r) { pa.push_back(r); });
    const auto nw = Mlp({2, 8, 4}, Head::Softmax).parameter_count();
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(cm.back().devices[i].bytes == 2 * 30 * 4 * 4);
      CHECK(pa.back().devices[i].bytes == 2 * nw * 4);
      CHECK(cm.front().devices[i].bytes == 0);
    }
  }

  TEST_CASE("a single device reduces both methods to local SGD") {
    auto c = small_config(1);
    const auto data = small_data(1, 2);
    std::vector<MetricsRecord> cm, pa;
    const auto mc = run_cmfd(c, data, [&](const MetricsRecord& r) { cm.push_back(r); });
    const auto mp = run_param_avg(c, data, [&](const MetricsRecord& r) { pa.push_back(r); });
    CHECK(cm == pa);
    CHECK(mc[0].parameters() == mp[0].parameters());
    CHECK_FALSE(cm.back().devices[0].distill_loss.has_value());
  }

  TEST_CASE("record cadence and content") {
    auto c = small_config(4);
    const auto data = small_data(4, 3);
    std::vector<MetricsRecord> recs;
    std::vector<BroadcastRecord> casts;
    run_cmfd(
        c, data, [&](const MetricsRecord& r) { recs.push_back(r); },
        [&](const BroadcastRecord& b) { casts.push_back(b); });
    REQUIRE(recs.size() == 3);
    CHECK(recs[0].epoch == 0);
    CHECK(recs[1].epoch == 4);
    CHECK(recs[2].epoch == 6);
    CHECK(casts.size() == 6 * 4);
    CHECK_FALSE(recs[0].devices[0].distill_loss.has_value());
    CHECK(recs[2].devices[0].distill_loss.has_value());
    CHECK(recs[2].d_t.has_value());
    CHECK_FALSE(recs[2].devices[0].top5.has_value());
  }

  TEST_CASE("heterogeneous architectures") {
    auto c = small_config(4);
    c.models = {ModelSpec{{16}}, ModelSpec{{4}}, ModelSpec{{8, 8}}, ModelSpec{{6}}};
    const auto data = small_data(4, 4);
    const auto models = run_cmfd(c, data, {});
    CHECK(models[2].layers() == 3);
    CHECK(models[1].layer_sizes() == std::vector<std::size_t>{2, 4, 4});
    CHECK_THROWS_AS(run_param_avg(c, data, {}), ConfigError);
    c.models.pop_back();
    CHECK_THROWS_AS(run_cmfd(c, data, {}), ConfigError);
  }

  TEST_CASE("setup errors") {
    auto c = small_config(4);
    const auto data = small_data(3, 4);
    CHECK_THROWS_AS(run_cmfd(c, data, {}), ConfigError);
    auto d4 = small_data(4, 4);
    c.sharing_rate = 0.0;
    CHECK_THROWS_AS(run_cmfd(c, d4, {}), ConfigError);
    c.sharing_rate = 0.01;
    d4.shared.inputs.resize(0, 2);
    CHECK_THROWS_AS(run_cmfd(c, d4, {}), ConfigError);
  }

  TEST_CASE("results do not depend on the thread count") {
    auto c = small_config(5);
    const auto data = small_data(5, 5);
    for (bool cmfd : {true, false}) {
      std::vector<MetricsRecord> a, b;
      std::vector<BroadcastRecord> ca, cb;
      c.threads = 1;
      if (cmfd) run_cmfd(c, data, [&](const MetricsRecord& r) { a.push_back(r); }, [&](const BroadcastRecord& r) { ca.push_back(r); });
      else run_param_avg(c, data, [&](const MetricsRecord& r) { a.push_back(r); });
      c.threads = 4;
      if (cmfd) run_cmfd(c, data, [&](const MetricsRecord& r) { b.push_back(r); }, [&](const BroadcastRecord& r) { cb.push_back(r); });
      else run_param_avg(c, data, [&](const MetricsRecord& r) { b.push_back(r); });
      CHECK(a == b);
      REQUIRE(ca.size() == cb.size());
      for (std::size_t k = 0; k < ca.size(); ++k) CHECK(ca[k].outputs_digest == cb[k].outputs_digest);
    }
  }

  TEST_CASE("parameter averaging update") {
    // one epoch with eta = 0 isolates the consensus update on the shared init: nothing moves
    auto c = small_config(3);
    c.eta = 0.0;
    c.epochs = 1;
    const auto data = small_data(3, 6);
    const auto models = run_param_avg(c, data, {});
    CHECK(models[0].parameters() == initial_model(c, 0, 2, 4, true).parameters());
    CHECK(models[1].parameters() == models[0].parameters());
  }

  TEST_CASE("evaluation") {
    // logits equal the input coordinates: predicted class is the argmax input
    Mlp id({3, 3}, Head::Softmax);
    id.weights(0) = RowMatrix::Identity(3, 3);
    LabeledDataset test{Eigen::MatrixXd(4, 3), {0, 1, 2, 0}, 3, {}};
    test.inputs << 1, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 1;
    const auto a = evaluate(id, test);
    CHECK(a.top1 == doctest::Approx(0.5));
    CHECK_FALSE(a.top5.has_value());

    Mlp wide({7, 7}, Head::Softmax);
    wide.weights(0) = RowMatrix::Identity(7, 7);
    LabeledDataset t7{Eigen::MatrixXd::Zero(2, 7), {0, 6}, 7, {}};
    for (int k = 0; k < 7; ++k) t7.inputs(0, k) = t7.inputs(1, k) = 7.0 - k;  // class 0 ranks first, class 6 last
    const auto b = evaluate(wide, t7);
    CHECK(b.top1 == doctest::Approx(0.5));
    CHECK(*b.top5 == doctest::Approx(0.5));
  }

  TEST_CASE("public disagreement") {
    Rng rng(7);
    const PublicSet pub{gaussian(rng, 10, 2)};
    const auto m = Mlp::he_init({2, 4, 3}, Head::Softmax, 1);
    const std::vector<Mlp> same(3, m);
    CHECK(public_disagreement(same, pub) < 1e-15);
    const std::vector<Mlp> two{m, Mlp::he_init({2, 4, 3}, Head::Softmax, 2)};
    const Eigen::MatrixXd d = two[0].forward(pub.inputs) - two[1].forward(pub.inputs);
    // each function is d/2 from the mean
    CHECK(public_disagreement(two, pub) == doctest::Approx(std::sqrt(d.squaredNorm() / 4.0 / 10.0)).epsilon(1e-12));
  }
}

TEST_SUITE("cmfd") {
  TEST_CASE("toy distillation direction") {
    const ToyState equal{ToyDevice{2.0, 0.5}, ToyDevice{-1.0, -1.0}};
    CHECK(toy_distill_direction(equal, 0) == std::array<double, 2>{0.0, 0.0});
    const ToyState s{ToyDevice{0.5, 0.5}, ToyDevice{-2.0, -1.0}};
    const auto d = toy_distill_direction(s, 0);
    CHECK(d[0] == doctest::Approx(1.75 * 0.5));
    CHECK(d[1] == doctest::Approx(1.75 * 0.5));
    CHECK_THROWS_AS(toy_distill_direction(s, 2), ParameterError);
  }

  TEST_CASE("toy dynamics") {
    const ToyState init{ToyDevice{0.5, 0.5}, ToyDevice{-2.0, -1.0}};
    const ToyOptions opt;
    const auto traj = run_toy(ToyScheme::Distill, init, opt);
    CHECK(traj.size() == opt.steps + 1);
    CHECK(traj.front() == init);
    for (const auto& dev : traj.back()) CHECK(std::abs(dev.product() - 1.0) < 1e-3);
    const auto last = traj.back(), next = toy_step(ToyScheme::Distill, last, opt);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(std::abs(next[i].wa - last[i].wa) < 1e-6);
      CHECK(std::abs(next[i].wb - last[i].wb) < 1e-6);
    }

    // parameter averaging: the consensus pull -eps (w0 - w1) points away from the positive quadrant
    const double pull_a = -opt.sharing_rate * (init[0].wa - init[1].wa);
    const double pull_b = -opt.sharing_rate * (init[0].wb - init[1].wb);
    CHECK(pull_a < 0.0);
    CHECK(pull_b < 0.0);
    const auto avg = run_toy(ToyScheme::ParamAvg, init, ToyOptions{opt.shared_x, opt.eta, opt.sharing_rate, 1});
    CHECK(std::abs(avg[1][0].product() - 1.0) > std::abs(init[0].product() - 1.0));

    ToyOptions wild = opt;
    wild.eta = 10.0;
    CHECK_THROWS_AS(run_toy(ToyScheme::Distill, init, wild), NumericError);
  }
}
