#include "gradcheck.hpp"

#include "fsfl/errors.hpp"
#include "fsfl/funcspace.hpp"
#include "fsfl/nn.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace fsfl;

namespace {

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n01(rng);
  return m;
}

// Per-neuron loop over the flat parameter layout.
Eigen::MatrixXd loop_forward(const Mlp& m, const Eigen::MatrixXd& x) {
  const auto& sizes = m.layer_sizes();
  const auto& p = m.parameters();
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(sizes.back()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    std::vector<double> a(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index k = 0; k < x.cols(); ++k) a[static_cast<std::size_t>(k)] = x(r, k);
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      std::vector<double> z(sizes[l + 1]);
      for (std::size_t o = 0; o < sizes[l + 1]; ++o) {
        double s = p(static_cast<Eigen::Index>(off + sizes[l + 1] * sizes[l] + o));
        for (std::size_t i = 0; i < sizes[l]; ++i) s += p(static_cast<Eigen::Index>(off + o * sizes[l] + i)) * a[i];
        z[o] = (l + 2 == sizes.size()) ? s : std::max(0.0, s);
      }
      off += sizes[l + 1] * sizes[l] + sizes[l + 1];
      a = z;
    }
    if (m.head() == Head::Softmax) {
      double mx = a[0], sum = 0.0;
      for (double v : a) mx = std::max(mx, v);
      for (double& v : a) sum += (v = std::exp(v - mx));
      for (double& v : a) v /= sum;
    }
    for (std::size_t o = 0; o < a.size(); ++o) out(r, static_cast<Eigen::Index>(o)) = a[o];
  }
  return out;
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("hand-built forward passes") {
    Mlp zero({3, 4, 2}, Head::Identity);
    CHECK(zero.forward(Eigen::MatrixXd::Ones(5, 3)).cwiseAbs().maxCoeff() == 0.0);
    Mlp lin({1, 1}, Head::Identity);
    lin.weights(0)(0, 0) = 2.0;
    CHECK(lin.forward(Eigen::MatrixXd::Constant(1, 1, 3.0))(0, 0) == 6.0);
    CHECK(lin.parameter_count() == 2);
    CHECK(Mlp({2, 16, 3}, Head::Softmax).parameter_count() == 2 * 16 + 16 + 16 * 3 + 3);
  }

  TEST_CASE("shape and configuration errors") {
    CHECK_THROWS_AS(Mlp({3}, Head::Identity), ParameterError);
    CHECK_THROWS_AS(Mlp({3, 0, 1}, Head::Identity), ParameterError);
    CHECK_THROWS_AS(Mlp({3, 1}, Head::Identity, 1.0), ParameterError);
    Mlp m({3, 4, 2}, Head::Identity);
    CHECK_THROWS_AS(m.forward(Eigen::MatrixXd::Ones(2, 4)), ParameterError);
    CHECK_THROWS_AS(m.loss(Eigen::MatrixXd::Ones(2, 3), Eigen::MatrixXd::Ones(2, 3), NnLoss::Mse), ParameterError);
    CHECK_THROWS_AS(m.gradient(Eigen::MatrixXd::Ones(2, 3), Eigen::MatrixXd::Ones(2, 2), NnLoss::CrossEntropy),
                    ParameterError);
    CHECK_THROWS_AS(m.sgd_step(Eigen::VectorXd::Zero(3), 0.1), ParameterError);
    CHECK_THROWS_AS(one_hot({0, 3}, 3), ParameterError);
  }

  TEST_CASE("forward matches a per-neuron loop") {
    Rng rng(11);
    for (auto head : {Head::Identity, Head::Softmax}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = Mlp::he_init({4, 7, 5, 3}, head, seed);
        Mlp biased = m;
        Eigen::VectorXd p = m.parameters() + 0.1 * Eigen::VectorXd::Ones(static_cast<Eigen::Index>(m.parameter_count()));
        biased.set_parameters(p);
        const auto x = gaussian(rng, 9, 4);
        CHECK((biased.forward(x) - loop_forward(biased, x)).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }

  TEST_CASE("softmax rows are distributions") {
    Eigen::MatrixXd z(3, 4);
    z << 1000, 0, -1000, 3, -1e300, 0, 0, 0, 1e-300, 2e-300, 0, 0;
    const auto p = softmax_rows(z);
    CHECK((p.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
    CHECK(p.allFinite());
    Rng rng(3);
    const auto m = Mlp::he_init({2, 16, 10}, Head::Softmax, 4);
    const auto out = m.forward(100.0 * gaussian(rng, 50, 2));
    CHECK((out.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
  }

  TEST_CASE("initialization") {
    const auto a = Mlp::he_init({100, 200, 3}, Head::Softmax, 7), b = Mlp::he_init({100, 200, 3}, Head::Softmax, 7);
    CHECK(a.parameters() == b.parameters());
    CHECK(a.parameters() != Mlp::he_init({100, 200, 3}, Head::Softmax, 8).parameters());
    CHECK(a.bias(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.bias(1).cwiseAbs().maxCoeff() == 0.0);
    const auto w = a.weights(0);
    const double mean = w.mean();
    const double var = (w.array() - mean).square().sum() / static_cast<double>(w.size() - 1);
    // 20000 draws of N(0, 0.02): sd of the sample variance is 0.02 * sqrt(2 / 20000) = 2e-4
    CHECK(std::abs(var - 0.02) < 1e-3);
    CHECK(std::abs(mean) < 5e-3);
  }

  TEST_CASE("perfect fit has zero gradient") {
    Rng rng(5);
    const auto m = Mlp::he_init({3, 8, 2}, Head::Identity, 1);
    const auto x = gaussian(rng, 10, 3);
    const auto g = m.gradient(x, m.forward(x), NnLoss::Mse);
    CHECK(g.cwiseAbs().maxCoeff() == 0.0);
    CHECK(m.loss(x, m.forward(x), NnLoss::Mse) == 0.0);
  }

  TEST_CASE("gradients match central finite differences") {
    for (const auto& c : testing::grad_cases()) {
      for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto r = testing::run_grad_case(c, seed);
        INFO(c.name, " seed ", seed, " worst coordinate ", r.worst);
        CHECK(r.max_rel < 1e-4);
      }
    }
  }

  TEST_CASE("batch gradient is the sum of per-example gradients") {
    Rng rng(6);
    for (auto kind : {NnLoss::CrossEntropy, NnLoss::Mse}) {
      const auto m = Mlp::he_init({2, 16, 3}, Head::Softmax, 9);
      const auto x = gaussian(rng, 7, 2);
      const auto y = one_hot({0, 1, 2, 2, 1, 0, 1}, 3);
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m.parameter_count()));
      double loss = 0.0;
      for (Eigen::Index r = 0; r < 7; ++r) {
        sum += m.gradient(x.row(r), y.row(r), kind);
        loss += m.loss(x.row(r), y.row(r), kind);
      }
      CHECK((m.gradient(x, y, kind) - sum).cwiseAbs().maxCoeff() < 1e-10);
      CHECK(m.loss(x, y, kind) == doctest::Approx(loss).epsilon(1e-12));
    }
  }

  TEST_CASE("cross-entropy against its closed form") {
    Mlp m({1, 2}, Head::Softmax);
    m.bias(0) << 0.0, std::log(3.0);  // p = (1/4, 3/4)
    const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 1);
    CHECK(m.loss(x, one_hot({0}, 2), NnLoss::CrossEntropy) == doctest::Approx(std::log(4.0)));
    CHECK(m.loss(x, one_hot({1}, 2), NnLoss::CrossEntropy) == doctest::Approx(std::log(4.0 / 3.0)));
    const auto g = m.gradient(x, one_hot({0}, 2), NnLoss::CrossEntropy);
    CHECK(g(2) == doctest::Approx(0.25 - 1.0));
    CHECK(g(3) == doctest::Approx(0.75));
    CHECK_THROWS_AS(Mlp({1, 2}, Head::Identity).loss(x, one_hot({0}, 2), NnLoss::CrossEntropy), ParameterError);
  }

  TEST_CASE("sgd step") {
    Rng rng(7);
    auto m = Mlp::he_init({2, 4, 2}, Head::Identity, 2);
    const auto before = m.parameters();
    m.sgd_step(gaussian(rng, static_cast<Eigen::Index>(m.parameter_count()), 1).col(0), 0.0);
    CHECK(m.parameters() == before);

    // one weight, input 1, zero bias: loss (w - w*)^2
    Mlp q({1, 1}, Head::Identity);
    const double w = 0.3, wstar = -1.2, eta = 0.05;
    q.weights(0)(0, 0) = w;
    const auto g = q.gradient(Eigen::MatrixXd::Ones(1, 1), Eigen::MatrixXd::Constant(1, 1, wstar), NnLoss::Mse);
    q.sgd_step(g, eta);
    CHECK(q.weights(0)(0, 0) == doctest::Approx(w - eta * 2.0 * (w - wstar)).epsilon(1e-15));
  }

  TEST_CASE("predict_set composes with funcspace norms") {
    Rng rng(8);
    const auto m = Mlp::he_init({2, 8, 3}, Head::Softmax, 3);
    SampleGrid grid{gaussian(rng, 20, 2), 3};
    const FunctionGrid f = predict_set(m, grid);
    MeasureWeights w = MeasureWeights::Constant(20, 1.0 / 20.0);
    const Eigen::MatrixXd out = m.forward(grid.points);
    double s = 0.0;
    for (Eigen::Index r = 0; r < 20; ++r) s += out.row(r).squaredNorm() / 20.0;
    CHECK(norm(f, w) == doctest::Approx(std::sqrt(s)).epsilon(1e-14));
    CHECK_THROWS_AS(predict_set(m, SampleGrid{grid.points, 2}), ParameterError);
  }

  TEST_CASE("dropout") {
    Rng rng(9);
    auto m = Mlp::he_init({3, 6, 2}, Head::Identity, 5, 0.4);
    // nonnegative weights and inputs keep every ReLU in its linear regime
    Eigen::VectorXd p = m.parameters().cwiseAbs();
    m.set_parameters(p);
    const Eigen::MatrixXd x = gaussian(rng, 1, 3).cwiseAbs();
    const Eigen::MatrixXd ref = m.forward(x);
    CHECK(m.forward(x) == ref);

    const int draws = 10000;
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(1, 2), sq = Eigen::MatrixXd::Zero(1, 2);
    Rng drop(10);
    for (int k = 0; k < draws; ++k) {
      const Eigen::MatrixXd o = m.forward(x, drop);
      sum += o;
      sq += o.cwiseProduct(o);
    }
    const Eigen::MatrixXd mean = sum / draws;
    const Eigen::MatrixXd sd = ((sq / draws - mean.cwiseProduct(mean)) * draws / (draws - 1.0)).cwiseSqrt();
    for (Eigen::Index c = 0; c < 2; ++c) {
      CHECK(sd(0, c) > 0.0);
      CHECK(std::abs(mean(0, c) - ref(0, c)) <= 3.0 * sd(0, c) / std::sqrt(static_cast<double>(draws)));
    }

    // without an rng the dropout rate is ignored and results are bit-identical
    const auto y = Eigen::MatrixXd::Ones(1, 2);
    CHECK(m.gradient(x, y, NnLoss::Mse) == m.gradient(x, y, NnLoss::Mse));
    Rng a(4), b(4);
    CHECK(m.gradient(x, y, NnLoss::Mse, &a) == m.gradient(x, y, NnLoss::Mse, &b));
  }

  TEST_CASE("checkpoint round trip") {
    const auto m = Mlp::he_init({2, 5, 3}, Head::Softmax, 12, 0.2);
    const auto text = to_json(m).dump();
    const auto back = mlp_from_json(nlohmann::json::parse(text));
    CHECK(back.parameters() == m.parameters());
    CHECK(back.layer_sizes() == m.layer_sizes());
    CHECK(back.head() == m.head());
    CHECK(back.dropout() == m.dropout());
    auto j = to_json(m);
    j["params"].erase(0);
    CHECK_THROWS_AS(mlp_from_json(j), ParameterError);
    const auto ident = mlp_from_json(to_json(Mlp({1, 1}, Head::Identity)));
    CHECK(ident.head() == Head::Identity);
  }
}
