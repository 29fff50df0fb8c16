#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "osl/core.hpp"
#include "osl/dgp.hpp"
#include "osl/losses.hpp"
#include "osl/rng.hpp"

using namespace osl;

namespace {

Sample scalar_sample(double x, double y, double t) {
  Sample s;
  s.w = Vec::Constant(1, x);
  s.x_slice = Slice{0, 1};
  s.y = y;
  s.t = Vec::Constant(1, t);
  return s;
}

// Loss that returns y, whatever the arguments.
LossModel y_loss() {
  LossModel l;
  l.id = "y";
  l.value = [](const VecRef&, const VecRef&, const Sample& z) { return z.y; };
  return l;
}

}  // namespace

TEST_CASE("empirical risk is the arithmetic mean of pointwise losses") {
  std::vector<Sample> data{scalar_sample(0, 1, 0), scalar_sample(0, 3, 0)};
  const auto th = FunctionHandle::constant(View::X, Vec::Zero(1));
  CHECK(empirical_risk(y_loss(), th, FunctionHandle::empty(), data) == 2.0);
}

TEST_CASE("robinson loss vanishes when both residuals vanish") {
  const LossModel l = robinson_loss();
  Rng rng(3, "robinson_zero");
  for (int i = 0; i < 50; ++i) {
    const double m = rng.uniform(-2, 2), e = rng.uniform(0.1, 0.9);
    Sample s = scalar_sample(rng.uniform(), m, e);
    Vec zeta = Vec::Constant(1, rng.uniform(-3, 3)), gamma(2);
    gamma << m, e;
    CHECK(l(zeta, gamma, s) == 0.0);
  }
}

TEST_CASE("robinson loss by direct substitution") {
  const LossModel l = robinson_loss();
  Vec zeta = Vec::Constant(1, 0.5), gamma(2);
  gamma << 1.0, 0.5;
  CHECK(l(zeta, gamma, scalar_sample(0, 2, 1)) == 0.5625);
}

TEST_CASE("population risk of an enumerated distribution is the weighted sum") {
  auto d = Distribution::enumerated({scalar_sample(0, 4, 0), scalar_sample(1, 0, 0)}, {0.25, 0.75});
  const auto th = FunctionHandle::constant(View::X, Vec::Zero(1));
  const RiskEstimate r = population_risk(y_loss(), th, FunctionHandle::empty(), d);
  CHECK(r.value == 1.0);
  CHECK(r.std_error == 0.0);
}

TEST_CASE("sampler with a constant loss has zero standard error") {
  auto d = Distribution::sampler([](std::uint64_t, std::uint64_t i) { return scalar_sample(double(i), 1.5, 0); });
  const auto th = FunctionHandle::constant(View::X, Vec::Zero(1));
  const RiskEstimate r = population_risk(y_loss(), th, FunctionHandle::empty(), d, 1000, 1);
  CHECK(r.value == 1.5);
  CHECK(r.std_error == 0.0);
  CHECK(r.draws == 1000);
}

TEST_CASE("enumerated weights must sum to one") {
  CHECK_THROWS_AS(Distribution::enumerated({scalar_sample(0, 0, 0)}, {0.5}), ConfigError);
  CHECK_THROWS_AS(Distribution::enumerated({scalar_sample(0, 0, 0), scalar_sample(1, 0, 0)}, {1.5, -0.5}),
                  ConfigError);
}

TEST_CASE("draws are a pure function of (seed, index)") {
  const DgpSpec d = make_dgp("cate_linear", {}, 5);
  const Sample a = d.dist.draw(11, 7), b = d.dist.draw(11, 7), c = d.dist.draw(12, 7);
  CHECK(a.w == b.w);
  CHECK(a.y == b.y);
  CHECK(a.y != c.y);
  const auto n1 = d.dist.draw_n(9, 20);
  CHECK(n1[13].y == d.dist.draw(9, 13).y);
}

TEST_CASE("missing-data population risk at g0 equals E(Y - theta)^2 atom by atom") {
  const DgpSpec d = make_dgp("missing_enum");
  const LossSetup& s = d.setup("missing_data");
  Rng rng(17, "missing_theta");
  for (int rep = 0; rep < 10; ++rep) {
    Mat w(2, 1);
    w << rng.uniform(-1, 1), rng.uniform(-1, 1);
    const FunctionHandle th = FunctionHandle::linear(View::X, FeatureMap::intercept(1), w);
    const double lhs = population_risk(s.loss, th, s.g0, d.dist).value;
    double rhs = 0.0;
    const auto& atoms = d.dist.atoms();
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const double r = atoms[i].u[0] - th.scalar(atoms[i]);  // latent Y
      rhs += d.dist.weights()[i] * r * r;
    }
    CHECK(std::abs(lhs - rhs) <= 1e-12);
  }
}

TEST_CASE("excess risk of theta* is zero") {
  const DgpSpec d = make_dgp("cate_enum");
  const LossSetup& s = d.setup("robinson");
  const ExcessRisk e = excess_risk(s.loss, s.theta_star, s.g0, d.dist, Benchmark{s.theta_star});
  CHECK(e.value == 0.0);
}

TEST_CASE("robinson excess risk equals E[(T - e0)^2 (theta - theta0)^2]") {
  const DgpSpec d = make_dgp("cate_enum");
  const LossSetup& s = d.setup("robinson");
  const auto& e0 = d.structural.at("e0");
  Rng rng(4, "robinson_excess");
  for (int rep = 0; rep < 5; ++rep) {
    Mat w(2, 1);
    w << rng.uniform(-2, 2), rng.uniform(-2, 2);
    const FunctionHandle th = FunctionHandle::linear(View::X, FeatureMap::intercept(1), w);
    const double lhs = excess_risk(s.loss, th, s.g0, d.dist, Benchmark{d.theta0}).value;
    double rhs = 0.0;
    const auto& atoms = d.dist.atoms();
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const double r = atoms[i].t[0] - e0.scalar(atoms[i]);
      const double dt = th.scalar(atoms[i]) - d.theta0.scalar(atoms[i]);
      rhs += d.dist.weights()[i] * r * r * dt * dt;
    }
    CHECK(std::abs(lhs - rhs) <= 1e-12 * std::max(1.0, rhs));
  }
}

TEST_CASE("finite benchmark selects its minimizer") {
  const DgpSpec d = make_dgp("cate_enum");
  const LossSetup& s = d.setup("robinson");
  Mat bad(2, 1);
  bad << 0.0, 0.0;
  const auto theta_bad = FunctionHandle::linear(View::X, FeatureMap::intercept(1), bad);
  Mat mid(2, 1);
  mid << 0.7, 1.5;
  const auto th = FunctionHandle::linear(View::X, FeatureMap::intercept(1), mid);
  const ExcessRisk a = excess_risk(s.loss, th, s.g0, d.dist, Benchmark{s.theta_star});
  const ExcessRisk b =
      excess_risk(s.loss, th, s.g0, d.dist, Benchmark{std::vector<FunctionHandle>{theta_bad, s.theta_star}});
  CHECK(a.value == b.value);
  CHECK(b.benchmark_index == 1);
}

TEST_CASE("arity mismatches are rejected") {
  const LossModel l = robinson_loss();
  const auto th = FunctionHandle::constant(View::X, Vec::Zero(2));
  const auto g = FunctionHandle::constant(View::W, Vec::Zero(2));
  CHECK_THROWS_AS(check_arity(l, th, g), ConfigError);
  const auto th1 = FunctionHandle::constant(View::X, Vec::Zero(1));
  const auto g3 = FunctionHandle::constant(View::W, Vec::Zero(3));
  CHECK_THROWS_AS(check_arity(l, th1, g3), ConfigError);
}

TEST_CASE("non-finite samples are rejected") {
  Sample s = scalar_sample(0, 1, 0);
  s.w[0] = std::nan("");
  CHECK_THROWS_AS(validate_sample(s), NumericError);
  Sample bad = scalar_sample(0, 1, 0);
  bad.x_slice = Slice{0, 3};
  CHECK_THROWS_AS(validate_sample(bad), ConfigError);
}

TEST_CASE("tabular handles follow key lookup and composites are affine") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto keys = d.w_keys;
  Mat vals = Mat::Zero(keys->size(), 1);
  for (int k = 0; k < keys->size(); ++k) vals(k, 0) = k;
  const auto tab = FunctionHandle::tabular(keys, vals);
  const auto one = FunctionHandle::constant(View::W, Vec::Ones(1));
  const auto comp = FunctionHandle::composite(tab, 0.25, one);
  for (const auto& a : d.dist.atoms()) {
    CHECK(tab.scalar(a) == keys->lookup(a));
    CHECK(comp.scalar(a) == keys->lookup(a) + 0.25);
  }
}

TEST_CASE("L2 distance of a constant shift is the shift") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto a = FunctionHandle::constant(View::W, Vec::Constant(1, 0.3));
  const auto b = FunctionHandle::constant(View::W, Vec::Constant(1, -0.2));
  CHECK(distance(a, b, d.dist, NormKind::L2) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(distance(a, b, d.dist, NormKind::L4) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("rng streams are reproducible and separated by name") {
  Rng a(1, "x"), b(1, "x"), c(1, "y");
  const auto va = a.next_u64();
  CHECK(va == b.next_u64());
  CHECK(va != c.next_u64());
  Rng u(2, "uniform");
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK((v >= 0.0 && v < 1.0));
  }
}
