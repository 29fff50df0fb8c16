#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "osl/dgp.hpp"
#include "osl/diffcheck.hpp"
#include "osl/losses.hpp"

using namespace osl;

namespace {

Distribution uniform_grid(int n) {
  std::vector<Sample> atoms;
  for (int i = 0; i < n; ++i) {
    Sample s;
    s.w = Vec::Constant(1, i / double(n));
    s.x_slice = Slice{0, 1};
    atoms.push_back(s);
  }
  return Distribution::uniform(std::move(atoms));
}

double mean_of(const Distribution& d, const std::function<double(const Sample&)>& f) {
  return expectation(d, f);
}

CheckTarget target_of(const DgpSpec& d, const LossSetup& s) { return {d.dist, s.theta_star, s.g0, s.check_members}; }

}  // namespace

TEST_CASE("derivatives of E[f^2] at f = 1 in direction 1") {
  const Distribution d = uniform_grid(5);
  const auto f = FunctionHandle::constant(View::X, Vec::Ones(1));
  DerivativeRequest req;
  req.functional = [&](const FunctionHandle& th, const FunctionHandle&) {
    return mean_of(d, [&](const Sample& s) { return th.scalar(s) * th.scalar(s); });
  };
  req.theta_bar = f;
  req.g_bar = FunctionHandle::empty();
  req.theta_dir = f;
  req.theta_order = 1;
  CHECK(std::abs(dir_derivative(req).value - 2.0) <= 1e-8);
  req.theta_order = 2;
  CHECK(std::abs(dir_derivative(req).value - 2.0) <= 1e-6);
}

TEST_CASE("mixed derivative of a bilinear functional") {
  const Distribution d = uniform_grid(7);
  const auto one = FunctionHandle::constant(View::X, Vec::Ones(1));
  const auto two = FunctionHandle::constant(View::W, Vec::Constant(1, 2.0));
  DerivativeRequest req;
  req.functional = [&](const FunctionHandle& th, const FunctionHandle& g) {
    return mean_of(d, [&](const Sample& s) { return th.scalar(s) * g.scalar(s); });
  };
  req.theta_bar = two;
  req.g_bar = two;
  req.theta_dir = one;
  req.g_dir = FunctionHandle::constant(View::W, Vec::Ones(1));
  req.theta_order = 1;
  req.g_order = 1;
  CHECK(std::abs(dir_derivative(req).value - 1.0) <= 1e-8);
}

TEST_CASE("stencils are exact on low-degree polynomials") {
  auto F = [](double t, double s) { return 3.0 + t * t * s - 2.0 * t * s + 5.0 * s * s; };
  CHECK(stencil_derivative(F, 1, 1, 1e-3, 1e-3).value == doctest::Approx(-2.0).epsilon(1e-8));
  CHECK(stencil_derivative(F, 2, 1, 1e-2, 1e-2).value == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(stencil_derivative(F, 0, 2, 1e-3, 1e-3).value == doctest::Approx(10.0).epsilon(1e-6));
}

TEST_CASE("default step follows the order rule") {
  const double eps = std::numeric_limits<double>::epsilon();
  CHECK(default_fd_step(2) == doctest::Approx(std::pow(eps, 0.25)));
  CHECK(default_fd_step(1, 10.0) == doctest::Approx(10.0 * std::pow(eps, 1.0 / 3.0)));
  CHECK(default_fd_step(1, 0.1) == doctest::Approx(std::pow(eps, 1.0 / 3.0)));
}

TEST_CASE("zero directions give an exactly zero cross derivative") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("plugoutcome_naive");
  DerivativeRequest req;
  req.functional = [&](const FunctionHandle& th, const FunctionHandle& g) {
    return population_risk(s.loss, th, g, d.dist).value;
  };
  req.theta_bar = s.theta_star;
  req.g_bar = s.g0;
  req.theta_dir = FunctionHandle::constant(View::X, Vec::Zero(1));
  req.g_dir = FunctionHandle::constant(View::W, Vec::Zero(2));
  req.theta_order = 1;
  req.g_order = 1;
  CHECK(dir_derivative(req).value == 0.0);
}

TEST_CASE("orthogonality verdicts: robinson passes, plug-in outcome fails") {
  const DgpSpec d = make_dgp("cate_enum");
  CheckOptions o;
  o.n_dirs = 20;
  const auto& rob = d.setup("robinson");
  const OrthoReport a = check_orthogonality(rob.loss, target_of(d, rob), o);
  CHECK(a.verdict == Verdict::Pass);
  CHECK(a.values.size() == 20);
  CHECK(a.tolerance == doctest::Approx(1e-6 * std::max(1.0, population_risk(rob.loss, rob.theta_star, rob.g0, d.dist).value)));
  const auto& plug = d.setup("plugoutcome_naive");
  const OrthoReport b = check_orthogonality(plug.loss, target_of(d, plug), o);
  CHECK(b.verdict == Verdict::Fail);
  CHECK(b.max_abs >= 0.01);
}

TEST_CASE("orthogonality reports are reproducible for a fixed seed") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  CheckOptions o;
  o.seed = 42;
  const OrthoReport a = check_orthogonality(s.loss, target_of(d, s), o);
  const OrthoReport b = check_orthogonality(s.loss, target_of(d, s), o);
  CHECK(a.values == b.values);
}

TEST_CASE("sampler targets are rejected") {
  const DgpSpec d = make_dgp("cate_linear");
  const auto& s = d.setup("robinson");
  CHECK_THROWS_AS(check_orthogonality(s.loss, target_of(d, s), CheckOptions{}), ConfigError);
}

TEST_CASE("first-order condition: well-specified class passes") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  const OrthoReport r = check_first_order(s.loss, target_of(d, s), CheckOptions{});
  CHECK(r.verdict == Verdict::Pass);
  // Interior minimizer: derivatives toward theta* +- h are both near zero.
  for (double v : r.values) CHECK(std::abs(v) <= 1e-6);
}

TEST_CASE("first-order condition: projection onto a misspecified box class passes") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  ThetaClass box = ThetaClass::linear(FeatureMap::intercept(1));
  box.constraint = ThetaClass::Constraint::Box;
  box.lo = 0.0;
  box.hi = 1.0;  // the true slope lies outside
  const FunctionHandle proj = population_minimizer(s.loss, s.g0, d.dist, box);
  std::vector<FunctionHandle> members;
  for (double a : {0.0, 0.5, 1.0}) {
    for (double b : {0.0, 0.5, 1.0}) {
      Mat w(2, 1);
      w << a, b;
      members.push_back(box.make(w));
    }
  }
  const CheckTarget t{d.dist, proj, s.g0, members};
  const OrthoReport r = check_first_order(s.loss, t, CheckOptions{});
  CHECK(r.verdict == Verdict::Pass);
  for (double v : r.values) CHECK(v >= -1e-6);
  // theta0 itself is not the minimizer over the box, so some member direction is strictly increasing.
  CHECK(*std::max_element(r.values.begin(), r.values.end()) > 1e-3);
}

TEST_CASE("first-order condition fails away from the minimizer") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  Mat w(2, 1);
  w << 0.0, 0.0;
  const CheckTarget t{d.dist, s.cls.make(w), s.g0, s.check_members};
  CHECK(check_first_order(s.loss, t, CheckOptions{}).verdict == Verdict::Fail);
}

TEST_CASE("curvature of the square loss is 2") {
  const DgpSpec d = make_dgp("regress_enum");
  const auto& s = d.setup("square");
  const Curvature c = estimate_curvature(s.loss, target_of(d, s), 10, 1);
  CHECK(c.lambda_hat == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(c.beta1_hat == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("robinson curvature matches the enumerated quadratic form") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  const auto& e0 = d.structural.at("e0");
  const int n_dirs = 8;
  const std::uint64_t seed = 3;
  const Curvature c = estimate_curvature(s.loss, target_of(d, s), n_dirs, seed);
  const auto xkeys = std::make_shared<const KeyTable>(d.dist, View::X);
  const Rng root(seed, "curvature");
  double lo = 1e300, hi = -1e300;
  for (int k = 0; k < n_dirs; ++k) {
    Rng rng = root.derive("direction", static_cast<std::uint64_t>(k));
    const FunctionHandle h = random_direction(xkeys, 1, rng);
    double num = 0.0, den = 0.0;
    const auto& atoms = d.dist.atoms();
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const double r = atoms[i].t[0] - e0.scalar(atoms[i]);
      const double hv = h.scalar(atoms[i]);
      num += d.dist.weights()[i] * 2.0 * r * r * hv * hv;
      den += d.dist.weights()[i] * hv * hv;
    }
    lo = std::min(lo, num / den);
    hi = std::max(hi, num / den);
  }
  CHECK(c.lambda_hat == doctest::Approx(lo).epsilon(1e-6));
  CHECK(c.beta1_hat == doctest::Approx(hi).epsilon(1e-6));
  CHECK(c.used == n_dirs);
}

TEST_CASE("linear losses have zero curvature") {
  const DgpSpec d = make_dgp("policy_binary_enum");
  const auto& s = d.setup("dr_policy_binary");
  const Curvature c = estimate_curvature(s.loss, target_of(d, s), 10, 1);
  CHECK(std::abs(c.lambda_hat) <= 1e-6);
  CHECK(std::abs(c.beta1_hat) <= 1e-6);
}
