#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "osl/dgp.hpp"
#include "osl/diffcheck.hpp"
#include "osl/losses.hpp"
#include "osl/rng.hpp"

using namespace osl;

namespace {

Sample make_sample(double y, Vec t, int x_dim = 1) {
  Sample s;
  s.w = Vec::Zero(x_dim);
  s.x_slice = Slice{0, x_dim};
  s.y = y;
  s.t = std::move(t);
  return s;
}

Vec one(double v) { return Vec::Constant(1, v); }

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// Conditional expectation of f given the x key, by atom enumeration.
std::map<int, double> by_x(const DgpSpec& d, const std::function<double(const Sample&)>& f) {
  std::map<int, double> num, den;
  const auto& atoms = d.dist.atoms();
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    const int k = d.x_keys->lookup(atoms[i]);
    num[k] += d.dist.weights()[i] * f(atoms[i]);
    den[k] += d.dist.weights()[i];
  }
  for (auto& [k, v] : num) v /= den[k];
  return num;
}

CheckTarget target_of(const DgpSpec& d, const LossSetup& s) { return {d.dist, s.theta_star, s.g0, s.check_members}; }

}  // namespace

TEST_CASE("robinson: direct substitution and vanishing residuals") {
  const LossModel l = robinson_loss();
  CHECK(l(one(0.5), vec({1.0, 0.5}), make_sample(2, one(1))) == 0.5625);
  CHECK(l(one(3.0), vec({1.0, 0.5}), make_sample(1.0, one(0.5))) == 0.0);
}

TEST_CASE("robinson: single-index form gives the same values") {
  const LossModel a = robinson_loss();
  const LossModel b = make_single_index_loss(robinson_single_index());
  Rng rng(1, "robinson_si");
  for (int i = 0; i < 100; ++i) {
    const Vec zeta = one(rng.uniform(-2, 2)), gamma = vec({rng.uniform(-1, 1), rng.uniform(0.1, 0.9)});
    const Sample s = make_sample(rng.uniform(-2, 2), one(rng.uniform() < 0.5 ? 0.0 : 1.0));
    CHECK(b(zeta, gamma, s) == doctest::Approx(a(zeta, gamma, s)).epsilon(1e-13));
  }
}

TEST_CASE("robinson: orthogonal on the enumerated CATE DGP") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  CheckOptions o;
  o.n_dirs = 20;
  const OrthoReport r = check_orthogonality(s.loss, target_of(d, s), o);
  CHECK(r.verdict == Verdict::Pass);
  CHECK(r.max_abs <= 1e-6);
}

TEST_CASE("dr binary: score arithmetic") {
  CHECK(dr_binary_score(0.0, 1.0, 0.5, 1.0, 1.0, 0.01) == 1.0);
  const LossModel l = dr_policy_loss_binary();
  CHECK(l(one(1.0), vec({0.0, 1.0, 0.5}), make_sample(1.0, one(1))) == 1.0);
  Rng rng(2, "dr_zero");
  for (int i = 0; i < 20; ++i) {
    const Vec g = vec({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.1, 0.9)});
    CHECK(l(one(0.0), g, make_sample(rng.normal(), one(rng.uniform() < 0.5))) == 0.0);
  }
}

TEST_CASE("dr binary: conditional mean of the score is the outcome contrast") {
  const DgpSpec d = make_dgp("policy_binary_enum");
  const auto& g0 = d.setup("dr_policy_binary").g0;
  const auto beta = by_x(d, [&](const Sample& z) {
    const Vec g = g0(z);
    return dr_binary_score(g[0], g[1], g[2], z.treatment(), z.y, 0.01);
  });
  const auto contrast = by_x(d, [&](const Sample& z) {
    const Vec g = g0(z);
    return g[1] - g[0];
  });
  for (const auto& [k, v] : beta) CHECK(std::abs(v - contrast.at(k)) <= 1e-12);
}

TEST_CASE("ips with true propensity has the same conditional mean as dr") {
  const DgpSpec d = make_dgp("policy_binary_enum");
  const auto& g0 = d.setup("dr_policy_binary").g0;
  const LossModel ips = ips_naive_loss(), dr = dr_policy_loss_binary();
  const auto a = by_x(d, [&](const Sample& z) { return ips(one(1.0), g0(z), z); });
  const auto b = by_x(d, [&](const Sample& z) { return dr(one(1.0), g0(z), z); });
  for (const auto& [k, v] : a) CHECK(std::abs(v - b.at(k)) <= 1e-12);
}

TEST_CASE("dr multi: two arms reduce to the binary score") {
  Rng rng(3, "multi_binary");
  for (int i = 0; i < 200; ++i) {
    const double f0 = rng.uniform(-1, 1), f1 = rng.uniform(-1, 1), e = rng.uniform(0.05, 0.95), y = rng.normal();
    const int arm = rng.uniform() < 0.5 ? 0 : 1;
    const Vec beta = dr_multi_scores(vec({f0, f1}), vec({1.0 - e, e}), arm, y, 0.01);
    const double bin = dr_binary_score(f0, f1, e, arm, y, 0.01);
    CHECK(beta[1] - beta[0] == doctest::Approx(bin).epsilon(1e-12));
  }
}

TEST_CASE("dr multi: zero outcomes and regressions give a zero score") {
  const Vec beta = dr_multi_scores(Vec::Zero(3), Vec::Constant(3, 1.0 / 3.0), 1, 0.0, 0.01);
  CHECK(beta.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("dr multi: conditional mean of each arm score is the arm regression") {
  const DgpSpec d = make_dgp("policy_multi_enum");
  const auto& s = d.setup("dr_policy_multi");
  const int n = s.loss.target_dim;
  for (int arm = 0; arm < n; ++arm) {
    const auto beta = by_x(d, [&](const Sample& z) {
      const Vec g = s.g0(z);
      return dr_multi_scores(g.head(n), g.tail(n), z.arm(), z.y, 0.01)[arm];
    });
    const auto f = by_x(d, [&](const Sample& z) { return s.g0(z)[arm]; });
    for (const auto& [k, v] : beta) CHECK(std::abs(v - f.at(k)) <= 1e-12);
  }
}

TEST_CASE("dr multi: outputs outside the simplex are rejected by the risk") {
  const DgpSpec d = make_dgp("policy_multi_enum");
  const auto& s = d.setup("dr_policy_multi");
  const auto bad = FunctionHandle::constant(View::X, Vec::Constant(3, 0.5));
  CHECK_THROWS_AS(population_risk(s.loss, bad, s.g0, d.dist), DomainError);
}

TEST_CASE("domain adaptation: unit weights give the square loss, weight 2 doubles it") {
  const LossModel l = domain_adaptation_loss(), sq = square_loss();
  Rng rng(4, "domain");
  for (int i = 0; i < 50; ++i) {
    const Vec zeta = one(rng.uniform(-2, 2));
    const Sample z = make_sample(rng.normal(), Vec());
    CHECK(l(zeta, one(1.0), z) == sq(zeta, Vec(), z));
    CHECK(l(zeta, one(2.0), z) == 2.0 * sq(zeta, Vec(), z));
  }
  CHECK_THROWS_AS(l(one(0.0), one(-1.0), make_sample(0, Vec())), NumericError);
}

TEST_CASE("missing data: fully observed case is the square loss") {
  const LossModel l = missing_data_loss();
  CHECK(l(one(0.25), vec({0.0, 1.0}), make_sample(2.0, one(1))) == (2.0 - 0.25) * (2.0 - 0.25));
  CHECK_THROWS_AS(l(one(0.0), vec({0.0, 0.001}), make_sample(1.0, one(1))), NumericError);
}

TEST_CASE("orthogonality certificates for domain adaptation, missing data and the policy losses") {
  for (const auto& [dgp, loss] : std::vector<std::pair<std::string, std::string>>{
           {"covshift_enum", "domain_adapt"},
           {"missing_enum", "missing_data"},
           {"policy_binary_enum", "dr_policy_binary"},
           {"policy_multi_enum", "dr_policy_multi"}}) {
    CAPTURE(loss);
    const DgpSpec d = make_dgp(dgp);
    const auto& s = d.setup(loss);
    CheckOptions o;
    const OrthoReport r = check_orthogonality(s.loss, target_of(d, s), o);
    CHECK(r.verdict == Verdict::Pass);
    CHECK(r.max_abs <= 1e-6);
    if (s.loss.claims_universal_orthogonality) {
      o.universal = true;
      CHECK(check_orthogonality(s.loss, target_of(d, s), o).verdict == Verdict::Pass);
    }
  }
}

TEST_CASE("naive baselines fail orthogonality on their designed instances") {
  for (const auto& [dgp, loss] : std::vector<std::pair<std::string, std::string>>{
           {"cate_enum", "plugoutcome_naive"}, {"policy_binary_enum", "ips_naive"}}) {
    CAPTURE(loss);
    const DgpSpec d = make_dgp(dgp);
    const auto& s = d.setup(loss);
    const OrthoReport r = check_orthogonality(s.loss, target_of(d, s), CheckOptions{});
    CHECK(r.verdict == Verdict::Fail);
    CHECK(r.max_abs >= 0.01);
  }
}

TEST_CASE("plugoutcome: outcome errors with zero conditional mean leave the cross derivative at zero") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("plugoutcome_naive");
  const auto& keys = *d.w_keys;
  // Centre a random function of w within each x group.
  Rng rng(5, "plug_centered");
  std::vector<double> raw(keys.size()), xk(keys.size(), -1);
  for (auto& v : raw) v = rng.uniform(-1, 1);
  const auto& atoms = d.dist.atoms();
  for (std::size_t i = 0; i < atoms.size(); ++i) xk[keys.atom_keys()[i]] = d.x_keys->lookup(atoms[i]);
  std::map<int, double> num, den;
  for (int k = 0; k < keys.size(); ++k) {
    num[int(xk[k])] += keys.key_mass()[k] * raw[k];
    den[int(xk[k])] += keys.key_mass()[k];
  }
  Mat h = Mat::Zero(keys.size(), 2);
  for (int k = 0; k < keys.size(); ++k) h(k, 1) = raw[k] - num[int(xk[k])] / den[int(xk[k])];
  const auto g_dir = FunctionHandle::tabular(d.w_keys, h);
  const auto th_dir = FunctionHandle::tabular(d.x_keys, Mat::Ones(d.x_keys->size(), 1));

  DerivativeRequest req;
  req.functional = [&](const FunctionHandle& th, const FunctionHandle& g) {
    return population_risk(s.loss, th, g, d.dist).value;
  };
  req.theta_bar = s.theta_star;
  req.g_bar = s.g0;
  req.theta_dir = th_dir;
  req.g_dir = g_dir;
  req.theta_order = 1;
  req.g_order = 1;
  CHECK(std::abs(dir_derivative(req).value) <= 1e-8);

  // Uncentred direction: D = -2 E[h_f1], bounded away from zero.
  Mat u = Mat::Zero(keys.size(), 2);
  u.col(1).setOnes();
  req.g_dir = FunctionHandle::tabular(d.w_keys, u);
  CHECK(dir_derivative(req).value == doctest::Approx(-2.0).epsilon(1e-6));
}

TEST_CASE("analytic gradients agree with central differences") {
  LossOptions opts;
  opts.n_treatments = 3;
  Rng rng(6, "grad_check");
  for (const auto& id : catalog_loss_ids()) {
    CAPTURE(id);
    const LossModel l = make_loss(id, opts);
    for (int rep = 0; rep < 25; ++rep) {
      Vec zeta(l.target_dim), gamma(l.nuisance_dim);
      for (auto& v : zeta) v = rng.uniform(0.2, 0.8);
      for (auto& v : gamma) v = rng.uniform(0.2, 0.8);
      Vec t;
      if (id == "dr_policy_multi") {
        t = Vec::Zero(3);
        t[static_cast<Eigen::Index>(rng.below(3))] = 1.0;
      } else {
        t = one(rng.uniform() < 0.5 ? 0.0 : 1.0);
      }
      const Sample z = make_sample(id == "strategic" ? double(rng.uniform() < 0.5) : rng.normal(), t);
      Vec a(l.target_dim), b(l.target_dim);
      l.gradient_zeta(zeta, gamma, z, a);
      l.fd_gradient_zeta(zeta, gamma, z, b);
      CHECK((a - b).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, a.cwiseAbs().maxCoeff()));
      if (l.nuisance_dim > 0) {
        Vec c(l.nuisance_dim), e(l.nuisance_dim);
        l.gradient_gamma(zeta, gamma, z, c);
        l.fd_gradient_gamma(zeta, gamma, z, e);
        CHECK((c - e).cwiseAbs().maxCoeff() <= 1e-6 * std::max(1.0, c.cwiseAbs().maxCoeff()));
      }
    }
  }
}

TEST_CASE("propensity clipping is counted") {
  reset_clip_events();
  const double s = dr_binary_score(0, 0, 0.0, 1.0, 1.0, 0.05);
  CHECK(s == 1.0 / 0.05);
  CHECK(clip_event_count() >= 1);
}

TEST_CASE("unknown loss ids are rejected") { CHECK_THROWS_AS(make_loss("nope"), ConfigError); }
