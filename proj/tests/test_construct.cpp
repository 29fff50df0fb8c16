#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "osl/construct.hpp"
#include "osl/dgp.hpp"
#include "osl/diffcheck.hpp"
#include "osl/experiments.hpp"
#include "osl/rng.hpp"

using namespace osl;

namespace {

Sample treated(double y, int arm) {
  Sample s;
  s.w = Vec::Zero(1);
  s.x_slice = Slice{0, 1};
  s.y = y;
  s.t = Vec::Constant(1, arm);
  return s;
}

Vec vec(std::initializer_list<double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// Base loss c * zeta * gamma with scalar target u = y.
BaseLossSpec bilinear_spec(double c) {
  BaseLossSpec s;
  s.id = "bilinear";
  s.base.id = "bilinear_base";
  s.base.target_dim = 1;
  s.base.nuisance_dim = 1;
  s.base.nuisance_components = {"g"};
  s.base.value = [c](const VecRef& zeta, const VecRef& g, const Sample& z) { return c * zeta[0] * g[0] * z.y; };
  s.u = [](const Sample& z) { return Vec::Constant(1, z.y); };
  return s;
}

Distribution symmetric_outcomes() {
  std::vector<Sample> atoms;
  for (double w : {0.0, 1.0, 2.0}) {
    for (double y : {-1.0, 1.0}) {
      Sample s;
      s.w = Vec::Constant(1, w);
      s.x_slice = Slice{0, 1};
      s.y = y;
      atoms.push_back(s);
    }
  }
  return Distribution::uniform(std::move(atoms));
}

}  // namespace

TEST_CASE("zero representer leaves the base loss unchanged") {
  const BaseLossSpec spec = aipw_base_spec();
  const LossModel l = build_orthogonal_loss(spec);
  Rng rng(1, "zero_rep");
  for (int i = 0; i < 100; ++i) {
    const Vec zeta = Vec::Constant(1, rng.uniform(-2, 2));
    const double f0 = rng.uniform(-1, 1), f1 = rng.uniform(-1, 1);
    const Sample z = treated(rng.normal(), rng.uniform() < 0.5 ? 0 : 1);
    CHECK(l(zeta, vec({f0, f1, 0.0, 0.0}), z) == spec.base(zeta, vec({f0, f1}), z));
  }
}

TEST_CASE("treatment-effect construction by substitution") {
  const LossModel l = build_orthogonal_loss(aipw_base_spec());
  // theta = 0, g(1) = 1, g(0) = 0, y = 1, d = 1, a = 2: (0 - 1 + 0 + (1 - 1) * 2)^2 = 1.
  CHECK(l(Vec::Zero(1), vec({0.0, 1.0, 2.0, 2.0}), treated(1.0, 1)) == 1.0);
}

TEST_CASE("constructed AIPW loss is the doubly robust squared form") {
  const LossModel l = build_orthogonal_loss(aipw_base_spec());
  Rng rng(2, "aipw_form");
  for (int i = 0; i < 100; ++i) {
    const double zeta = rng.uniform(-2, 2), f0 = rng.uniform(-1, 1), f1 = rng.uniform(-1, 1);
    const double e = rng.uniform(0.1, 0.9), y = rng.uniform(-2, 2);
    const int t = rng.uniform() < 0.5 ? 0 : 1;
    const double beta = f1 - f0 + t * (y - f1) / e - (1 - t) * (y - f0) / (1 - e);
    const double expected = (zeta - beta) * (zeta - beta);
    const double got = l(Vec::Constant(1, zeta), vec({f0, f1, 1.0 / (1.0 - e), -1.0 / e}), treated(y, t));
    CHECK(std::abs(got - expected) <= 1e-12 * std::max(1.0, expected));
  }
}

TEST_CASE("constructed loss is orthogonal where the base loss is not") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& base = d.setup("plugoutcome_naive");
  const auto& made = d.setup("aipw_constructed");
  CheckOptions o;
  const OrthoReport rb =
      check_orthogonality(base.loss, {d.dist, base.theta_star, base.g0, base.check_members}, o);
  const OrthoReport rm =
      check_orthogonality(made.loss, {d.dist, made.theta_star, made.g0, made.check_members}, o);
  CHECK(rb.verdict == Verdict::Fail);
  CHECK(rm.verdict == Verdict::Pass);
  CHECK(rm.max_abs <= 1e-6);
  o.universal = true;
  CHECK(check_orthogonality(made.loss, {d.dist, made.theta_star, made.g0, made.check_members}, o).verdict ==
        Verdict::Pass);
}

TEST_CASE("strategic representer: enumeration reproduces the closed form") {
  const DgpSpec d = make_dgp("strategic_enum");
  const auto& s = d.setup("strategic");
  const BaseLossSpec spec = strategic_base_spec();
  const FunctionHandle oracle = riesz_oracle(spec, d.dist, s.theta_star, s.g0);
  const FunctionHandle formula = riesz_formula(spec, s.theta_star, s.g0);
  for (const auto& a : d.dist.atoms()) {
    CHECK((oracle(a) - formula(a)).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((oracle(a) - d.structural.at("a0")(a)).cwiseAbs().maxCoeff() <= 1e-9);
  }
}

TEST_CASE("strategic construction is rejected for its two-dimensional target") {
  CHECK_THROWS_AS(build_orthogonal_loss(strategic_base_spec()), ConfigError);
}

TEST_CASE("constant mixed derivative gives a constant representer") {
  const Distribution dist = symmetric_outcomes();
  BaseLossSpec spec = bilinear_spec(1.0);
  // c * zeta * gamma with no outcome factor: mixed derivative is c everywhere.
  spec.base.value = [](const VecRef& zeta, const VecRef& g, const Sample&) { return 1.5 * zeta[0] * g[0]; };
  const auto th = FunctionHandle::constant(View::X, Vec::Constant(1, 0.3));
  const auto g = FunctionHandle::constant(View::W, Vec::Constant(1, -0.2));
  const FunctionHandle a = riesz_oracle(spec, dist, th, g);
  for (const auto& z : dist.atoms()) CHECK(std::abs(a.scalar(z) - 1.5) <= 1e-6);
}

TEST_CASE("symmetric outcomes with an odd integrand give a zero representer") {
  const Distribution dist = symmetric_outcomes();
  const BaseLossSpec spec = bilinear_spec(2.0);
  const auto th = FunctionHandle::constant(View::X, Vec::Constant(1, 0.7));
  const auto g = FunctionHandle::constant(View::W, Vec::Constant(1, 0.4));
  const FunctionHandle a = riesz_oracle(spec, dist, th, g);
  for (const auto& z : dist.atoms()) CHECK(std::abs(a.scalar(z)) <= 1e-6);
}

TEST_CASE("four-fold split of eight samples") {
  const SplitPlan p = split(8, 4, 3);
  assert_partition(p);
  for (auto sz : p.sizes()) CHECK(sz == 2);
}

TEST_CASE("four-fold fit with oracle plug-ins reduces to corrected-loss ERM on S4") {
  const DgpSpec d = make_dgp("cate_enum");
  const BaseLossSpec spec = aipw_base_spec();
  const auto& made = d.setup("aipw_constructed");
  const FunctionHandle g_po = d.setup("plugoutcome_naive").g0;
  const FunctionHandle a0 = riesz_oracle(spec, d.dist, made.theta_star, g_po);
  const auto data = d.dist.draw_n(11, 400);
  LearnerConfig erm;
  erm.learner_id = "erm";
  FourFoldLearners L;
  L.nuisance = oracle_nuisance(g_po);
  L.initial = make_target_learner(erm, made.cls);
  L.final_stage = L.initial;
  L.riesz = [&](const FunctionHandle&, const FunctionHandle&, std::span<const Sample>) { return a0; };
  const FourFoldResult r = four_fold_fit(spec, data, L, 5);
  assert_partition(r.plan);
  const auto s4 = gather(data, r.plan.folds[3]);
  const FittedModel direct = plugin_erm(made.loss, FunctionHandle::stack({g_po, a0}), s4, made.cls);
  CHECK((r.theta.as_linear()->weights - direct.handle.as_linear()->weights).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("four-fold fit with learned plug-ins stays within twice the known-representer fit") {
  const DgpSpec d = make_dgp("cate_enum");
  const BaseLossSpec spec = aipw_base_spec();
  const auto& made = d.setup("aipw_constructed");
  const FunctionHandle g_po = d.setup("plugoutcome_naive").g0;
  LearnerConfig reg;
  reg.learner_id = "ridge";
  reg.features = FeatureMap::one_hot(d.w_keys);
  reg.lambda_reg = 1e-6;
  LearnerConfig erm;
  erm.learner_id = "erm";
  const NuisanceLearner nuis = make_first_stage(d, "plugoutcome_naive", reg);
  const FunctionHandle a0 = riesz_oracle(spec, d.dist, made.theta_star, g_po);

  std::vector<double> full, oracle;
  for (int rep = 0; rep < 100; ++rep) {
    const auto data = d.dist.draw_n(Rng(7, "construct_rep", rep).next_u64(), 2000);
    FourFoldLearners L;
    L.nuisance = nuis;
    L.initial = make_target_learner(erm, made.cls);
    L.final_stage = L.initial;
    L.riesz = [&](const FunctionHandle& th, const FunctionHandle& g, std::span<const Sample> s3) {
      return riesz_regress(spec, th, g, s3, reg);
    };
    const FourFoldResult r = four_fold_fit(spec, data, L, rep);
    full.push_back(dgp_excess_risk(d, "aipw_constructed", r.theta));

    // Same folds and learners with the true representer in place of the S3 estimate.
    L.riesz = [&](const FunctionHandle&, const FunctionHandle&, std::span<const Sample>) { return a0; };
    const FourFoldResult two = four_fold_fit(spec, data, L, rep);
    oracle.push_back(dgp_excess_risk(d, "aipw_constructed", two.theta));
  }
  const double mf = quantile(full, 0.5), mo = quantile(oracle, 0.5);
  CAPTURE(mf);
  CAPTURE(mo);
  CHECK(mf <= 2.0 * mo);
}

TEST_CASE("riesz modes parse and reject unknown names") {
  CHECK(parse_riesz_mode("oracle") == RieszMode::Oracle);
  CHECK(parse_riesz_mode("formula") == RieszMode::Formula);
  CHECK(parse_riesz_mode("regress") == RieszMode::Regress);
  CHECK_THROWS_AS(parse_riesz_mode("guess"), ConfigError);
}
