#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "osl/dgp.hpp"
#include "osl/experiments.hpp"
#include "osl/metaalgo.hpp"
#include "osl/rng.hpp"

using namespace osl;

namespace {

LearnerConfig erm_config() {
  LearnerConfig c;
  c.learner_id = "erm";
  return c;
}

}  // namespace

TEST_CASE("split: sizes, determinism and the unshuffled layout") {
  const SplitPlan a = split(6, 3, 9);
  for (auto sz : a.sizes()) CHECK(sz == 2);
  const SplitPlan b = split(6, 3, 9);
  CHECK(a.folds == b.folds);
  const SplitPlan u = split(7, 2, 0, false);
  CHECK(u.folds[0] == std::vector<std::size_t>{0, 1, 2});
  CHECK(u.folds[1].size() == 4);
  CHECK_THROWS_AS(split(3, 4, 0), ConfigError);
  CHECK_THROWS_AS(split(4, 1, 0), ConfigError);
}

TEST_CASE("split: every plan is a balanced partition") {
  Rng rng(1, "split_property");
  for (int rep = 0; rep < 200; ++rep) {
    const int k = 2 + static_cast<int>(rng.below(4));
    const std::size_t n = k + rng.below(300);
    const SplitPlan p = split(n, k, rng.next_u64(), rng.uniform() < 0.8);
    assert_partition(p);
    const auto sz = p.sizes();
    CHECK(*std::max_element(sz.begin(), sz.end()) - *std::min_element(sz.begin(), sz.end()) <= 1);
    std::set<std::size_t> all;
    for (const auto& f : p.folds) {
      CHECK(std::is_sorted(f.begin(), f.end()));
      all.insert(f.begin(), f.end());
    }
    CHECK(all.size() == n);
  }
}

TEST_CASE("leakage and partition guards throw") {
  CHECK_THROWS_AS(assert_no_leakage({1, 2, 3}, {3, 4}, "test"), Error);
  SplitPlan p;
  p.n_total = 4;
  p.folds = {{0, 1}, {1, 2, 3}};
  CHECK_THROWS_AS(assert_partition(p), Error);
  p.folds = {{0, 1}, {3}};
  CHECK_THROWS_AS(assert_partition(p), Error);
}

TEST_CASE("two-stage fit with the oracle first stage is the second-stage fit on S2") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  const auto data = d.dist.draw_n(3, 500);
  const FitResult r = two_stage_fit(s.loss, oracle_nuisance(s.g0), make_target_learner(erm_config(), s.cls), data, 4);
  const auto s2 = gather(data, r.plan.folds[1]);
  const FittedModel direct = plugin_erm(s.loss, s.g0, s2, s.cls);
  CHECK((r.theta.as_linear()->weights - direct.handle.as_linear()->weights).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("two-stage fit on two samples runs") {
  const DgpSpec d = make_dgp("policy_binary_enum");
  const auto& s = d.setup("dr_policy_binary");
  const auto data = d.dist.draw_n(3, 2);
  const FitResult r = two_stage_fit(s.loss, oracle_nuisance(s.g0), make_target_learner(erm_config(), s.cls), data, 4);
  for (const auto& a : d.dist.atoms()) CHECK(std::isfinite(r.theta.scalar(a)));
}

TEST_CASE("crossfit averages the two swapped fits") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  const auto data = d.dist.draw_n(5, 300);
  PipelineOptions o;
  o.crossfit = true;
  const auto target = make_target_learner(erm_config(), s.cls);
  const FitResult r = two_stage_fit(s.loss, oracle_nuisance(s.g0), target, data, 4, o);
  const FitResult single = two_stage_fit(s.loss, oracle_nuisance(s.g0), target, data, 4);
  const auto s1 = gather(data, r.plan.folds[0]);
  const FittedModel swapped = plugin_erm(s.loss, s.g0, s1, s.cls);
  for (const auto& a : d.dist.atoms()) {
    CHECK(r.theta.scalar(a) ==
          doctest::Approx(0.5 * single.theta.scalar(a) + 0.5 * swapped.handle.scalar(a)).epsilon(1e-12));
  }
  CHECK(!r.warnings.empty());
}

TEST_CASE("three-stage fit with zero radius equals plug-in ERM on S2") {
  const DgpSpec d = make_dgp("policy_highvar");
  const auto& s = d.setup("dr_policy_binary");
  const auto data = d.dist.draw_n(6, 300);
  ThreeStageConfig c;
  c.varpen.delta_n = 0.0;
  const FitResult r = three_stage_fit(s.loss, oracle_nuisance(s.g0), s.cls, c, data, 2);
  const auto s2 = gather(data, r.plan.folds[1]);
  const FittedModel direct = plugin_erm(s.loss, s.g0, s2, s.cls);
  CHECK(*r.target_diagnostics.selected_index == *direct.diagnostics.selected_index);
}

TEST_CASE("three-stage fit on three samples runs") {
  const DgpSpec d = make_dgp("policy_highvar");
  const auto& s = d.setup("dr_policy_binary");
  const auto data = d.dist.draw_n(6, 3);
  const FitResult r = three_stage_fit(s.loss, oracle_nuisance(s.g0), s.cls, ThreeStageConfig{}, data, 2);
  CHECK(r.theta.valid());
  CHECK(r.delta_n >= 0.0);
}

TEST_CASE("three-stage regret never exceeds the worst member's regret") {
  const DgpSpec d = make_dgp("policy_highvar");
  const auto& s = d.setup("dr_policy_binary");
  double worst = 0.0;
  for (const auto& m : s.cls.members) worst = std::max(worst, dgp_excess_risk(d, "dr_policy_binary", m));
  for (int rep = 0; rep < 20; ++rep) {
    const auto data = d.dist.draw_n(Rng(3, "regret", rep).next_u64(), 150);
    const FitResult r = three_stage_fit(s.loss, oracle_nuisance(s.g0), s.cls, ThreeStageConfig{}, data, rep);
    CHECK(dgp_excess_risk(d, "dr_policy_binary", r.theta) <= worst);
  }
}

TEST_CASE("kernel first stage stays within three times the oracle pipeline") {
  const DgpSpec d = make_dgp("cate_enum");
  const auto& s = d.setup("robinson");
  LearnerConfig k;
  k.learner_id = "kernel";
  k.bandwidth = 0.1;
  const auto target = make_target_learner(erm_config(), s.cls);
  const Pipeline full = make_two_stage_pipeline(s.loss, make_first_stage(d, "robinson", k), target);
  const Pipeline oracle = make_two_stage_pipeline(s.loss, oracle_nuisance(s.g0), target);
  const OracleGap g = oracle_gap(d, "robinson", full, oracle, 4000, 100, 11);
  CAPTURE(g.median_full);
  CAPTURE(g.median_oracle);
  CHECK(g.ratio <= 3.0);
}

TEST_CASE("stage errors keep their type and gain a tag") {
  try {
    with_stage("stage 9", []() -> int { throw NumericError("boom"); });
    FAIL("no throw");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()) == "stage 9: boom");
  }
}
