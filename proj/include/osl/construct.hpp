#pragma once

// Orthogonal losses from non-orthogonal local losses through a Riesz
// correction term, and the four-fold estimation pipeline that goes with it.

#include <functional>
#include <string>
#include <vector>

#include "osl/learners.hpp"
#include "osl/metaalgo.hpp"

namespace osl {

enum class RieszMode { Oracle, Formula, Regress };
RieszMode parse_riesz_mode(const std::string& name);

struct BaseLossSpec {
  std::string id = "constructed";
  LossModel base;  // depends on g only through gamma = g(w)
  View nuisance_view = View::W;

  // First-stage regression target, E[u | w] = g0(w). Required.
  std::function<Vec(const Sample&)> u;
  // When set, u is scalar and targets the gamma component selected per sample
  // (e.g. the outcome regression of the received treatment); the representer
  // then has one component per gamma component.
  std::function<int(const Sample&)> selector;
  // When set, base(zeta, gamma; z) = (zeta - residual(gamma, z))^2 and the
  // corrected loss is returned in completed-square form with the representer
  // of the half-gradient zeta - residual.
  std::function<double(const VecRef& gamma, const Sample& z)> residual;

  // Optional closed form a(theta(x), gamma; w).
  std::function<Vec(const VecRef& zeta, const VecRef& gamma, const Sample& z)> formula;
  RieszMode mode = RieszMode::Oracle;
};

// Treatment-effect base: (zeta - g(1, w) + g(0, w))^2 with u = y and the
// received treatment as selector.
BaseLossSpec aipw_base_spec();
// Strategic entry game with u the opponent's entry decision and the closed
// form a = Delta L'(psi + Delta g) (1, g).
BaseLossSpec strategic_base_spec();

// l(zeta, g; z) + <a, u - g(w)> zeta over gamma~ = (g, a); completed-square
// form when the base description declares a residual. K2 must be 1.
LossModel build_orthogonal_loss(const BaseLossSpec& spec);

// Number of representer coordinates: K1 with a selector or a residual-free
// scalar target, K2 * K1 otherwise (row-major in zeta).
int riesz_dim(const BaseLossSpec& spec);

// Exact a0(w) = E[grad_gamma grad_zeta l(theta0(x), g0(w); z) | w] by
// enumeration, divided by P(selector = k | w) per component when a selector
// is set. Tabular over the nuisance-view keys.
FunctionHandle riesz_oracle(const BaseLossSpec& spec, const Distribution& dist, const FunctionHandle& theta0,
                            const FunctionHandle& g0);
// Closed form evaluated at (theta(x), g(w)).
FunctionHandle riesz_formula(const BaseLossSpec& spec, const FunctionHandle& theta, const FunctionHandle& g);
// Regresses the pointwise targets grad_gamma grad_zeta l(theta_init(x), g_hat(w); z)
// on w. With a selector the per-component targets and the selector
// indicators are regressed separately and divided, the probability floored
// at the base loss's clip_eta.
FunctionHandle riesz_regress(const BaseLossSpec& spec, const FunctionHandle& theta_init, const FunctionHandle& g_hat,
                             std::span<const Sample> data, const LearnerConfig& learner);

// Pointwise targets used by riesz_regress, one row per sample.
Mat riesz_targets(const BaseLossSpec& spec, const FunctionHandle& theta, const FunctionHandle& g,
                  std::span<const Sample> data);

using RieszLearner = std::function<FunctionHandle(const FunctionHandle& theta_init, const FunctionHandle& g_hat,
                                                  std::span<const Sample> data)>;

struct FourFoldLearners {
  NuisanceLearner nuisance;   // g_hat on S1
  TargetLearner initial;      // base-loss ERM on S2
  RieszLearner riesz;         // a_hat on S3
  TargetLearner final_stage;  // corrected-loss ERM on S4
};

struct FourFoldResult {
  FunctionHandle theta;
  FunctionHandle theta_init;
  FunctionHandle g_hat;
  FunctionHandle a_hat;
  SplitPlan plan;
  Diagnostics diagnostics;
};

FourFoldResult four_fold_fit(const BaseLossSpec& spec, std::span<const Sample> data, const FourFoldLearners& learners,
                             std::uint64_t seed, bool shuffled = true);

}  // namespace osl
