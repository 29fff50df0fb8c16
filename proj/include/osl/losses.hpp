#pragma once

// Catalog of pointwise losses. Nuisance layouts (gamma coordinates):
//   robinson            (m, e)
//   dr_policy_binary    (f0, f1, e)          f_t = E[Y | T = t, X]
//   dr_policy_multi(N)  (f_0..f_{N-1}, p_0..p_{N-1})
//   domain_adapt        (f)                  density ratio p_t / p_s
//   missing_data        (h, e)
//   ips_naive           (f0, f1, e)          f ignored
//   plugoutcome_naive   (f0, f1)
//   square              ()                   (zeta - y)^2
//   strategic           (g)                  logistic entry game, target (psi, Delta)

#include <atomic>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "osl/core.hpp"

namespace osl {

// Phi(s, gamma, z) = scale * (psi(s) - Gamma(gamma, z) * s + offset(gamma, z)),
// s = <Lambda(gamma, z), zeta>, psi' = phi.
struct SingleIndexLoss {
  std::string id;
  int target_dim = 1;
  int nuisance_dim = 0;
  std::vector<std::string> nuisance_components;
  std::function<Vec(const VecRef& gamma, const Sample& z)> lambda;
  std::function<double(const VecRef& gamma, const Sample& z)> gamma_fn;
  std::function<double(double)> phi;
  std::function<double(double)> psi;
  std::function<double(const VecRef& gamma, const Sample& z)> offset;  // optional
  double scale = 1.0;
  double tau = 0.0;  // lower bound on phi'
  double T = 0.0;    // upper bound on phi'

  double index(const VecRef& zeta, const VecRef& gamma, const Sample& z) const;
  double value(const VecRef& zeta, const VecRef& gamma, const Sample& z) const;
  // d Phi / d s, i.e. phi(s) - Gamma (before scaling).
  double index_derivative(double s, const VecRef& gamma, const Sample& z) const;
};

LossModel make_single_index_loss(const SingleIndexLoss& spec, Regime regime = Regime::Fast);

LossModel robinson_loss();
// The Robinson loss written as a single-index loss with Lambda = T - e,
// Gamma = Y - m, phi = identity, scale 2.
SingleIndexLoss robinson_single_index();
LossModel dr_policy_loss_binary(double clip_eta = 0.01);
LossModel dr_policy_loss_multi(int n_treatments, double clip_eta = 0.01);
LossModel domain_adaptation_loss(double clip_eta = 0.01);
LossModel missing_data_loss(double clip_eta = 0.01);
LossModel ips_naive_loss(double clip_eta = 0.01);
LossModel plugoutcome_naive_loss();
LossModel square_loss();
SingleIndexLoss strategic_single_index();
LossModel strategic_loss();

// { ips_naive, plugoutcome_naive }
std::vector<LossModel> naive_baseline_losses(double clip_eta = 0.01);

// Doubly robust scores. The binary score is
//   f1 - f0 + T (Y - f1) / e - (1 - T) (Y - f0) / (1 - e),
// with e clipped to [clip_eta, 1 - clip_eta].
double dr_binary_score(double f0, double f1, double e, double t, double y, double clip_eta);
// Per-arm scores f_t + 1{T = t} (Y - f_t) / p_t.
Vec dr_multi_scores(const VecRef& f, const VecRef& p, int arm, double y, double clip_eta);

// Rejects a policy output that is not in the probability simplex (1e-9 slack).
void check_simplex(const VecRef& zeta);

struct LossOptions {
  double clip_eta = 0.01;
  int n_treatments = 3;
};

// Catalog lookup by id: robinson, dr_policy_binary, dr_policy_multi,
// domain_adapt, missing_data, ips_naive, plugoutcome_naive, square, strategic.
// Constructed losses live in the construct module.
LossModel make_loss(std::string_view id, const LossOptions& options = {});
std::vector<std::string> catalog_loss_ids();

// Number of loss evaluations at which a propensity was clipped, process-wide.
std::uint64_t clip_event_count();
void reset_clip_events();

}  // namespace osl
