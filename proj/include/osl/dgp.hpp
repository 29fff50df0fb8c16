#pragma once

// Synthetic data-generating processes with known nuisances and targets.
//
// Every family stores, per compatible loss, the true nuisance bundle, the
// declared target class and the population minimizer over that class.
// Enumerated families are exact: expectations are finite sums over atoms.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "osl/core.hpp"
#include "osl/learners.hpp"
#include "osl/losses.hpp"

namespace osl {

using DgpParams = std::map<std::string, double>;

struct LossSetup {
  LossModel loss;
  FunctionHandle g0;
  ThetaClass cls;
  FunctionHandle theta_star;
  // Class members used as first-order directions by the certificates.
  std::vector<FunctionHandle> check_members;
  // Nuisance coordinates that are probabilities; error injection keeps them
  // inside [clip_eta, 1 - clip_eta].
  std::vector<int> probability_slots;
};

struct DgpSpec {
  std::string id;
  Distribution dist;
  DgpParams params;
  std::uint64_t seed = 0;
  std::shared_ptr<const KeyTable> x_keys;  // enumerated families only
  std::shared_ptr<const KeyTable> w_keys;
  FunctionHandle theta0;
  // Structural functions by name (e0, f0, f1, m0, h0, p0, ...).
  std::map<std::string, FunctionHandle> structural;
  std::map<std::string, LossSetup> setups;
  std::string default_loss;
  // Largest violation of the family's identities, computed at build time.
  double structural_residual = 0.0;
  // Monte-Carlo draws for population quantities of sampler families.
  std::size_t mc_draws = 0;

  bool enumerated() const { return dist.is_enumerated(); }
  const LossSetup& setup(const std::string& loss_id) const;
  std::vector<std::string> loss_ids() const;
};

// cate_enum cate_linear cate_highdim policy_binary_enum policy_highvar
// missing_enum covshift_enum policy_multi_enum strategic_enum regress_enum
std::vector<std::string> dgp_ids();
DgpSpec make_dgp(const std::string& id, const DgpParams& params = {}, std::uint64_t seed = 0);

// Catalog losses plus the constructed ones (aipw_constructed).
LossModel resolve_loss(const std::string& id, const LossOptions& options = {});

// Exact minimizer over the class under the atom weights.
FunctionHandle population_minimizer(const LossModel& loss, const FunctionHandle& g, const Distribution& dist,
                                    const ThetaClass& cls);

struct InjectOptions {
  NormKind norm = NormKind::L2;
  // Aligned: one random sign per nuisance key shared by every component, with
  // fixed unequal component weights. Independent: one sign per (key, component).
  bool aligned = true;
  std::vector<int> probability_slots;
  double clip_eta = 0.01;
};

// g0 + eps * h with |h(w)| = 1 at every w and seeded signs, so h has unit L2
// and L4 norm under any distribution. Probability slots are clipped
// afterwards.
FunctionHandle inject_nuisance_error(const FunctionHandle& g0, double eps, std::uint64_t direction_seed,
                                     const InjectOptions& options = {});

// First-stage learner producing the nuisance bundle of `loss_id` from data.
NuisanceLearner make_first_stage(const DgpSpec& dgp, const std::string& loss_id, const LearnerConfig& cfg);
// Same for data without a DGP (CSV input); x is the sample's x slice.
NuisanceLearner make_first_stage(const std::string& loss_id, const LearnerConfig& cfg, double clip_eta = 0.01);

}  // namespace osl
