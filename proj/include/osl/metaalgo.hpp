#pragma once

// Sample-splitting pipelines: two-stage plug-in estimation and the three-way
// split used by variance-penalized ERM.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "osl/learners.hpp"

namespace osl {

struct SplitPlan {
  std::size_t n_total = 0;
  std::vector<std::vector<std::size_t>> folds;  // sorted indices
  std::uint64_t seed = 0;
  bool shuffled = true;

  std::vector<std::size_t> sizes() const;
};

// Fold sizes differ by at most one; the remainder goes to the last folds. The
// unshuffled two-way split puts the first floor(n/2) indices in fold 0.
SplitPlan split(std::size_t n, int k_folds, std::uint64_t seed, bool shuffled = true);

// Throws Error unless the folds are pairwise disjoint and cover [0, n).
void assert_partition(const SplitPlan& plan);
// Throws Error if a sample index is used by both training sets.
void assert_no_leakage(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b, const std::string& what);

std::vector<Sample> gather(std::span<const Sample> data, const std::vector<std::size_t>& indices);

struct PipelineOptions {
  bool shuffled = true;
  // Average of the two swapped-fold fits. Not part of the single-split analysis.
  bool crossfit = false;
};

struct FitResult {
  FunctionHandle theta;
  FunctionHandle g_hat;
  Diagnostics target_diagnostics;
  VarPenDiagnostics varpen;  // three-stage only
  double delta_n = 0.0;      // three-stage only
  SplitPlan plan;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

FitResult two_stage_fit(const LossModel& loss, const NuisanceLearner& nuisance, const TargetLearner& target,
                        std::span<const Sample> data, std::uint64_t seed, const PipelineOptions& options = {});

struct ThreeStageConfig {
  VarPenConfig varpen;           // delta_n < 0 estimates the critical radius on S2
  std::size_t n_mc = 2000;       // Rademacher draws for the estimate
  double eps_net = 0.1;          // grid scale when the class is Linear
};

// g on S1, the penalized fit on S2, mu_hat on S3.
FitResult three_stage_fit(const LossModel& loss, const NuisanceLearner& nuisance, const ThetaClass& cls,
                          const ThreeStageConfig& config, std::span<const Sample> data, std::uint64_t seed,
                          const PipelineOptions& options = {});

// Runs fn and rethrows any library error with `tag` prefixed, keeping its type.
template <typename Fn>
auto with_stage(const std::string& tag, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(tag + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError(tag + ": " + e.what());
  } catch (const DomainError& e) {
    throw DomainError(tag + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(tag + ": " + e.what());
  } catch (const Error& e) {
    throw Error(tag + ": " + e.what());
  }
}

}  // namespace osl
