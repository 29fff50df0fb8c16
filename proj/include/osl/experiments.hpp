#pragma once

// Rate experiments: excess risk against the injected nuisance error or the
// sample size, with per-replication rows and a fitted log-log slope.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "osl/dgp.hpp"
#include "osl/metaalgo.hpp"

namespace osl {

struct SweepRow {
  double grid_value = 0.0;
  int rep = 0;
  double excess_risk = 0.0;
  double floor = 0.0;
  std::uint64_t seed = 0;
};

struct SweepPoint {
  double grid_value = 0.0;
  double median = 0.0;
  double q10 = 0.0, q25 = 0.0, q75 = 0.0, q90 = 0.0;
  double adjusted = 0.0;  // median - floor
  bool used = false;      // entered the slope fit
  double median_l2 = 0.0;
  double median_lambda = 0.0;  // Lambda-weighted distance; 0 when the loss has no index weight
};

struct SweepReport {
  std::string kind;  // eps | n
  std::string loss_id;
  std::string dgp_id;
  std::string learner_id;
  std::size_t n = 0;  // second-stage size (eps sweeps)
  int reps = 0;
  std::uint64_t seed = 0;
  double floor = 0.0;
  std::vector<SweepPoint> points;
  std::vector<SweepRow> rows;
  bool has_slope = false;
  double slope = 0.0;
  double slope_stderr = 0.0;
  // ok | inconclusive, or pass | fail once an expected interval is set.
  std::string verdict = "inconclusive";
  bool has_expected = false;
  double expected_lo = 0.0, expected_hi = 0.0;
};

struct SlopeFit {
  bool ok = false;
  double slope = 0.0;
  double intercept = 0.0;
  double stderr_ = 0.0;
  int used = 0;
};

// Unweighted least squares of log(y) on log(x) over the points with y > 0.
SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

// Type-7 sample quantile.
double quantile(std::vector<double> values, double q);

struct EpsSweepConfig {
  std::vector<double> eps_grid;
  std::size_t n = 1000;
  int reps = 50;
  std::uint64_t seed = 0;
  int threads = 1;
  bool aligned = true;  // see InjectOptions
  bool distances = true;
};

// Plugs g0 + eps h into the target learner on fresh second-stage data and
// scores the fit exactly at g0. The same data and direction are reused across
// the grid within a replication; the floor is the median at eps = 0.
SweepReport rate_sweep_eps(const DgpSpec& dgp, const std::string& loss_id, const TargetLearner& learner,
                           const EpsSweepConfig& config);

// End-to-end fit on n samples, seeded per (n, rep).
using Pipeline = std::function<FunctionHandle(std::span<const Sample> data, std::uint64_t seed)>;

struct NSweepConfig {
  std::vector<std::size_t> n_grid;
  int reps = 50;
  std::uint64_t seed = 0;
  int threads = 1;
  bool distances = false;
};

SweepReport rate_sweep_n(const DgpSpec& dgp, const std::string& loss_id, const Pipeline& pipeline,
                         const NSweepConfig& config);

// Two-stage pipeline with the given first stage and target learner.
Pipeline make_two_stage_pipeline(const LossModel& loss, NuisanceLearner nuisance, TargetLearner target,
                                 PipelineOptions options = {});

struct OracleGap {
  std::size_t n = 0;
  int reps = 0;
  double median_full = 0.0;
  double median_oracle = 0.0;
  double ratio = 0.0;  // median_full / median_oracle
  std::vector<double> full;
  std::vector<double> oracle;
};

// Runs both pipelines on the same data and seeds.
OracleGap oracle_gap(const DgpSpec& dgp, const std::string& loss_id, const Pipeline& full, const Pipeline& oracle,
                     std::size_t n, int reps, std::uint64_t seed, int threads = 1);

// Exact (enumerated) or Monte-Carlo (sampler, fixed seed) excess risk at g0
// against the stored theta*.
double dgp_excess_risk(const DgpSpec& dgp, const std::string& loss_id, const FunctionHandle& theta);

// Sets verdict to pass or fail against [lo, hi].
void apply_expected(SweepReport& report, double lo, double hi);

}  // namespace osl
