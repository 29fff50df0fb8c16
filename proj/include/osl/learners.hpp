#pragma once

// First-stage regressors, second-stage estimators and aggregation.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "osl/core.hpp"

namespace osl {

struct Diagnostics {
  std::vector<double> objective_trace;
  std::vector<int> active_set;
  double kkt_residual = 0.0;
  int iterations = 0;
  bool converged = true;
  std::vector<std::string> warnings;
  std::optional<std::size_t> selected_index;  // Finite classes
  double objective = 0.0;
};

struct FittedModel {
  FunctionHandle handle;
  Diagnostics diagnostics;
};

// Design matrix of a feature map over a data set, one row per sample.
Mat design_matrix(std::span<const Sample> data, const FeatureMap& features, View view);

// ---------------------------------------------------------------------------
// Regression learners. Targets hold one column per output.

// Minimizes ||Phi W - Y||^2 + lambda ||W||^2 (all coordinates penalized).
FittedModel fit_ridge(std::span<const Sample> data, const Mat& targets, double lambda_reg, const FeatureMap& features,
                      View view = View::W);

struct LassoOptions {
  double lambda_1 = 0.0;
  int max_iters = 10000;
  double tol = 1e-10;
  bool penalize_intercept = false;  // first feature of Intercept maps
};

// Minimizes (1/2n) ||Phi w - y||^2 + lambda_1 ||w||_1 by cyclic coordinate descent.
FittedModel fit_lasso(std::span<const Sample> data, const Mat& targets, const LassoOptions& options,
                      const FeatureMap& features, View view = View::W);

// Mean of the k nearest targets in Euclidean distance; ties by lower index.
FittedModel fit_knn(std::span<const Sample> data, const Mat& targets, int k, View view = View::W);

// Gaussian-kernel weighted mean, normalizer floored at 1e-12.
FittedModel fit_kernel(std::span<const Sample> data, const Mat& targets, double bandwidth, View view = View::W);

// Subgradient optimality residual of the lasso objective at w.
double lasso_kkt_residual(const Mat& design, const Vec& y, const Vec& w, double lambda_1,
                          const std::vector<bool>& penalized);

// ---------------------------------------------------------------------------
// Target classes and second-stage estimators.

struct ThetaClass {
  enum class Kind { Finite, Linear };
  enum class Constraint { None, Box, Ball, Simplex };

  Kind kind = Kind::Linear;
  std::vector<FunctionHandle> members;  // Finite

  View view = View::X;  // Linear
  FeatureMap features;
  int out_dim = 1;
  Constraint constraint = Constraint::None;
  double lo = 0.0;  // Box, applied to every weight
  double hi = 1.0;
  double radius = 1.0;  // Ball (Frobenius norm of the weights)

  static ThetaClass finite(std::vector<FunctionHandle> members);
  static ThetaClass linear(FeatureMap features, int out_dim = 1, View view = View::X);

  FunctionHandle make(const Mat& weights) const;
  Mat project(const Mat& weights) const;
  int weight_rows() const { return features.dim(); }
};

struct ErmOptions {
  double step = 0.0;  // 0: backtracking from 1
  int max_iters = 2000;
  double tol = 1e-9;
};

FittedModel plugin_erm(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> data,
                       const ThetaClass& cls, const ErmOptions& options = {});

// Same estimator under nonnegative sample weights (normalized internally);
// with the atoms and weights of an enumerated distribution it returns the
// population minimizer over the class.
FittedModel weighted_erm(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> data,
                         std::span<const double> weights, const ThetaClass& cls, const ErmOptions& options = {});

struct VarPenConfig {
  double delta_n = -1.0;  // < 0 is rejected; use estimate_critical_radius to choose one
  double R = 0.0;         // 0: empirical max |loss| on S2, at least 1
  double c_pen = 36.0;
  ErmOptions erm;
};

struct VarPenDiagnostics {
  double mu_hat = 0.0;
  double R_used = 0.0;
  double penalty_weight = 0.0;
};

FittedModel variance_penalized_erm(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> s2,
                                   std::span<const Sample> s3, const ThetaClass& cls, const VarPenConfig& config,
                                   VarPenDiagnostics* info = nullptr);

// Empirical penalized objective used by variance_penalized_erm.
double variance_penalized_objective(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g_hat,
                                    std::span<const Sample> s2, double mu_hat, double weight);

// ---------------------------------------------------------------------------
// Aggregation.

struct StarResult {
  FunctionHandle handle;
  std::size_t first = 0;   // empirical risk minimizer on the first half
  std::size_t second = 0;  // partner on the second half
  double t = 1.0;          // weight of `first`
};

// Per-sample loss of a scalar prediction.
using PointLoss = std::function<double(std::size_t sample, double prediction)>;

// Two-step star algorithm with the square loss against `targets`.
StarResult star_aggregate(const std::vector<FunctionHandle>& candidates, std::span<const Sample> data,
                          const Vec& targets);
// Same algorithm for a general loss with plug-in nuisance.
StarResult star_aggregate(const std::vector<FunctionHandle>& candidates, const LossModel& loss,
                          const FunctionHandle& g_hat, std::span<const Sample> data);

// Greedy farthest-point cover at scale eps in the empirical L2 metric of
// the rows of `predictions` (one row per function, one column per sample).
std::vector<std::size_t> greedy_cover(const Mat& predictions, double eps);

struct SkeletonOptions {
  double eps_net = 0.1;
  std::size_t net_cap = 100000;
};

struct SkeletonResult {
  StarResult star;
  std::vector<FunctionHandle> net;
  std::vector<std::size_t> net_indices;  // into the (gridded) class
};

// Grid of a one-output Linear box class at spacing eps (every weight in [lo, hi]).
std::vector<FunctionHandle> grid_class(const ThetaClass& cls, double eps, std::size_t cap);

SkeletonResult skeleton_aggregate(const ThetaClass& cls, const LossModel& loss, const FunctionHandle& g_hat,
                                  std::span<const Sample> data, const SkeletonOptions& options);

// ---------------------------------------------------------------------------
// Localized Rademacher complexity and critical radius.

// E_sigma sup over the star hull of {f_k - f*} within empirical radius delta
// of |(1/n) sum sigma_i h(z_i)|, estimated with n_mc sign draws.
double localized_rademacher(const Mat& offsets, double delta, std::size_t n_mc, std::uint64_t seed);

// offsets: one row per class member, f_k(z_i) - f*(z_i) in the columns.
double critical_radius(const Mat& offsets, double R, std::size_t n_mc, std::uint64_t seed);

double estimate_critical_radius(const std::vector<FunctionHandle>& members, const FunctionHandle& center,
                                std::span<const Sample> data, double R, std::size_t n_mc, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Config-driven learner factories used by pipelines and the CLI.

struct LearnerConfig {
  std::string learner_id = "ridge";  // ridge lasso knn kernel erm erm_varpen star_agg skeleton_agg oracle
  double lambda_reg = 1e-6;
  double lambda_1 = 1e-3;
  int max_iters = 10000;
  double tol = 1e-10;
  int k = 10;
  double bandwidth = 0.3;
  FeatureMap features = FeatureMap::intercept(1);
  View view = View::W;
  ErmOptions erm;
  double eps_net = 0.1;
  double delta_n = -1.0;  // erm_varpen: < 0 estimates the critical radius
  double R = 0.0;
  double c_pen = 36.0;
  std::size_t n_mc = 2000;
};

// Maps a data set to the regression targets of each nuisance component.
using TargetExtractor = std::function<Mat(std::span<const Sample>)>;
using NuisanceLearner = std::function<FunctionHandle(std::span<const Sample>)>;
using TargetLearner =
    std::function<FittedModel(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> data)>;

FittedModel fit_regression(const LearnerConfig& cfg, std::span<const Sample> data, const Mat& targets);
NuisanceLearner make_nuisance_learner(const LearnerConfig& cfg, TargetExtractor targets);
NuisanceLearner oracle_nuisance(FunctionHandle g0);
// erm, star_agg, skeleton_agg. erm_varpen needs a third fold and is wired by
// the three-stage pipeline.
TargetLearner make_target_learner(const LearnerConfig& cfg, ThetaClass cls);

}  // namespace osl
