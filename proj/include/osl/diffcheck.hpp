#pragma once

// Finite-difference directional derivatives of risk functionals and the
// orthogonality / first-order / curvature diagnostics built on them.

#include <functional>
#include <string>
#include <vector>

#include "osl/core.hpp"
#include "osl/rng.hpp"

namespace osl {

struct FdResult {
  double value = 0.0;
  double error_estimate = 0.0;  // |Richardson value - finer central difference|
  int richardson_levels = 1;
};

using RiskFunctional = std::function<double(const FunctionHandle& theta, const FunctionHandle& g)>;

struct DerivativeRequest {
  RiskFunctional functional;
  FunctionHandle theta_bar;
  FunctionHandle g_bar;
  FunctionHandle theta_dir;  // ignored when theta_order == 0
  FunctionHandle g_dir;      // ignored when g_order == 0
  int theta_order = 0;       // 0, 1 or 2
  int g_order = 0;           // 0, 1 or 2
  double step = 0.0;         // 0 selects eps^(1/(2+order)) * max(1, scale)
  double scale = 1.0;
};

// Step used when none is given: eps^(1/(2+total order)) * max(1, scale).
double default_fd_step(int total_order, double scale = 1.0);

// Mixed central difference of F(t, s) at (0, 0) with one Richardson level.
FdResult stencil_derivative(const std::function<double(double t, double s)>& F, int order_t, int order_s,
                            double step_t, double step_s);

FdResult dir_derivative(const DerivativeRequest& req);

// Tabular direction with i.i.d. uniform[-1, 1] values per key, scaled to unit
// L2 norm under the key masses.
FunctionHandle random_direction(std::shared_ptr<const KeyTable> keys, int out_dim, Rng& rng);

// Population problem the certificates are evaluated on.
struct CheckTarget {
  Distribution dist;  // must be Enumerated
  FunctionHandle theta_star;
  FunctionHandle g0;
  // Members of the target class; used as first-order directions theta - theta*.
  std::vector<FunctionHandle> class_members;
};

enum class Verdict { Pass, Fail, Inconclusive };
const char* verdict_name(Verdict v);

struct OrthoReport {
  std::string loss_id;
  std::string assumption;  // orthogonality | universal_orthogonality | first_order
  std::vector<double> values;
  std::vector<double> error_estimates;
  double max_abs = 0.0;
  double tolerance = 0.0;
  Verdict verdict = Verdict::Inconclusive;
  int richardson_levels = 1;
  int n_dirs = 0;
  std::uint64_t seed = 0;
  double functional_scale = 0.0;
};

struct CheckOptions {
  int n_dirs = 20;
  bool universal = false;
  std::uint64_t seed = 0;
  double tolerance = 0.0;  // 0 selects 1e-6 * max(1, |L(theta*, g0)|)
  double step = 0.0;
};

OrthoReport check_orthogonality(const LossModel& loss, const CheckTarget& target, const CheckOptions& options);
// One-sided: D_theta L(theta*, g0)[theta - theta*] >= -tolerance.
OrthoReport check_first_order(const LossModel& loss, const CheckTarget& target, const CheckOptions& options);

struct Curvature {
  double lambda_hat = 0.0;
  double beta1_hat = 0.0;
  int used = 0;
  int skipped = 0;  // zero-norm directions
};

// Min / max of D^2_theta L(theta*, g0)[h, h] / ||h||^2 over random directions.
Curvature estimate_curvature(const LossModel& loss, const CheckTarget& target, int n_dirs, std::uint64_t seed,
                             NormKind norm = NormKind::L2);

}  // namespace osl
