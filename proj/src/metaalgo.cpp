#include "osl/metaalgo.hpp"

#include <algorithm>
#include <numeric>

#include "osl/rng.hpp"

namespace osl {

std::vector<std::size_t> SplitPlan::sizes() const {
  std::vector<std::size_t> out;
  for (const auto& f : folds) out.push_back(f.size());
  return out;
}

SplitPlan split(std::size_t n, int k_folds, std::uint64_t seed, bool shuffled) {
  if (k_folds < 2) throw ConfigError("split needs at least 2 folds");
  const auto k = static_cast<std::size_t>(k_folds);
  if (n < k) {
    throw ConfigError("cannot split " + std::to_string(n) + " samples into " + std::to_string(k) + " folds");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffled) {
    Rng rng(seed, "split");
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  SplitPlan plan;
  plan.n_total = n;
  plan.seed = seed;
  plan.shuffled = shuffled;
  const std::size_t base = n / k;
  const std::size_t extra = n % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = base + (f >= k - extra ? 1 : 0);
    std::vector<std::size_t> fold(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                  order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(fold.begin(), fold.end());
    plan.folds.push_back(std::move(fold));
    pos += size;
  }
  assert_partition(plan);
  return plan;
}

void assert_partition(const SplitPlan& plan) {
  std::vector<char> seen(plan.n_total, 0);
  std::size_t count = 0;
  for (const auto& f : plan.folds) {
    for (std::size_t i : f) {
      if (i >= plan.n_total || seen[i]) throw Error("split plan is not a partition (index " + std::to_string(i) + ")");
      seen[i] = 1;
      ++count;
    }
  }
  if (count != plan.n_total) throw Error("split plan does not cover every sample");
}

void assert_no_leakage(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b, const std::string& what) {
  std::vector<std::size_t> sa(a), sb(b), common;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  if (!common.empty()) {
    throw Error("fold leakage in " + what + ": sample " + std::to_string(common.front()) + " used by both stages");
  }
}

std::vector<Sample> gather(std::span<const Sample> data, const std::vector<std::size_t>& indices) {
  std::vector<Sample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data[i]);
  return out;
}

namespace {

struct StageOutput {
  FunctionHandle g;
  FittedModel fit;
};

StageOutput run_two(const LossModel& loss, const NuisanceLearner& nuisance, const TargetLearner& target,
                    std::span<const Sample> data, const std::vector<std::size_t>& first,
                    const std::vector<std::size_t>& second) {
  assert_no_leakage(first, second, "two-stage fit");
  const auto s1 = gather(data, first);
  const auto s2 = gather(data, second);
  StageOutput out;
  out.g = with_stage("stage 1 (nuisance, S1)", [&] { return nuisance(s1); });
  out.fit = with_stage("stage 2 (target, S2)", [&] {
    check_arity(loss, FunctionHandle::constant(View::W, Vec::Zero(loss.target_dim)), out.g);
    return target(loss, out.g, s2);
  });
  return out;
}

}  // namespace

FitResult two_stage_fit(const LossModel& loss, const NuisanceLearner& nuisance, const TargetLearner& target,
                        std::span<const Sample> data, std::uint64_t seed, const PipelineOptions& options) {
  FitResult res;
  res.seed = seed;
  res.plan = split(data.size(), 2, seed, options.shuffled);
  const auto& f = res.plan.folds;
  StageOutput a = run_two(loss, nuisance, target, data, f[0], f[1]);
  res.g_hat = a.g;
  res.target_diagnostics = a.fit.diagnostics;
  if (!options.crossfit) {
    res.theta = a.fit.handle;
  } else {
    StageOutput b = run_two(loss, nuisance, target, data, f[1], f[0]);
    res.theta = FunctionHandle::sum({{0.5, a.fit.handle}, {0.5, b.fit.handle}});
    res.warnings.push_back("crossfit averages two swapped single-split fits");
  }
  for (const auto& w : res.target_diagnostics.warnings) res.warnings.push_back(w);
  return res;
}

FitResult three_stage_fit(const LossModel& loss, const NuisanceLearner& nuisance, const ThetaClass& cls,
                          const ThreeStageConfig& config, std::span<const Sample> data, std::uint64_t seed,
                          const PipelineOptions& options) {
  FitResult res;
  res.seed = seed;
  res.plan = split(data.size(), 3, seed, options.shuffled);
  const auto& f = res.plan.folds;
  assert_no_leakage(f[0], f[1], "three-stage fit (S1/S2)");
  assert_no_leakage(f[0], f[2], "three-stage fit (S1/S3)");
  assert_no_leakage(f[1], f[2], "three-stage fit (S2/S3)");
  const auto s1 = gather(data, f[0]);
  const auto s2 = gather(data, f[1]);
  const auto s3 = gather(data, f[2]);
  res.g_hat = with_stage("stage 1 (nuisance, S1)", [&] { return nuisance(s1); });

  VarPenConfig vp = config.varpen;
  if (vp.delta_n < 0.0) {
    vp.delta_n = with_stage("critical radius (S2)", [&] {
      std::vector<FunctionHandle> members;
      if (cls.kind == ThetaClass::Kind::Finite) {
        members = cls.members;
      } else {
        members = grid_class(cls, config.eps_net, SkeletonOptions{}.net_cap);
      }
      // Center at the plug-in minimizer on S3, which S2 has not seen.
      const FunctionHandle center = plugin_erm(loss, res.g_hat, s3, cls, vp.erm).handle;
      return estimate_critical_radius(members, center, s2, std::max(1.0, vp.R), config.n_mc,
                                      mix64(seed ^ hash_stream_name("critical_radius")));
    });
  }
  res.delta_n = vp.delta_n;
  FittedModel fit = with_stage("stage 2 (variance-penalized, S2/S3)", [&] {
    return variance_penalized_erm(loss, res.g_hat, s2, s3, cls, vp, &res.varpen);
  });
  res.theta = fit.handle;
  res.target_diagnostics = fit.diagnostics;
  for (const auto& w : fit.diagnostics.warnings) res.warnings.push_back(w);
  return res;
}

}  // namespace osl
