#include "osl/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "osl/parallel.hpp"
#include "osl/rng.hpp"

namespace osl {

double quantile(std::vector<double> values, double q) {
  if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 0.0 && std::isfinite(y[i])) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  SlopeFit fit;
  fit.used = static_cast<int>(lx.size());
  if (lx.size() < 2) return fit;
  const double m = static_cast<double>(lx.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= m;
  my /= m;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (sxx <= 0.0) return fit;
  fit.ok = true;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (lx.size() > 2) {
    double rss = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      const double r = ly[i] - fit.intercept - fit.slope * lx[i];
      rss += r * r;
    }
    fit.stderr_ = std::sqrt(rss / (m - 2.0) / sxx);
  }
  return fit;
}

double dgp_excess_risk(const DgpSpec& dgp, const std::string& loss_id, const FunctionHandle& theta) {
  const LossSetup& s = dgp.setup(loss_id);
  const std::uint64_t mc_seed = mix64(dgp.seed ^ hash_stream_name("excess_risk"));
  return excess_risk(s.loss, theta, s.g0, dgp.dist, Benchmark{s.theta_star},
                     dgp.mc_draws ? dgp.mc_draws : kDefaultMcDraws, mc_seed)
      .value;
}

void apply_expected(SweepReport& report, double lo, double hi) {
  report.has_expected = true;
  report.expected_lo = lo;
  report.expected_hi = hi;
  if (!report.has_slope) {
    report.verdict = "inconclusive";
    return;
  }
  report.verdict = (report.slope >= lo && report.slope <= hi) ? "pass" : "fail";
}

namespace {

struct Cell {
  double excess = 0.0;
  double l2 = 0.0;
  double lambda = 0.0;
};

void summarize(SweepReport& report, const std::vector<double>& grid, const std::vector<std::vector<Cell>>& cells,
               double floor, const std::vector<std::uint64_t>& seeds) {
  report.floor = floor;
  std::vector<double> xs, ys;
  for (std::size_t j = 0; j < grid.size(); ++j) {
    std::vector<double> ex, l2, lam;
    for (std::size_t r = 0; r < cells.size(); ++r) {
      const Cell& c = cells[r][j];
      ex.push_back(c.excess);
      l2.push_back(c.l2);
      lam.push_back(c.lambda);
      report.rows.push_back({grid[j], static_cast<int>(r), c.excess, floor, seeds[r * grid.size() + j]});
    }
    SweepPoint p;
    p.grid_value = grid[j];
    p.median = quantile(ex, 0.5);
    p.q10 = quantile(ex, 0.1);
    p.q25 = quantile(ex, 0.25);
    p.q75 = quantile(ex, 0.75);
    p.q90 = quantile(ex, 0.9);
    p.adjusted = p.median - floor;
    p.median_l2 = quantile(l2, 0.5);
    p.median_lambda = quantile(lam, 0.5);
    p.used = grid[j] > 0.0 && p.adjusted > 0.0;
    report.points.push_back(p);
    xs.push_back(grid[j]);
    ys.push_back(p.used ? p.adjusted : 0.0);
  }
  const SlopeFit fit = fit_loglog(xs, ys);
  report.has_slope = fit.ok;
  report.slope = fit.slope;
  report.slope_stderr = fit.stderr_;
  report.verdict = fit.ok ? "ok" : "inconclusive";
}

Cell score(const DgpSpec& dgp, const std::string& loss_id, const FunctionHandle& theta, bool distances) {
  Cell c;
  c.excess = dgp_excess_risk(dgp, loss_id, theta);
  if (distances) {
    const LossSetup& s = dgp.setup(loss_id);
    const std::uint64_t mc_seed = mix64(dgp.seed ^ hash_stream_name("distance"));
    const std::size_t mc = dgp.mc_draws ? dgp.mc_draws : kDefaultMcDraws;
    c.l2 = distance(theta, s.theta_star, dgp.dist, NormKind::L2, nullptr, nullptr, mc, mc_seed);
    if (s.loss.index_weight) {
      c.lambda = distance(theta, s.theta_star, dgp.dist, NormKind::LambdaWeighted, &s.loss, &s.g0, mc, mc_seed);
    }
  }
  return c;
}

}  // namespace

SweepReport rate_sweep_eps(const DgpSpec& dgp, const std::string& loss_id, const TargetLearner& learner,
                           const EpsSweepConfig& cfg) {
  if (!dgp.enumerated()) throw ConfigError("eps sweeps need an enumerated dgp ('" + dgp.id + "' is a sampler)");
  if (cfg.eps_grid.size() < 3) throw ConfigError("eps_grid needs >= 3 points");
  for (double e : cfg.eps_grid) {
    if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("eps_grid values must be finite and >= 0");
  }
  if (cfg.reps < 1) throw ConfigError("reps must be >= 1");
  if (cfg.n < 2) throw ConfigError("second-stage n must be >= 2");
  const LossSetup& setup = dgp.setup(loss_id);

  // Grid plus eps = 0 for the floor.
  std::vector<double> grid = cfg.eps_grid;
  const bool has_zero = std::find(grid.begin(), grid.end(), 0.0) != grid.end();
  std::vector<double> evals = grid;
  if (!has_zero) evals.push_back(0.0);

  InjectOptions inj;
  inj.aligned = cfg.aligned;
  inj.probability_slots = setup.probability_slots;
  inj.clip_eta = setup.loss.clip_eta;
  const std::uint64_t dir_seed = mix64(cfg.seed ^ hash_stream_name("direction"));
  std::vector<FunctionHandle> g_eps;
  for (double e : evals) g_eps.push_back(inject_nuisance_error(setup.g0, e, dir_seed, inj));

  const auto reps = static_cast<std::size_t>(cfg.reps);
  std::vector<std::vector<Cell>> cells(reps, std::vector<Cell>(evals.size()));
  std::vector<std::uint64_t> rep_seeds(reps);
  for (std::size_t r = 0; r < reps; ++r) rep_seeds[r] = Rng(cfg.seed, "sweep_rep", r).next_u64();

  parallel_for(reps, cfg.threads, [&](std::size_t r) {
    const auto data = dgp.dist.draw_n(rep_seeds[r], cfg.n);
    for (std::size_t j = 0; j < evals.size(); ++j) {
      const FittedModel fit = learner(setup.loss, g_eps[j], data);
      cells[r][j] = score(dgp, loss_id, fit.handle, cfg.distances);
    }
  });

  std::vector<double> zero;
  const std::size_t zero_index = has_zero ? static_cast<std::size_t>(std::find(evals.begin(), evals.end(), 0.0) -
                                                                     evals.begin())
                                          : evals.size() - 1;
  for (std::size_t r = 0; r < reps; ++r) zero.push_back(cells[r][zero_index].excess);
  const double floor = quantile(zero, 0.5);

  std::vector<std::vector<Cell>> grid_cells(reps);
  std::vector<std::uint64_t> seeds;
  for (std::size_t r = 0; r < reps; ++r) {
    grid_cells[r].assign(cells[r].begin(), cells[r].begin() + static_cast<std::ptrdiff_t>(grid.size()));
    for (std::size_t j = 0; j < grid.size(); ++j) seeds.push_back(rep_seeds[r]);
  }
  SweepReport report;
  report.kind = "eps";
  report.loss_id = loss_id;
  report.dgp_id = dgp.id;
  report.n = cfg.n;
  report.reps = cfg.reps;
  report.seed = cfg.seed;
  summarize(report, grid, grid_cells, floor, seeds);
  return report;
}

SweepReport rate_sweep_n(const DgpSpec& dgp, const std::string& loss_id, const Pipeline& pipeline,
                         const NSweepConfig& cfg) {
  if (cfg.n_grid.size() < 3) throw ConfigError("n_grid needs >= 3 points");
  for (std::size_t i = 0; i < cfg.n_grid.size(); ++i) {
    if (cfg.n_grid[i] < 4) throw ConfigError("n_grid values must be >= 4");
    if (i > 0 && cfg.n_grid[i] <= cfg.n_grid[i - 1]) throw ConfigError("n_grid must be strictly increasing");
  }
  if (cfg.reps < 1) throw ConfigError("reps must be >= 1");
  dgp.setup(loss_id);

  const auto reps = static_cast<std::size_t>(cfg.reps);
  const std::size_t m = cfg.n_grid.size();
  std::vector<std::vector<Cell>> cells(reps, std::vector<Cell>(m));
  std::vector<std::uint64_t> seeds(reps * m);
  for (std::size_t r = 0; r < reps; ++r) {
    for (std::size_t j = 0; j < m; ++j) seeds[r * m + j] = Rng(cfg.seed, "sweep_n", r).derive("n", cfg.n_grid[j]).next_u64();
  }
  parallel_for(reps * m, cfg.threads, [&](std::size_t k) {
    const std::size_t r = k / m, j = k % m;
    const auto data = dgp.dist.draw_n(seeds[k], cfg.n_grid[j]);
    const FunctionHandle theta = pipeline(data, mix64(seeds[k] ^ hash_stream_name("pipeline")));
    cells[r][j] = score(dgp, loss_id, theta, cfg.distances);
  });

  std::vector<double> grid(cfg.n_grid.begin(), cfg.n_grid.end());
  SweepReport report;
  report.kind = "n";
  report.loss_id = loss_id;
  report.dgp_id = dgp.id;
  report.reps = cfg.reps;
  report.seed = cfg.seed;
  summarize(report, grid, cells, 0.0, seeds);
  return report;
}

Pipeline make_two_stage_pipeline(const LossModel& loss, NuisanceLearner nuisance, TargetLearner target,
                                 PipelineOptions options) {
  return [=](std::span<const Sample> data, std::uint64_t seed) {
    return two_stage_fit(loss, nuisance, target, data, seed, options).theta;
  };
}

OracleGap oracle_gap(const DgpSpec& dgp, const std::string& loss_id, const Pipeline& full, const Pipeline& oracle,
                     std::size_t n, int reps, std::uint64_t seed, int threads) {
  if (reps < 1) throw ConfigError("reps must be >= 1");
  if (n < 4) throw ConfigError("n must be >= 4");
  dgp.setup(loss_id);
  OracleGap gap;
  gap.n = n;
  gap.reps = reps;
  gap.full.resize(static_cast<std::size_t>(reps));
  gap.oracle.resize(static_cast<std::size_t>(reps));
  parallel_for(static_cast<std::size_t>(reps), threads, [&](std::size_t r) {
    const std::uint64_t s = Rng(seed, "oracle_gap", r).derive("n", n).next_u64();
    const auto data = dgp.dist.draw_n(s, n);
    const std::uint64_t ps = mix64(s ^ hash_stream_name("pipeline"));
    gap.full[r] = dgp_excess_risk(dgp, loss_id, full(data, ps));
    gap.oracle[r] = dgp_excess_risk(dgp, loss_id, oracle(data, ps));
  });
  gap.median_full = quantile(gap.full, 0.5);
  gap.median_oracle = quantile(gap.oracle, 0.5);
  gap.ratio = gap.median_oracle > 0.0 ? gap.median_full / gap.median_oracle
                                      : (gap.median_full == gap.median_oracle ? 1.0
                                                                              : std::numeric_limits<double>::infinity());
  return gap;
}

}  // namespace osl
