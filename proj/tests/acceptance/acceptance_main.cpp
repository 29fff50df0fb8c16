// Acceptance gate: one PASS/FAIL line per criterion. Exit 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "osl/construct.hpp"
#include "osl/dgp.hpp"
#include "osl/diffcheck.hpp"
#include "osl/experiments.hpp"
#include "osl/learners.hpp"
#include "osl/metaalgo.hpp"
#include "osl/rng.hpp"

using namespace osl;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

int failures = 0;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void report(int id, bool pass, const std::string& what, const std::string& detail, double seconds) {
  if (!pass) ++failures;
  std::printf("criterion %2d: %s  %s | %s | %.1f s\n", id, pass ? "PASS" : "FAIL", what.c_str(), detail.c_str(),
              seconds);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

LearnerConfig learner(const std::string& id) {
  LearnerConfig c;
  c.learner_id = id;
  return c;
}

// ---------------------------------------------------------------------------

void criterion_1() {
  const auto t0 = Clock::now();
  struct Case {
    std::string dgp, loss;
  };
  const std::vector<Case> orthogonal{{"cate_enum", "robinson"},          {"policy_binary_enum", "dr_policy_binary"},
                                     {"policy_multi_enum", "dr_policy_multi"}, {"missing_enum", "missing_data"},
                                     {"covshift_enum", "domain_adapt"},  {"cate_enum", "aipw_constructed"}};
  const std::vector<Case> naive{{"cate_enum", "plugoutcome_naive"}, {"policy_binary_enum", "ips_naive"}};
  CheckOptions o;
  o.n_dirs = 20;
  bool ok = true;
  std::ostringstream detail;
  double worst = 0.0;
  for (const auto& c : orthogonal) {
    const DgpSpec d = make_dgp(c.dgp);
    const auto& s = d.setup(c.loss);
    const CheckTarget t{d.dist, s.theta_star, s.g0, s.check_members};
    CheckOptions oo = o;
    const OrthoReport r = check_orthogonality(s.loss, t, oo);
    ok = ok && r.verdict == Verdict::Pass && r.max_abs <= 1e-6;
    worst = std::max(worst, r.max_abs);
    if (s.loss.claims_universal_orthogonality) {
      oo.universal = true;
      const OrthoReport u = check_orthogonality(s.loss, t, oo);
      ok = ok && u.verdict == Verdict::Pass && u.max_abs <= 1e-6;
      worst = std::max(worst, u.max_abs);
    }
  }
  detail << "max orthogonal " << fmt("%.2e", worst);
  for (const auto& c : naive) {
    const DgpSpec d = make_dgp(c.dgp);
    const auto& s = d.setup(c.loss);
    const OrthoReport r = check_orthogonality(s.loss, {d.dist, s.theta_star, s.g0, s.check_members}, o);
    ok = ok && r.verdict == Verdict::Fail && r.max_abs >= 0.01;
    detail << ", " << c.loss << " " << fmt("%.3g", r.max_abs);
  }
  const double secs = since(t0);
  detail << ", budget 30 s";
  report(1, ok && secs <= 30.0, "orthogonality certification", detail.str(), secs);
}

SweepReport eps_sweep(const std::string& dgp, const std::string& loss) {
  const DgpSpec d = make_dgp(dgp);
  const auto& s = d.setup(loss);
  EpsSweepConfig c;
  c.eps_grid = {0.05, 0.1, 0.2, 0.4};
  c.reps = 200;
  c.n = 4000;
  c.seed = 1;
  return rate_sweep_eps(d, loss, make_target_learner(learner("erm"), s.cls), c);
}

void slope_line(int id, const std::string& what, const SweepReport& r, double lo, double hi, double secs,
                double budget) {
  const bool in = r.has_slope && r.slope >= lo && r.slope <= hi;
  std::ostringstream detail;
  detail << "slope " << fmt("%.3f", r.slope) << " in [" << lo << ", " << hi << "]";
  if (budget > 0) detail << ", budget " << budget << " s";
  report(id, in && (budget <= 0 || secs <= budget), what, detail.str(), secs);
}

void criterion_2_3_4() {
  auto t0 = Clock::now();
  const SweepReport rob = eps_sweep("cate_enum", "robinson");
  slope_line(2, "fast-rate robustness (robinson eps sweep)", rob, 3.3, 4.7, since(t0), 180);

  t0 = Clock::now();
  const SweepReport dr = eps_sweep("policy_binary_enum", "dr_policy_binary");
  slope_line(3, "slow-rate robustness (dr_policy_binary eps sweep)", dr, 1.6, 2.4, since(t0), 180);

  t0 = Clock::now();
  const SweepReport po = eps_sweep("cate_enum", "plugoutcome_naive");
  slope_line(4, "non-orthogonal contrast (plugoutcome_naive eps sweep)", po, 0.8, 1.6, since(t0), 0);
}

void criterion_5() {
  const auto t0 = Clock::now();
  const DgpSpec d = make_dgp("missing_enum");
  const LossSetup& s = d.setup("missing_data");
  Rng rng(5, "acceptance_missing");
  double worst = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    Mat w(2, 1);
    w << rng.uniform(-1, 1), rng.uniform(-1, 1);
    const FunctionHandle th = FunctionHandle::linear(View::X, FeatureMap::intercept(1), w);
    const double lhs = population_risk(s.loss, th, s.g0, d.dist).value;
    double rhs = 0.0;
    const auto& atoms = d.dist.atoms();
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const double r = atoms[i].u[0] - th.scalar(atoms[i]);  // latent outcome
      rhs += d.dist.weights()[i] * r * r;
    }
    worst = std::max(worst, std::abs(lhs - rhs));
  }
  report(5, worst <= 1e-12, "missing-data identity", "max gap " + fmt("%.2e", worst) + " over 10 theta", since(t0));
}

void criterion_6() {
  const auto t0 = Clock::now();
  NSweepConfig c;
  c.n_grid = {250, 500, 1000, 2000};
  c.reps = 200;
  c.seed = 1;

  const DgpSpec reg = make_dgp("regress_enum");
  const auto& sq = reg.setup("square");
  const SweepReport star = rate_sweep_n(
      reg, "square",
      make_two_stage_pipeline(sq.loss, oracle_nuisance(sq.g0), make_target_learner(learner("star_agg"), sq.cls)), c);

  const DgpSpec pol = make_dgp("policy_binary_enum");
  const auto& dr = pol.setup("dr_policy_binary");
  const SweepReport erm = rate_sweep_n(
      pol, "dr_policy_binary",
      make_two_stage_pipeline(dr.loss, oracle_nuisance(dr.g0), make_target_learner(learner("erm"), dr.cls)), c);

  const bool a = star.has_slope && star.slope >= -1.3 && star.slope <= -0.7;
  const bool b = erm.has_slope && erm.slope >= -0.7 && erm.slope <= -0.3;
  std::ostringstream detail;
  detail << "star_agg (" << sq.cls.members.size() << " candidates) slope " << fmt("%.3f", star.slope)
         << " in [-1.3, -0.7]; policy ERM slope " << fmt("%.3f", erm.slope) << " in [-0.7, -0.3]";
  report(6, a && b, "aggregation and slow-rate n sweeps", detail.str(), since(t0));
}

void criterion_7() {
  const auto t0 = Clock::now();
  const DgpSpec d = make_dgp("policy_highvar");
  const auto& s = d.setup("dr_policy_binary");
  const NuisanceLearner nuis = oracle_nuisance(s.g0);
  const TargetLearner erm = make_target_learner(learner("erm"), s.cls);
  ThreeStageConfig tc;  // estimated critical radius, c_pen 36
  int wins = 0;
  std::vector<double> vp, pe;
  const int reps = 200;
  for (int rep = 0; rep < reps; ++rep) {
    const std::uint64_t seed = Rng(7, "acceptance_varpen", static_cast<std::uint64_t>(rep)).next_u64();
    const auto data = d.dist.draw_n(seed, 500);
    const double a = dgp_excess_risk(d, "dr_policy_binary", three_stage_fit(s.loss, nuis, s.cls, tc, data, seed).theta);
    const double b = dgp_excess_risk(d, "dr_policy_binary", two_stage_fit(s.loss, nuis, erm, data, seed).theta);
    if (a <= b) ++wins;
    vp.push_back(a);
    pe.push_back(b);
  }
  const double share = double(wins) / reps, mv = quantile(vp, 0.5), mp = quantile(pe, 0.5);
  std::ostringstream detail;
  detail << "varpen <= erm in " << fmt("%.1f", 100 * share) << "% of reps (need >= 70%), median " << fmt("%.4g", mv)
         << " vs " << fmt("%.4g", mp);
  report(7, share >= 0.7 && mv < mp, "variance penalization on policy_highvar", detail.str(), since(t0));
}

// Expectation over all 2^n sign vectors of max_k scale_k |<sigma, v_k>| / n.
double exhaustive_complexity(const Mat& V, double delta) {
  const Eigen::Index n = V.cols();
  const Vec norms = (V.rowwise().squaredNorm() / double(n)).cwiseSqrt();
  double total = 0.0;
  const std::uint64_t count = std::uint64_t{1} << n;
  for (std::uint64_t p = 0; p < count; ++p) {
    double best = 0.0;
    for (Eigen::Index k = 0; k < V.rows(); ++k) {
      double dot = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) dot += ((p >> i) & 1 ? 1.0 : -1.0) * V(k, i);
      const double scale = norms[k] <= delta ? 1.0 : delta / norms[k];
      best = std::max(best, scale * std::abs(dot) / double(n));
    }
    total += best;
  }
  return total / double(count);
}

double exhaustive_critical_radius(const Mat& V, double R) {
  double lo = 0.0, hi = 1.0;
  while (exhaustive_complexity(V, hi) > hi * hi / R) hi *= 2.0;
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (exhaustive_complexity(V, mid) <= mid * mid / R) hi = mid;
    else lo = mid;
  }
  return hi;
}

std::vector<Sample> points(const Mat& X, const Vec& y) {
  std::vector<Sample> out;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Sample s;
    s.id = i;
    s.w = X.row(i).transpose();
    s.x_slice = Slice{0, X.cols()};
    s.y = y[i];
    s.t = Vec::Zero(1);
    out.push_back(s);
  }
  return out;
}

void criterion_8() {
  const auto t0 = Clock::now();
  Rng rng(8, "acceptance_learners");

  double ridge_res = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    Mat X(50, 4);
    Vec y(50);
    for (Eigen::Index i = 0; i < 50; ++i) {
      for (int j = 0; j < 4; ++j) X(i, j) = rng.normal();
      y[i] = rng.normal();
    }
    const auto data = points(X, y);
    const double lam = rng.uniform(0.0, 2.0);
    const FittedModel f = fit_ridge(data, Mat(y), lam, FeatureMap::intercept(4));
    const Mat P = design_matrix(data, FeatureMap::intercept(4), View::W);
    const Vec w = f.handle.as_linear()->weights.col(0);
    const Mat A = P.transpose() * P + lam * Mat::Identity(P.cols(), P.cols());
    ridge_res = std::max(ridge_res, (A * w - P.transpose() * y).norm());
  }

  double kkt = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    Mat X(60, 10);
    for (Eigen::Index i = 0; i < 60; ++i) {
      for (int j = 0; j < 10; ++j) X(i, j) = rng.normal();
    }
    Vec beta = Vec::Zero(10);
    beta[1] = 2.0;
    beta[6] = -1.5;
    const Vec y = X * beta + 0.3 * Vec::NullaryExpr(60, [&] { return rng.normal(); });
    const auto data = points(X, y);
    LassoOptions o;
    o.lambda_1 = 0.1;
    const FittedModel f = fit_lasso(data, Mat(y), o, FeatureMap::intercept(10));
    const Mat P = design_matrix(data, FeatureMap::intercept(10), View::W);
    std::vector<bool> pen(11, true);
    pen[0] = false;
    kkt = std::max(kkt, lasso_kkt_residual(P, y, f.handle.as_linear()->weights.col(0), 0.1, pen));
  }

  bool limits = true;
  {
    Mat X(25, 2);
    Vec y(25);
    for (Eigen::Index i = 0; i < 25; ++i) {
      X(i, 0) = rng.normal();
      X(i, 1) = rng.normal();
      y[i] = rng.normal();
    }
    const auto data = points(X, y);
    const FittedModel k1 = fit_knn(data, Mat(y), 1);
    const FittedModel kn = fit_knn(data, Mat(y), 25);
    const FittedModel narrow = fit_kernel(data, Mat(y), 1e-4);
    const FittedModel wide = fit_kernel(data, Mat(y), 1e6);
    for (const auto& s : data) {
      limits = limits && k1.handle.scalar(s) == s.y;
      limits = limits && std::abs(kn.handle.scalar(s) - y.mean()) <= 1e-14;
      limits = limits && std::abs(narrow.handle.scalar(s) - s.y) <= 1e-12;
      limits = limits && std::abs(wide.handle.scalar(s) - y.mean()) <= 1e-6;
    }
  }

  Mat W(5, 12);
  for (Eigen::Index k = 0; k < 5; ++k) {
    for (Eigen::Index i = 0; i < 12; ++i) W(k, i) = rng.uniform(-1, 1) * (k + 1) / 5.0;
  }
  const double rad_gap = std::abs(critical_radius(W, 2.0, 4096, 1) - exhaustive_critical_radius(W, 2.0));

  std::ostringstream detail;
  detail << "ridge " << fmt("%.1e", ridge_res) << ", lasso KKT " << fmt("%.1e", kkt) << ", knn/kernel limits "
         << (limits ? "exact" : "off") << ", critical radius gap " << fmt("%.1e", rad_gap);
  report(8, ridge_res <= 1e-10 && kkt <= 1e-6 && limits && rad_gap <= 1e-3, "learner unit suite", detail.str(),
         since(t0));
}

void criterion_9() {
  const auto t0 = Clock::now();
  const BaseLossSpec spec = aipw_base_spec();
  const LossModel l = build_orthogonal_loss(spec);
  Rng rng(9, "acceptance_aipw");
  double form = 0.0;
  for (int i = 0; i < 100; ++i) {
    const double zeta = rng.uniform(-2, 2), f0 = rng.uniform(-1, 1), f1 = rng.uniform(-1, 1);
    const double e = rng.uniform(0.1, 0.9), y = rng.uniform(-2, 2);
    const int t = rng.uniform() < 0.5 ? 0 : 1;
    const double beta = f1 - f0 + t * (y - f1) / e - (1 - t) * (y - f0) / (1 - e);
    const double expected = (zeta - beta) * (zeta - beta);
    Sample z;
    z.w = Vec::Zero(1);
    z.x_slice = Slice{0, 1};
    z.y = y;
    z.t = Vec::Constant(1, t);
    Vec g(4);
    g << f0, f1, 1.0 / (1.0 - e), -1.0 / e;
    form = std::max(form, std::abs(l(Vec::Constant(1, zeta), g, z) - expected) / std::max(1.0, expected));
  }

  const DgpSpec d = make_dgp("cate_enum");
  const auto& made = d.setup("aipw_constructed");
  const CheckTarget target{d.dist, made.theta_star, made.g0, made.check_members};
  CheckOptions o;
  o.n_dirs = 20;
  bool cert = check_orthogonality(made.loss, target, o).verdict == Verdict::Pass;
  o.universal = true;
  cert = cert && check_orthogonality(made.loss, target, o).verdict == Verdict::Pass;

  // Four-fold runs with learned plug-ins; four_fold_fit asserts disjointness itself, and it is rechecked here.
  LearnerConfig reg = learner("ridge");
  reg.features = FeatureMap::one_hot(d.w_keys);
  reg.lambda_reg = 1e-6;
  FourFoldLearners L;
  L.nuisance = make_first_stage(d, "plugoutcome_naive", reg);
  L.initial = make_target_learner(learner("erm"), made.cls);
  L.final_stage = L.initial;
  L.riesz = [&](const FunctionHandle& th, const FunctionHandle& g, std::span<const Sample> s3) {
    return riesz_regress(spec, th, g, s3, reg);
  };
  bool disjoint = true;
  for (int rep = 0; rep < 20; ++rep) {
    const auto data = d.dist.draw_n(Rng(9, "acceptance_fourfold", rep).next_u64(), 400);
    try {
      const FourFoldResult r = four_fold_fit(spec, data, L, rep);
      assert_partition(r.plan);
      disjoint = disjoint && r.plan.folds.size() == 4;
    } catch (const Error&) {
      disjoint = false;
    }
  }

  std::ostringstream detail;
  detail << "form gap " << fmt("%.1e", form) << ", certification " << (cert ? "pass" : "fail")
         << ", four-fold partitions " << (disjoint ? "disjoint" : "broken");
  report(9, form <= 1e-12 && cert && disjoint, "construction pipeline", detail.str(), since(t0));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void criterion_10() {
  const auto t0 = Clock::now();
  const char* bin = std::getenv("OSL_BIN");
  if (bin == nullptr) {
    report(10, false, "determinism", "OSL_BIN is not set", since(t0));
    return;
  }
  const fs::path dir = fs::temp_directory_path() / "osl_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  struct Cmd {
    std::string name, args;
    bool threads, csv;
  };
  const std::vector<Cmd> cmds{
      {"orthocheck", "orthocheck --dgp policy_multi_enum --loss dr_policy_multi --universal", false, false},
      {"construct", "construct --dgp cate_enum --riesz regress --n 800", false, false},
      {"fit", "fit --dgp policy_highvar --loss dr_policy_binary --n 600 --target-learner erm_varpen", false, false},
      {"sweep_eps", "sweep --kind eps --dgp cate_enum --loss robinson --eps-grid 0.05,0.1,0.2 --n 500 --reps 8", true,
       true},
      {"sweep_n",
       "sweep --kind n --dgp regress_enum --loss square --nuisance-learner oracle --target-learner star_agg "
       "--n-grid 100,200,400 --reps 6",
       true, true},
      {"dgp", "dgp --dgp missing_enum --sample 50", false, true},
      {"selftest", "selftest", false, false},
  };
  bool ok = true;
  int compared = 0;
  std::string broken;
  for (const auto& c : cmds) {
    std::vector<std::string> outs;
    for (int run = 0; run < 2; ++run) {
      const std::string tag = c.name + "_" + std::to_string(run);
      std::string cmd = std::string(bin) + " " + c.args + " --seed 13";
      if (c.threads) cmd += run == 0 ? " --threads 1" : " --threads 0";
      cmd += " --out " + (dir / (tag + ".json")).string();
      if (c.csv) cmd += " --csv-out " + (dir / (tag + ".csv")).string();
      cmd += " > /dev/null 2>&1";
      [[maybe_unused]] const int rc = std::system(cmd.c_str());  // exit 1 is a valid verdict here
      std::string blob = slurp(dir / (tag + ".json"));
      if (c.csv) blob += "\n--csv--\n" + slurp(dir / (tag + ".csv"));
      outs.push_back(blob);
    }
    if (outs[0].empty() || outs[0] != outs[1]) {
      ok = false;
      broken += " " + c.name;
    }
    ++compared;
  }
  std::ostringstream detail;
  detail << compared << " subcommand runs compared byte-for-byte, threads 1 vs 0 on sweeps";
  if (!ok) detail << "; differing or empty:" << broken;
  report(10, ok, "determinism", detail.str(), since(t0));
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  const std::vector<std::function<void()>> steps{criterion_1, criterion_2_3_4, criterion_5, criterion_6,
                                                 criterion_7, criterion_8,     criterion_9, criterion_10};
  for (const auto& step : steps) {
    try {
      step();
    } catch (const std::exception& e) {
      ++failures;
      std::printf("error: %s\n", e.what());
    }
  }
  std::printf("%d criterion check(s) failed; total %.1f s\n", failures, since(t0));
  return failures == 0 ? 0 : 1;
}
