#include "osl/cli.hpp"

#include <CLI11.hpp>

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "osl/construct.hpp"
#include "osl/csv_data.hpp"
#include "osl/error.hpp"
#include "osl/report.hpp"
#include "osl/rng.hpp"

namespace osl {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string dashed(std::string s) {
  for (auto& c : s) {
    if (c == '_') c = '-';
  }
  return s;
}

double parse_double(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || errno == ERANGE || !std::isfinite(v)) {
    throw ConfigError(what + ": '" + s + "' is not a finite number");
  }
  return v;
}

std::vector<double> parse_doubles(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item, what));
  return out;
}

std::uint64_t parse_seed(const std::string& s, const std::string& what) {
  const std::string t = trim(s);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos || t.size() > 20) {
    throw ConfigError(what + ": '" + s + "' is not an unsigned 64-bit integer");
  }
  errno = 0;
  const unsigned long long v = std::strtoull(t.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError(what + ": '" + s + "' is out of range");
  return static_cast<std::uint64_t>(v);
}

DgpParams parse_params(const std::string& s) {
  DgpParams p;
  for (const auto& item : split_list(s)) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigError("--param: expected key=value, got '" + item + "'");
    const std::string key = trim(item.substr(0, eq));
    if (p.count(key)) throw ConfigError("--param: '" + key + "' given twice");
    p[key] = parse_double(item.substr(eq + 1), "--param " + key);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Options shared by the subcommands.

struct Options {
  std::string config;
  std::string seed_text;
  std::string out;
  std::string csv_out;
  int threads = 1;
  std::string dgp;
  std::string params;
  std::string loss;
  double clip_eta = 0.01;

  // orthocheck / construct
  int dirs = 20;
  bool universal = false;
  double tol = 0.0;
  std::string base = "aipw";
  std::string riesz = "oracle";

  // fit / sweep
  std::size_t n = 0;
  std::string csv;
  std::string col_y, col_t, col_x, col_w, col_u, col_v;
  std::string nuisance_learner = "ridge";
  double nuisance_lambda = 1e-6;
  double nuisance_lambda1 = 1e-3;
  int nuisance_k = 10;
  double nuisance_bandwidth = 0.3;
  std::string target_learner = "erm";
  double target_c_pen = 36.0;
  double target_delta = -1.0;
  double target_eps_net = 0.1;
  std::string constraint;
  bool crossfit = false;
  bool no_shuffle = false;

  std::string kind;
  std::string eps_grid = "0.05,0.1,0.2,0.4";
  std::string n_grid = "250,500,1000,2000";
  int reps = 50;
  std::string direction = "aligned";
  std::string expect;

  std::size_t sample = 0;
};

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "key = value configuration file");
  sub->add_option("--seed", o.seed_text, "master seed (default: ORTHO_SEED or 0)");
  sub->add_option("--out", o.out, "JSON summary path (default: stdout)");
}

void add_dgp(CLI::App* sub, Options& o, bool required) {
  auto* opt = sub->add_option("--dgp", o.dgp, "data-generating process id");
  if (required) opt->required();
  sub->add_option("--param", o.params, "DGP parameters, k=v[,k=v...]");
}

void add_nuisance(CLI::App* sub, Options& o) {
  sub->add_option("--nuisance-learner", o.nuisance_learner, "oracle ridge lasso knn kernel");
  sub->add_option("--nuisance-lambda", o.nuisance_lambda, "ridge penalty");
  sub->add_option("--nuisance-lambda1", o.nuisance_lambda1, "lasso penalty");
  sub->add_option("--nuisance-k", o.nuisance_k, "neighbors");
  sub->add_option("--nuisance-bandwidth", o.nuisance_bandwidth, "kernel bandwidth");
}

void add_target(CLI::App* sub, Options& o) {
  sub->add_option("--target-learner", o.target_learner, "erm erm_varpen star_agg skeleton_agg");
  sub->add_option("--target-c-pen", o.target_c_pen, "variance penalty constant");
  sub->add_option("--target-delta", o.target_delta, "critical radius (< 0 estimates it)");
  sub->add_option("--target-eps-net", o.target_eps_net, "skeleton net scale");
}

LearnerConfig nuisance_config(const Options& o, int w_dim) {
  LearnerConfig c;
  c.learner_id = o.nuisance_learner;
  c.lambda_reg = o.nuisance_lambda;
  c.lambda_1 = o.nuisance_lambda1;
  c.k = o.nuisance_k;
  c.bandwidth = o.nuisance_bandwidth;
  c.features = FeatureMap::intercept(w_dim);
  c.view = View::W;
  return c;
}

LearnerConfig target_config(const Options& o) {
  LearnerConfig c;
  c.learner_id = o.target_learner;
  c.c_pen = o.target_c_pen;
  c.delta_n = o.target_delta;
  c.eps_net = o.target_eps_net;
  return c;
}

std::uint64_t resolve_seed(const Options& o) {
  if (!o.seed_text.empty()) return parse_seed(o.seed_text, "--seed");
  if (const char* env = std::getenv("ORTHO_SEED")) return parse_seed(env, "ORTHO_SEED");
  return 0;
}

Json theta_json(const FunctionHandle& theta) {
  Json j;
  if (const auto* lin = theta.as_linear()) {
    j["rep"] = "linear";
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < lin->weights.rows(); ++r) {
      Json row = Json::array();
      for (Eigen::Index c = 0; c < lin->weights.cols(); ++c) row.push_back(lin->weights(r, c));
      rows.push_back(std::move(row));
    }
    j["weights"] = std::move(rows);
  } else if (const auto* tab = theta.as_tabular()) {
    j["rep"] = "tabular";
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < tab->values.rows(); ++r) {
      Json row = Json::array();
      for (Eigen::Index c = 0; c < tab->values.cols(); ++c) row.push_back(tab->values(r, c));
      rows.push_back(std::move(row));
    }
    j["values"] = std::move(rows);
  } else {
    j["rep"] = "other";
  }
  return j;
}

// Writes the optional CSV and then the JSON; no file is left behind on error.
void emit(const Options& o, const Json& summary, const std::string* csv, std::ostream& out) {
  const std::string text = dump_json(summary);
  if (csv) {
    if (o.csv_out.empty()) throw ConfigError("--csv-out is required for this output");
    atomic_write(o.csv_out, *csv);
  }
  if (o.out.empty()) {
    out << text;
    return;
  }
  try {
    atomic_write(o.out, text);
  } catch (...) {
    if (csv) {
      std::error_code ec;
      std::filesystem::remove(o.csv_out, ec);
    }
    throw;
  }
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_orthocheck(const Options& o, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(o);
  if (o.loss.empty()) throw ConfigError("--loss is required");
  if (o.dirs < 1) throw ConfigError("--dirs must be >= 1");
  const DgpSpec d = make_dgp(o.dgp, parse_params(o.params), seed);
  if (!d.enumerated()) throw ConfigError("orthocheck needs an enumerated dgp; '" + d.id + "' is a sampler");
  const LossSetup& s = d.setup(o.loss);
  const CheckTarget target{d.dist, s.theta_star, s.g0, s.check_members};
  CheckOptions opt;
  opt.n_dirs = o.dirs;
  opt.seed = seed;
  opt.tolerance = o.tol;

  std::vector<OrthoReport> reports;
  reports.push_back(check_orthogonality(s.loss, target, opt));
  if (o.universal || s.loss.claims_universal_orthogonality) {
    CheckOptions u = opt;
    u.universal = true;
    reports.push_back(check_orthogonality(s.loss, target, u));
  }
  reports.push_back(check_first_order(s.loss, target, opt));

  bool pass = true;
  Json checks = Json::array();
  for (const auto& r : reports) {
    pass = pass && r.verdict == Verdict::Pass;
    checks.push_back(to_json(r));
  }
  Json j;
  j["subcommand"] = "orthocheck";
  j["loss"] = o.loss;
  j["dgp"] = d.id;
  j["seed"] = seed;
  j["dirs"] = o.dirs;
  j["structural_residual"] = d.structural_residual;
  j["checks"] = std::move(checks);
  j["verdict"] = pass ? "pass" : "fail";
  emit(o, j, nullptr, out);
  return pass ? 0 : 1;
}

// Max |constructed - (zeta - beta_DR)^2| over random points.
double aipw_form_gap(const LossModel& loss, int points, std::uint64_t seed) {
  Rng rng(seed, "aipw_form");
  double worst = 0.0;
  for (int i = 0; i < points; ++i) {
    Vec zeta(1), gamma(4);
    zeta[0] = rng.uniform(-2.0, 2.0);
    const double f0 = rng.uniform(-1.0, 1.0), f1 = rng.uniform(-1.0, 1.0), e = rng.uniform(0.1, 0.9);
    gamma << f0, f1, 1.0 / (1.0 - e), -1.0 / e;
    Sample z;
    z.w = Vec::Zero(1);
    z.x_slice = Slice{0, 1};
    z.t = Vec::Constant(1, rng.uniform() < 0.5 ? 0.0 : 1.0);
    z.y = rng.uniform(-2.0, 2.0);
    const double t = z.t[0];
    const double beta = f1 - f0 + t * (z.y - f1) / e - (1.0 - t) * (z.y - f0) / (1.0 - e);
    const double expected = (zeta[0] - beta) * (zeta[0] - beta);
    worst = std::max(worst, std::abs(loss(zeta, gamma, z) - expected) / std::max(1.0, std::abs(expected)));
  }
  return worst;
}

int cmd_construct(const Options& o, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(o);
  BaseLossSpec spec;
  if (o.base == "aipw") {
    spec = aipw_base_spec();
  } else if (o.base == "strategic") {
    spec = strategic_base_spec();
  } else {
    throw ConfigError("unknown --base '" + o.base + "' (aipw, strategic)");
  }
  spec.mode = parse_riesz_mode(o.riesz);
  const LossModel loss = build_orthogonal_loss(spec);
  const std::string dgp_id = o.dgp.empty() ? "cate_enum" : o.dgp;
  const DgpSpec d = make_dgp(dgp_id, parse_params(o.params), seed);
  const LossSetup& s = d.setup(spec.id);

  const CheckTarget target{d.dist, s.theta_star, s.g0, s.check_members};
  CheckOptions opt;
  opt.n_dirs = o.dirs;
  opt.seed = seed;
  opt.tolerance = o.tol;
  const OrthoReport ortho = check_orthogonality(loss, target, opt);
  opt.universal = true;
  const OrthoReport uni = check_orthogonality(loss, target, opt);
  const double gap = aipw_form_gap(loss, 100, seed);
  bool pass = ortho.verdict == Verdict::Pass && (!loss.claims_universal_orthogonality || uni.verdict == Verdict::Pass) &&
              gap <= 1e-12;

  Json j;
  j["subcommand"] = "construct";
  j["base"] = o.base;
  j["loss"] = loss.id;
  j["riesz"] = o.riesz;
  j["dgp"] = d.id;
  j["seed"] = seed;
  j["nuisance_components"] = loss.nuisance_components;
  j["claims_universal"] = loss.claims_universal_orthogonality;
  j["form_max_gap"] = gap;
  j["checks"] = Json::array({to_json(ortho), to_json(uni)});

  if (o.n > 0) {
    const auto data = d.dist.draw_n(mix64(seed ^ hash_stream_name("construct_data")), o.n);
    const int w_dim = static_cast<int>(data.front().w.size());
    const LearnerConfig ncfg = nuisance_config(o, w_dim);
    const ThetaClass& cls = s.cls;
    FourFoldLearners L;
    if (o.nuisance_learner == "oracle") {
      L.nuisance = oracle_nuisance(d.setup("plugoutcome_naive").g0);
    } else {
      L.nuisance = make_first_stage(d, "plugoutcome_naive", ncfg);
    }
    L.initial = make_target_learner(target_config(o), cls);
    L.final_stage = L.initial;
    if (spec.mode == RieszMode::Oracle) {
      L.riesz = [&](const FunctionHandle& th, const FunctionHandle& g, std::span<const Sample>) {
        return riesz_oracle(spec, d.dist, th, g);
      };
    } else if (spec.mode == RieszMode::Formula) {
      L.riesz = [&](const FunctionHandle& th, const FunctionHandle& g, std::span<const Sample>) {
        return riesz_formula(spec, th, g);
      };
    } else {
      L.riesz = [&](const FunctionHandle& th, const FunctionHandle& g, std::span<const Sample> s3) {
        return riesz_regress(spec, th, g, s3, ncfg);
      };
    }
    const FourFoldResult r = four_fold_fit(spec, data, L, seed, !o.no_shuffle);
    Json fit;
    fit["n"] = o.n;
    Json sizes = Json::array();
    for (auto sz : r.plan.sizes()) sizes.push_back(sz);
    fit["fold_sizes"] = std::move(sizes);
    fit["theta"] = theta_json(r.theta);
    fit["theta_init"] = theta_json(r.theta_init);
    fit["excess_risk"] = dgp_excess_risk(d, spec.id, r.theta);
    fit["excess_risk_init"] = dgp_excess_risk(d, spec.id, r.theta_init);
    j["fit"] = std::move(fit);
  }
  j["verdict"] = pass ? "pass" : "fail";
  emit(o, j, nullptr, out);
  return pass ? 0 : 1;
}

ThetaClass csv_class(const std::string& loss_id, const std::vector<Sample>& data, const std::string& constraint) {
  const int nx = static_cast<int>(data.front().x_slice.length);
  const FeatureMap fm = nx > 0 ? FeatureMap::intercept(nx) : FeatureMap::constant();
  int out_dim = 1;
  if (loss_id == "dr_policy_multi") out_dim = static_cast<int>(data.front().t.size());
  if (loss_id == "strategic") out_dim = 2;
  ThetaClass cls = ThetaClass::linear(fm, out_dim, View::X);
  std::string c = constraint;
  if (c.empty()) {
    if (loss_id == "dr_policy_binary" || loss_id == "ips_naive") c = "box";
    else if (loss_id == "dr_policy_multi") c = "simplex";
    else c = "none";
  }
  if (c == "none") {
    cls.constraint = ThetaClass::Constraint::None;
  } else if (c == "box") {
    cls.constraint = ThetaClass::Constraint::Box;
  } else if (c == "ball") {
    cls.constraint = ThetaClass::Constraint::Ball;
  } else if (c == "simplex") {
    cls.constraint = ThetaClass::Constraint::Simplex;
  } else {
    throw ConfigError("unknown --constraint '" + c + "' (none, box, ball, simplex)");
  }
  return cls;
}

int cmd_fit(const Options& o, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(o);
  if (o.loss.empty()) throw ConfigError("--loss is required");
  if (o.dgp.empty() == o.csv.empty()) throw ConfigError("exactly one of --dgp and --csv is required");
  if (o.loss == "aipw_constructed") throw ConfigError("constructed losses are fitted by the construct subcommand");

  std::vector<Sample> data;
  std::optional<DgpSpec> d;
  LossModel loss;
  ThetaClass cls;
  NuisanceLearner nuisance;
  if (!o.dgp.empty()) {
    d = make_dgp(o.dgp, parse_params(o.params), seed);
    const LossSetup& s = d->setup(o.loss);
    if (o.n < 4) throw ConfigError("--n must be >= 4");
    data = d->dist.draw_n(mix64(seed ^ hash_stream_name("fit_data")), o.n);
    loss = s.loss;
    cls = s.cls;
    nuisance = o.nuisance_learner == "oracle"
                   ? oracle_nuisance(s.g0)
                   : make_first_stage(*d, o.loss, nuisance_config(o, static_cast<int>(data.front().w.size())));
  } else {
    ColumnMap m;
    m.y = o.col_y;
    m.t = split_list(o.col_t);
    m.x = split_list(o.col_x);
    m.w = split_list(o.col_w);
    m.u = split_list(o.col_u);
    m.v = split_list(o.col_v);
    data = read_csv_samples(o.csv, m);
    LossOptions lo;
    lo.clip_eta = o.clip_eta;
    if (data.front().t.size() > 1) lo.n_treatments = static_cast<int>(data.front().t.size());
    loss = make_loss(o.loss, lo);
    cls = csv_class(o.loss, data, o.constraint);
    if (o.nuisance_learner == "oracle") throw ConfigError("the oracle first stage needs --dgp");
    nuisance = make_first_stage(o.loss, nuisance_config(o, static_cast<int>(data.front().w.size())), o.clip_eta);
  }

  PipelineOptions popt;
  popt.shuffled = !o.no_shuffle;
  popt.crossfit = o.crossfit;
  FitResult r;
  if (o.target_learner == "erm_varpen") {
    ThreeStageConfig tc;
    tc.varpen.c_pen = o.target_c_pen;
    tc.varpen.delta_n = o.target_delta;
    tc.eps_net = o.target_eps_net;
    r = three_stage_fit(loss, nuisance, cls, tc, data, seed, popt);
  } else {
    r = two_stage_fit(loss, nuisance, make_target_learner(target_config(o), cls), data, seed, popt);
  }

  Json j;
  j["subcommand"] = "fit";
  j["loss"] = loss.id;
  j["source"] = d ? d->id : o.csv;
  j["n"] = data.size();
  j["seed"] = seed;
  j["nuisance_learner"] = o.nuisance_learner;
  j["target_learner"] = o.target_learner;
  Json sizes = Json::array();
  for (auto sz : r.plan.sizes()) sizes.push_back(sz);
  j["fold_sizes"] = std::move(sizes);
  j["theta"] = theta_json(r.theta);
  j["diagnostics"] = to_json(r.target_diagnostics);
  if (o.target_learner == "erm_varpen") {
    j["delta_n"] = r.delta_n;
    j["varpen"] = {{"mu_hat", r.varpen.mu_hat}, {"R", r.varpen.R_used}, {"penalty_weight", r.varpen.penalty_weight}};
  }
  if (d) j["excess_risk"] = dgp_excess_risk(*d, o.loss, r.theta);
  j["empirical_risk"] = empirical_risk(loss, r.theta, r.g_hat, data);
  j["warnings"] = r.warnings;
  emit(o, j, nullptr, out);
  return 0;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(o);
  if (o.kind != "eps" && o.kind != "n") throw ConfigError("--kind must be eps or n");
  if (o.loss.empty()) throw ConfigError("--loss is required");
  if (o.reps < 1) throw ConfigError("--reps must be >= 1");
  if (o.direction != "aligned" && o.direction != "independent") {
    throw ConfigError("--direction must be aligned or independent");
  }
  std::optional<std::pair<double, double>> expected;
  if (!o.expect.empty()) {
    const auto v = parse_doubles(o.expect, "--expect");
    if (v.size() != 2 || v[0] > v[1]) throw ConfigError("--expect needs lo,hi with lo <= hi");
    expected = std::make_pair(v[0], v[1]);
  }
  // Validate grids before building anything.
  std::vector<double> eps;
  std::vector<std::size_t> ns;
  if (o.kind == "eps") {
    eps = parse_doubles(o.eps_grid, "--eps-grid");
    if (eps.size() < 3) throw ConfigError("eps_grid needs >= 3 points");
    if (o.n < 2) throw ConfigError("--n (second-stage size) must be >= 2");
  } else {
    for (double v : parse_doubles(o.n_grid, "--n-grid")) {
      if (v < 4 || v != std::floor(v)) throw ConfigError("--n-grid values must be integers >= 4");
      ns.push_back(static_cast<std::size_t>(v));
    }
    if (ns.size() < 3) throw ConfigError("n_grid needs >= 3 points");
  }
  const DgpSpec d = make_dgp(o.dgp, parse_params(o.params), seed);
  const LossSetup& s = d.setup(o.loss);

  SweepReport r;
  if (o.kind == "eps") {
    if (o.target_learner == "erm_varpen") throw ConfigError("eps sweeps take a two-stage target learner");
    EpsSweepConfig c;
    c.eps_grid = eps;
    c.n = o.n;
    c.reps = o.reps;
    c.seed = seed;
    c.threads = o.threads;
    c.aligned = o.direction == "aligned";
    r = rate_sweep_eps(d, o.loss, make_target_learner(target_config(o), s.cls), c);
  } else {
    NuisanceLearner nuisance;
    if (o.nuisance_learner == "oracle") {
      nuisance = oracle_nuisance(s.g0);
    } else {
      const int w_dim = static_cast<int>(d.dist.draw(seed, 0).w.size());
      nuisance = make_first_stage(d, o.loss, nuisance_config(o, w_dim));
    }
    Pipeline pipe;
    if (o.target_learner == "erm_varpen") {
      ThreeStageConfig tc;
      tc.varpen.c_pen = o.target_c_pen;
      tc.varpen.delta_n = o.target_delta;
      tc.eps_net = o.target_eps_net;
      const LossModel loss = s.loss;
      const ThetaClass cls = s.cls;
      pipe = [=](std::span<const Sample> data, std::uint64_t ps) {
        return three_stage_fit(loss, nuisance, cls, tc, data, ps).theta;
      };
    } else {
      PipelineOptions popt;
      popt.shuffled = !o.no_shuffle;
      popt.crossfit = o.crossfit;
      pipe = make_two_stage_pipeline(s.loss, nuisance, make_target_learner(target_config(o), s.cls), popt);
    }
    NSweepConfig c;
    c.n_grid = ns;
    c.reps = o.reps;
    c.seed = seed;
    c.threads = o.threads;
    r = rate_sweep_n(d, o.loss, pipe, c);
  }
  r.learner_id = o.target_learner;
  if (expected) apply_expected(r, expected->first, expected->second);

  Json j = to_json(r);
  j["subcommand"] = "sweep";
  j["direction"] = o.direction;
  j["nuisance_learner"] = o.kind == "n" ? o.nuisance_learner : "injected";
  const std::string csv = sweep_csv(r);
  if (o.csv_out.empty()) {
    emit(o, j, nullptr, out);
  } else {
    emit(o, j, &csv, out);
  }
  return r.verdict == "fail" ? 1 : 0;
}

int cmd_dgp(const Options& o, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(o);
  const DgpSpec d = make_dgp(o.dgp, parse_params(o.params), seed);
  Json j;
  j["subcommand"] = "dgp";
  j["dgp"] = d.id;
  j["seed"] = seed;
  j["kind"] = d.enumerated() ? "enumerated" : "sampler";
  j["atoms"] = d.enumerated() ? d.dist.atoms().size() : 0;
  Json params;
  for (const auto& [k, v] : d.params) params[k] = v;
  j["params"] = std::move(params);
  j["structural_residual"] = d.structural_residual;
  j["default_loss"] = d.default_loss;
  Json losses;
  for (const auto& id : d.loss_ids()) {
    const LossSetup& s = d.setup(id);
    Json l;
    l["nuisance_dim"] = s.loss.nuisance_dim;
    l["nuisance_components"] = s.loss.nuisance_components;
    l["target_dim"] = s.loss.target_dim;
    l["class"] = s.cls.kind == ThetaClass::Kind::Finite ? "finite" : "linear";
    l["theta_star"] = theta_json(s.theta_star);
    if (d.enumerated()) l["risk_at_theta_star"] = population_risk(s.loss, s.theta_star, s.g0, d.dist).value;
    losses[id] = std::move(l);
  }
  j["losses"] = std::move(losses);

  if (o.sample > 0) {
    const auto data = d.dist.draw_n(mix64(seed ^ hash_stream_name("dgp_sample")), o.sample);
    const auto& f = data.front();
    std::string csv;
    for (Eigen::Index k = 0; k < f.w.size(); ++k) csv += "w" + std::to_string(k) + ",";
    csv += "y";
    for (Eigen::Index k = 0; k < f.t.size(); ++k) csv += ",t" + std::to_string(k);
    for (Eigen::Index k = 0; k < f.u.size(); ++k) csv += ",u" + std::to_string(k);
    for (Eigen::Index k = 0; k < f.v.size(); ++k) csv += ",v" + std::to_string(k);
    csv += "\n";
    for (const auto& s : data) {
      std::string line;
      for (Eigen::Index k = 0; k < s.w.size(); ++k) line += format_double(s.w[k]) + ",";
      line += format_double(s.y);
      for (Eigen::Index k = 0; k < s.t.size(); ++k) line += "," + format_double(s.t[k]);
      for (Eigen::Index k = 0; k < s.u.size(); ++k) line += "," + format_double(s.u[k]);
      for (Eigen::Index k = 0; k < s.v.size(); ++k) line += "," + format_double(s.v[k]);
      csv += line + "\n";
    }
    j["sample"] = o.sample;
    j["x_columns"] = Json::array();
    for (Eigen::Index k = 0; k < f.x_slice.length; ++k) j["x_columns"].push_back("w" + std::to_string(f.x_slice.offset + k));
    emit(o, j, &csv, out);
    return 0;
  }
  emit(o, j, nullptr, out);
  return 0;
}

// Definitional checks that must hold on any build.
int cmd_selftest(const Options& o, std::ostream& out) {
  Json checks = Json::array();
  bool all = true;
  auto record = [&](const std::string& name, bool ok, const std::string& detail = "") {
    Json c;
    c["name"] = name;
    c["pass"] = ok;
    if (!detail.empty()) c["detail"] = detail;
    checks.push_back(std::move(c));
    all = all && ok;
  };
  auto guarded = [&](const std::string& name, const std::function<bool()>& fn) {
    try {
      record(name, fn());
    } catch (const std::exception& e) {
      record(name, false, e.what());
    }
  };

  guarded("m0 equals theta0 * e0 + f0 atom-wise", [] {
    const DgpSpec d = make_dgp("cate_enum", {{"e_const", 0.5}, {"theta_slope", 0.0}}, 0);
    const auto& m0 = d.structural.at("m0");
    const auto& e0 = d.structural.at("e0");
    const auto& f0 = d.structural.at("f0");
    double worst = 0.0;
    for (const auto& a : d.dist.atoms()) {
      worst = std::max(worst, std::abs(m0.scalar(a) - (d.theta0.scalar(a) * e0.scalar(a) + f0.scalar(a))));
    }
    return worst == 0.0;
  });
  guarded("zero injected error returns g0", [] {
    const DgpSpec d = make_dgp("cate_enum", {}, 0);
    const auto& s = d.setup("robinson");
    const FunctionHandle g = inject_nuisance_error(s.g0, 0.0, 1);
    for (const auto& a : d.dist.atoms()) {
      if ((g(a) - s.g0(a)).cwiseAbs().maxCoeff() != 0.0) return false;
    }
    return true;
  });
  guarded("propensity stays unclipped below the margin", [] {
    const DgpSpec d = make_dgp("cate_enum", {}, 0);
    const auto& s = d.setup("robinson");
    InjectOptions io;
    io.probability_slots = s.probability_slots;
    const double eps = 0.05;  // e0 lies in [0.3, 0.7]
    const FunctionHandle g = inject_nuisance_error(s.g0, eps, 3, io);
    for (const auto& a : d.dist.atoms()) {
      const double e = g(a)[1];
      if (e <= io.clip_eta || e >= 1.0 - io.clip_eta) return false;
    }
    return true;
  });
  guarded("split is a partition with near-equal folds", [] {
    const SplitPlan p = split(103, 4, 5);
    assert_partition(p);
    const auto sz = p.sizes();
    return *std::max_element(sz.begin(), sz.end()) - *std::min_element(sz.begin(), sz.end()) <= 1;
  });
  guarded("sweep CSV header", [] {
    SweepReport r;
    return sweep_csv(r) == std::string(kSweepCsvHeader) + "\n";
  });
  guarded("sweep CSV is byte-identical across emissions", [] {
    SweepReport r;
    r.rows.push_back({0.1, 0, 1.0 / 3.0, 1e-7, 42});
    return sweep_csv(r) == sweep_csv(r);
  });
  guarded("sweep JSON round-trips", [] {
    SweepReport r;
    r.kind = "eps";
    r.loss_id = "robinson";
    r.dgp_id = "cate_enum";
    r.learner_id = "erm";
    r.n = 10;
    r.reps = 2;
    r.seed = 9;
    r.floor = 0.1;
    r.points.push_back({0.1, 0.2, 0.01, 0.1, 0.3, 0.4, 0.1, true, 0.5, 0.0});
    r.has_slope = true;
    r.slope = 1.0 / 7.0;
    r.slope_stderr = 0.25;
    r.verdict = "ok";
    const SweepReport b = sweep_from_json(nlohmann::json::parse(dump_json(to_json(r))));
    return b.slope == r.slope && b.points.size() == 1 && b.points[0].q10 == 0.01 && b.floor == r.floor &&
           b.seed == r.seed && b.verdict == r.verdict;
  });
  guarded("oracle first stage gives an oracle-gap ratio of 1", [] {
    const DgpSpec d = make_dgp("cate_enum", {}, 0);
    const auto& s = d.setup("robinson");
    LearnerConfig c;
    c.learner_id = "erm";
    const Pipeline p = make_two_stage_pipeline(s.loss, oracle_nuisance(s.g0), make_target_learner(c, s.cls));
    return oracle_gap(d, "robinson", p, p, 200, 3, 1).ratio == 1.0;
  });
  guarded("two-point eps grid is rejected", [] {
    const DgpSpec d = make_dgp("cate_enum", {}, 0);
    EpsSweepConfig c;
    c.eps_grid = {0.1, 0.2};
    LearnerConfig lc;
    lc.learner_id = "erm";
    try {
      rate_sweep_eps(d, "robinson", make_target_learner(lc, d.setup("robinson").cls), c);
    } catch (const ConfigError&) {
      return true;
    }
    return false;
  });
  guarded("unknown dgp id is rejected", [] {
    try {
      make_dgp("no_such_dgp");
    } catch (const ConfigError&) {
      return true;
    }
    return false;
  });

  Json j;
  j["subcommand"] = "selftest";
  j["checks"] = std::move(checks);
  j["verdict"] = all ? "pass" : "fail";
  emit(o, j, nullptr, out);
  return all ? 0 : 1;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

std::vector<ConfigEntry> parse_config(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line, section;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw ConfigError("config line " + std::to_string(no) + ": malformed section header");
      section = dashed(trim(t.substr(1, t.size() - 2)));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(no) + ": expected 'key = value'");
    const std::string key = dashed(trim(t.substr(0, eq)));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(no) + ": empty key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    const std::string full = section.empty() || section == "run" ? key : section + "-" + key;
    if (!seen.insert(full).second) {
      throw ConfigError("config line " + std::to_string(no) + ": key '" + full + "' given twice");
    }
    out.push_back({full, value, no});
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Orthogonal statistical learning toolkit", "osl"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  auto* ortho = app.add_subcommand("orthocheck", "certify orthogonality of a loss on an enumerated DGP");
  add_common(ortho, o);
  add_dgp(ortho, o, true);
  ortho->add_option("--loss", o.loss, "loss id")->required();
  ortho->add_option("--dirs", o.dirs, "random directions");
  ortho->add_flag("--universal", o.universal, "also check at class members other than theta*");
  ortho->add_option("--tol", o.tol, "tolerance override");

  auto* cons = app.add_subcommand("construct", "build an orthogonal loss from a base loss and certify it");
  add_common(cons, o);
  add_dgp(cons, o, false);
  add_nuisance(cons, o);
  add_target(cons, o);
  cons->add_option("--base", o.base, "aipw strategic");
  cons->add_option("--riesz", o.riesz, "oracle formula regress");
  cons->add_option("--dirs", o.dirs, "random directions");
  cons->add_option("--tol", o.tol, "tolerance override");
  cons->add_option("--n", o.n, "samples for the four-fold fit (0 skips it)");
  cons->add_flag("--no-shuffle", o.no_shuffle, "contiguous folds");

  auto* fit = app.add_subcommand("fit", "two- or three-stage fit on DGP draws or a CSV file");
  add_common(fit, o);
  add_dgp(fit, o, false);
  add_nuisance(fit, o);
  add_target(fit, o);
  fit->add_option("--loss", o.loss, "loss id")->required();
  fit->add_option("--n", o.n, "samples drawn from the DGP");
  fit->add_option("--csv", o.csv, "input CSV with a header row");
  fit->add_option("--y", o.col_y, "outcome column");
  fit->add_option("--t", o.col_t, "treatment column(s)");
  fit->add_option("--x", o.col_x, "target covariate columns");
  fit->add_option("--w", o.col_w, "extra nuisance covariate columns");
  fit->add_option("--u", o.col_u, "first-stage target columns");
  fit->add_option("--v", o.col_v, "auxiliary columns");
  fit->add_option("--constraint", o.constraint, "none box ball simplex (CSV input)");
  fit->add_option("--clip-eta", o.clip_eta, "propensity clipping level (CSV input)");
  fit->add_flag("--crossfit", o.crossfit, "average the two swapped-fold fits");
  fit->add_flag("--no-shuffle", o.no_shuffle, "contiguous folds");

  auto* sweep = app.add_subcommand("sweep", "excess-risk rate sweep over eps or n");
  add_common(sweep, o);
  add_dgp(sweep, o, true);
  add_nuisance(sweep, o);
  add_target(sweep, o);
  sweep->add_option("--kind", o.kind, "eps or n")->required();
  sweep->add_option("--loss", o.loss, "loss id")->required();
  sweep->add_option("--eps-grid", o.eps_grid, "comma-separated eps values");
  sweep->add_option("--n-grid", o.n_grid, "comma-separated sample sizes");
  sweep->add_option("--n", o.n, "second-stage sample size (eps sweeps)");
  sweep->add_option("--reps", o.reps, "replications");
  sweep->add_option("--threads", o.threads, "worker threads (0 = hardware)");
  sweep->add_option("--direction", o.direction, "aligned or independent error signs");
  sweep->add_option("--expect", o.expect, "lo,hi slope interval for a pass/fail verdict");
  sweep->add_option("--csv-out", o.csv_out, "per-replication CSV path");
  sweep->add_flag("--crossfit", o.crossfit, "average the two swapped-fold fits (n sweeps)");
  sweep->add_flag("--no-shuffle", o.no_shuffle, "contiguous folds");

  auto* dgp = app.add_subcommand("dgp", "describe a DGP and optionally dump draws");
  add_common(dgp, o);
  add_dgp(dgp, o, true);
  dgp->add_option("--sample", o.sample, "number of draws written to --csv-out");
  dgp->add_option("--csv-out", o.csv_out, "CSV path for the draws");

  auto* self = app.add_subcommand("selftest", "run the built-in definitional checks");
  add_common(self, o);

  try {
    std::vector<std::string> argv_s{"osl"};
    // Config entries go first so command-line flags override them.
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    }
    if (!config_path.empty()) {
      if (args.empty()) throw ConfigError("missing subcommand");
      CLI::App* sub = nullptr;
      for (auto* s : app.get_subcommands({})) {
        if (s->get_name() == args[0]) sub = s;
      }
      if (!sub) throw ConfigError("--config must follow a subcommand");
      argv_s.push_back(args[0]);
      for (const auto& e : parse_config(read_file(config_path))) {
        const CLI::Option* opt = sub->get_option_no_throw("--" + e.key);
        if (!opt || e.key == "config") {
          throw ConfigError("config line " + std::to_string(e.line) + ": unknown key '" + e.key + "' for " +
                            args[0]);
        }
        if (opt->get_expected_max() == 0) {
          if (e.value == "true") {
            argv_s.push_back("--" + e.key);
          } else if (e.value != "false") {
            throw ConfigError("config line " + std::to_string(e.line) + ": '" + e.key + "' expects true or false");
          }
        } else {
          argv_s.push_back("--" + e.key + "=" + e.value);
        }
      }
      argv_s.insert(argv_s.end(), args.begin() + 1, args.end());
    } else {
      argv_s.insert(argv_s.end(), args.begin(), args.end());
    }
    std::vector<char*> argv;
    for (auto& s : argv_s) argv.push_back(s.data());
    try {
      app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? 0 : 2;
    }
    if (o.threads < 0) throw ConfigError("--threads must be >= 0");

    if (ortho->parsed()) return cmd_orthocheck(o, out);
    if (cons->parsed()) return cmd_construct(o, out);
    if (fit->parsed()) return cmd_fit(o, out);
    if (sweep->parsed()) return cmd_sweep(o, out);
    if (dgp->parsed()) return cmd_dgp(o, out);
    if (self->parsed()) return cmd_selftest(o, out);
    throw ConfigError("missing subcommand");
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace osl
