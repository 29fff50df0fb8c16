#include "osl/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "osl/construct.hpp"
#include "osl/rng.hpp"

namespace osl {

namespace {

double logistic(double s) { return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s)); }

std::vector<double> linspace(double a, double b, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = n == 1 ? a : a + (b - a) * i / (n - 1);
  return out;
}

// Merges user parameters into the family defaults, rejecting unknown keys.
DgpParams merge_params(const std::string& id, const DgpParams& defaults, const DgpParams& given) {
  DgpParams out = defaults;
  for (const auto& [k, v] : given) {
    if (!defaults.count(k)) {
      std::string allowed;
      for (const auto& [dk, dv] : defaults) allowed += (allowed.empty() ? "" : ", ") + dk;
      throw ConfigError("dgp '" + id + "': unknown parameter '" + k + "' (allowed: " + allowed + ")");
    }
    if (!std::isfinite(v)) throw ConfigError("dgp '" + id + "': parameter '" + k + "' is not finite");
    out[k] = v;
  }
  return out;
}

int int_param(const DgpParams& p, const std::string& key, int lo, int hi) {
  const double v = p.at(key);
  if (v != std::floor(v) || v < lo || v > hi) {
    throw ConfigError("parameter '" + key + "' must be an integer in [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
  }
  return static_cast<int>(v);
}

Sample make_sample(std::int64_t id, Vec w, Slice xs, double y, Vec t, Vec u = Vec(), Vec v = Vec()) {
  Sample s;
  s.id = id;
  s.w = std::move(w);
  s.x_slice = xs;
  s.y = y;
  s.t = std::move(t);
  s.u = std::move(u);
  s.v = std::move(v);
  return s;
}

Vec vec1(double a) {
  Vec v(1);
  v[0] = a;
  return v;
}

// Tabular handle whose rows are fn(key vector).
FunctionHandle table(std::shared_ptr<const KeyTable> keys, int out_dim, const std::function<Vec(const Vec&)>& fn) {
  Mat values(keys->size(), out_dim);
  for (int k = 0; k < keys->size(); ++k) values.row(k) = fn(keys->key(k)).transpose();
  return FunctionHandle::tabular(std::move(keys), std::move(values));
}

FunctionHandle linear_x(int input_dim, const Mat& weights) {
  return FunctionHandle::linear(View::X, FeatureMap::intercept(input_dim), weights);
}

// theta* -/+ unit steps on every weight.
std::vector<FunctionHandle> linear_check_members(const ThetaClass& cls, const FunctionHandle& theta_star) {
  std::vector<FunctionHandle> out;
  const auto* lin = theta_star.as_linear();
  if (!lin) return out;
  for (Eigen::Index j = 0; j < lin->weights.rows(); ++j) {
    for (Eigen::Index k = 0; k < lin->weights.cols(); ++k) {
      for (double s : {1.0, -1.0}) {
        Mat W = lin->weights;
        W(j, k) += s;
        out.push_back(cls.make(cls.project(W)));
      }
    }
  }
  return out;
}

// max over groups of |E[value | group]| under the atom weights.
double max_conditional_mean(const Distribution& dist, const std::function<std::int64_t(const Sample&)>& group,
                            const std::function<double(const Sample&)>& value) {
  std::map<std::int64_t, std::pair<double, double>> acc;
  const auto& atoms = dist.atoms();
  const auto& w = dist.weights();
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    auto& a = acc[group(atoms[i])];
    a.first += w[i] * value(atoms[i]);
    a.second += w[i];
  }
  double worst = 0.0;
  for (const auto& [g, a] : acc) {
    if (a.second > 0.0) worst = std::max(worst, std::abs(a.first / a.second));
  }
  return worst;
}

std::int64_t key_group(const KeyTable& keys, const Sample& s) { return keys.lookup(s); }

LossSetup finish_setup(LossModel loss, FunctionHandle g0, ThetaClass cls, const Distribution& dist,
                       std::vector<int> prob_slots, FunctionHandle theta_star = {}) {
  LossSetup s;
  s.loss = std::move(loss);
  s.g0 = std::move(g0);
  s.cls = std::move(cls);
  s.theta_star = theta_star.valid() ? theta_star : population_minimizer(s.loss, s.g0, dist, s.cls);
  s.probability_slots = std::move(prob_slots);
  if (s.cls.kind == ThetaClass::Kind::Finite) {
    s.check_members = s.cls.members;
  } else {
    s.check_members = linear_check_members(s.cls, s.theta_star);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Treatment-effect families

struct CateFunctions {
  double e_const = 0.0;
  double theta_a = 1.0;
  double theta_b = 2.0;
  double e0(double x, double v) const { return e_const > 0.0 ? e_const : 0.5 + 0.15 * x + 0.05 * v; }
  double theta0(double x) const { return theta_a + theta_b * x; }
  static double f0(double x, double v) { return 0.5 * x * x + 0.3 * v + 0.2 * x * v; }
};

DgpSpec cate_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p = merge_params("cate_enum", {{"n_x", 8}, {"n_v", 4}, {"sigma", 0.1}, {"e_const", 0.0},
                                                 {"theta_intercept", 1.0}, {"theta_slope", 2.0}},
                                   given);
  const int nx = int_param(p, "n_x", 2, 200);
  const int nv = int_param(p, "n_v", 1, 50);
  const double sigma = p.at("sigma");
  CateFunctions F{p.at("e_const"), p.at("theta_intercept"), p.at("theta_slope")};
  if (F.e_const != 0.0 && !(F.e_const > 0.0 && F.e_const < 1.0)) throw ConfigError("e_const must lie in (0, 1)");

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (double x : linspace(-1.0, 1.0, nx)) {
    for (double v : linspace(-1.0, 1.0, nv)) {
      const double e = F.e0(x, v);
      for (int t = 0; t <= 1; ++t) {
        for (double xi : {-1.0, 1.0}) {
          Vec w(2);
          w << x, v;
          const double y = t * F.theta0(x) + CateFunctions::f0(x, v) + sigma * xi;
          atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), w, Slice{0, 1}, y, vec1(t), Vec(),
                                      vec1(v)));
          weights.push_back((t ? e : 1.0 - e) * 0.5 / (nx * nv));
        }
      }
    }
  }
  DgpSpec d;
  d.id = "cate_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  Mat tw(2, 1);
  tw << F.theta_a, F.theta_b;
  d.theta0 = linear_x(1, tw);
  auto e0 = table(d.w_keys, 1, [F](const Vec& w) { return vec1(F.e0(w[0], w[1])); });
  auto f0 = table(d.w_keys, 1, [](const Vec& w) { return vec1(CateFunctions::f0(w[0], w[1])); });
  auto f1 = table(d.w_keys, 1, [F](const Vec& w) { return vec1(CateFunctions::f0(w[0], w[1]) + F.theta0(w[0])); });
  auto m0 = table(d.w_keys, 1, [F](const Vec& w) {
    return vec1(F.theta0(w[0]) * F.e0(w[0], w[1]) + CateFunctions::f0(w[0], w[1]));
  });
  d.structural = {{"e0", e0}, {"f0", f0}, {"f1", f1}, {"m0", m0}};

  const ThetaClass cls = ThetaClass::linear(FeatureMap::intercept(1), 1, View::X);
  auto stacked = [&](std::vector<FunctionHandle> parts) {
    return FunctionHandle::tabulate(FunctionHandle::stack(parts), d.w_keys);
  };
  d.setups["robinson"] = finish_setup(robinson_loss(), stacked({m0, e0}), cls, d.dist, {1});
  const FunctionHandle g_po = stacked({f0, f1});
  d.setups["plugoutcome_naive"] = finish_setup(plugoutcome_naive_loss(), g_po, cls, d.dist, {});
  const BaseLossSpec aipw = aipw_base_spec();
  const FunctionHandle a0 = riesz_oracle(aipw, d.dist, d.theta0, g_po);
  d.structural["a0"] = a0;
  d.setups["aipw_constructed"] = finish_setup(build_orthogonal_loss(aipw), stacked({g_po, a0}), cls, d.dist, {});
  d.default_loss = "robinson";

  const KeyTable& wk = *d.w_keys;
  double r = 0.0;
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.treatment() - e0.scalar(s); }));
  r = std::max(r, max_conditional_mean(
                      d.dist, [&](const Sample& s) { return 2 * key_group(wk, s) + s.arm(); },
                      [&](const Sample& s) { return s.y - (s.arm() ? f1.scalar(s) : f0.scalar(s)); }));
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.y - m0.scalar(s); }));
  d.structural_residual = r;
  return d;
}

DgpSpec cate_sampler(const std::string& id, const DgpParams& given, std::uint64_t seed) {
  const bool high = id == "cate_highdim";
  const DgpParams p = high ? merge_params(id, {{"dim", 20}, {"sigma", 0.5}, {"mc_draws", 100000}}, given)
                           : merge_params(id, {{"sigma", 0.5}, {"e_const", 0.0}, {"theta_intercept", 1.0},
                                               {"theta_slope", 2.0}, {"mc_draws", 100000}},
                                          given);
  const double sigma = p.at("sigma");
  DgpSpec d;
  d.id = id;
  d.params = p;
  d.seed = seed;
  d.mc_draws = static_cast<std::size_t>(int_param(p, "mc_draws", 1000, 10000000));
  FunctionHandle e0, f0, f1, m0;
  ThetaClass cls;
  if (!high) {
    CateFunctions F{p.at("e_const"), p.at("theta_intercept"), p.at("theta_slope")};
    d.dist = Distribution::sampler([F, sigma](std::uint64_t s, std::uint64_t index) {
      Rng rng(s, "cate_linear", index);
      const double x = rng.uniform(-1.0, 1.0);
      const double v = rng.uniform(-1.0, 1.0);
      const double e = F.e0(x, v);
      const double t = rng.uniform() < e ? 1.0 : 0.0;
      const double y = t * F.theta0(x) + CateFunctions::f0(x, v) + sigma * rng.normal();
      Vec w(2);
      w << x, v;
      return make_sample(static_cast<std::int64_t>(index), w, Slice{0, 1}, y, vec1(t), Vec(), vec1(v));
    });
    Mat tw(2, 1);
    tw << F.theta_a, F.theta_b;
    d.theta0 = linear_x(1, tw);
    auto mk = [](std::function<double(const Vec&)> fn) {
      return FunctionHandle::opaque(View::W, 1, [fn](const Sample& s, VecOut out) { out[0] = fn(s.w); });
    };
    e0 = mk([F](const Vec& w) { return F.e0(w[0], w[1]); });
    f0 = mk([](const Vec& w) { return CateFunctions::f0(w[0], w[1]); });
    f1 = mk([F](const Vec& w) { return CateFunctions::f0(w[0], w[1]) + F.theta0(w[0]); });
    m0 = mk([F](const Vec& w) { return F.theta0(w[0]) * F.e0(w[0], w[1]) + CateFunctions::f0(w[0], w[1]); });
    cls = ThetaClass::linear(FeatureMap::intercept(1), 1, View::X);
  } else {
    const int dim = int_param(p, "dim", 4, 1000);
    d.dist = Distribution::sampler([dim, sigma](std::uint64_t s, std::uint64_t index) {
      Rng rng(s, "cate_highdim", index);
      Vec w(dim);
      for (int j = 0; j < dim; ++j) w[j] = rng.uniform(-1.0, 1.0);
      const double e = 0.5 + 0.2 * w[2];
      const double t = rng.uniform() < e ? 1.0 : 0.0;
      const double theta = 1.0 + w[0] - 0.5 * w[1];
      const double f = w[0] + 0.5 * w[1] * w[1] + 0.25 * w[3];
      return make_sample(static_cast<std::int64_t>(index), w, Slice{0, dim}, t * theta + f + sigma * rng.normal(),
                         vec1(t));
    });
    Mat tw = Mat::Zero(dim + 1, 1);
    tw(0, 0) = 1.0;
    tw(1, 0) = 1.0;
    tw(2, 0) = -0.5;
    d.theta0 = linear_x(dim, tw);
    auto mk = [](std::function<double(const Vec&)> fn) {
      return FunctionHandle::opaque(View::W, 1, [fn](const Sample& s, VecOut out) { out[0] = fn(s.w); });
    };
    auto theta = [](const Vec& w) { return 1.0 + w[0] - 0.5 * w[1]; };
    auto f = [](const Vec& w) { return w[0] + 0.5 * w[1] * w[1] + 0.25 * w[3]; };
    e0 = mk([](const Vec& w) { return 0.5 + 0.2 * w[2]; });
    f0 = mk(f);
    f1 = mk([=](const Vec& w) { return f(w) + theta(w); });
    m0 = mk([=](const Vec& w) { return theta(w) * (0.5 + 0.2 * w[2]) + f(w); });
    cls = ThetaClass::linear(FeatureMap::intercept(dim), 1, View::X);
  }
  d.structural = {{"e0", e0}, {"f0", f0}, {"f1", f1}, {"m0", m0}};
  d.setups["robinson"] = finish_setup(robinson_loss(), FunctionHandle::stack({m0, e0}), cls, d.dist, {1}, d.theta0);
  d.setups["plugoutcome_naive"] =
      finish_setup(plugoutcome_naive_loss(), FunctionHandle::stack({f0, f1}), cls, d.dist, {}, d.theta0);
  d.default_loss = "robinson";
  return d;
}

// ---------------------------------------------------------------------------
// Policy families. Y is an incurred loss; policies minimize E[beta * theta].

DgpSpec policy_binary_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p = merge_params(
      "policy_binary_enum",
      {{"bins", 24}, {"sigma", 0.02}, {"tau_min", 1e-5}, {"tau_max", 0.5}, {"e_slope", 0.2}, {"clip_eta", 0.01}}, given);
  const int bins = int_param(p, "bins", 2, 2000);
  const double sigma = p.at("sigma");
  const double tmin = p.at("tau_min"), tmax = p.at("tau_max");
  const double es = p.at("e_slope");
  const double clip = p.at("clip_eta");
  if (!(tmin > 0.0 && tmax >= tmin)) throw ConfigError("policy_binary_enum: need 0 < tau_min <= tau_max");
  if (!(std::abs(es) < 0.5)) throw ConfigError("policy_binary_enum: |e_slope| must be < 0.5");

  const auto xs = linspace(-1.0, 1.0, bins);
  std::vector<double> tau(static_cast<std::size_t>(bins));
  for (int j = 0; j < bins; ++j) {
    const double frac = bins == 1 ? 0.0 : static_cast<double>(j) / (bins - 1);
    tau[static_cast<std::size_t>(j)] = -tmin * std::pow(tmax / tmin, frac);
  }
  auto f0fn = [](double x) { return 0.2 + 0.3 * x; };
  auto efn = [es](double x) { return 0.5 + es * x; };

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (int j = 0; j < bins; ++j) {
    const double x = xs[static_cast<std::size_t>(j)];
    for (int t = 0; t <= 1; ++t) {
      for (double xi : {-1.0, 1.0}) {
        const double y = f0fn(x) + t * tau[static_cast<std::size_t>(j)] + sigma * xi;
        atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), vec1(x), Slice{0, 1}, y, vec1(t)));
        weights.push_back((t ? efn(x) : 1.0 - efn(x)) * 0.5 / bins);
      }
    }
  }
  DgpSpec d;
  d.id = "policy_binary_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  auto tau_of = [xs, tau](double x) {
    const auto it = std::min_element(xs.begin(), xs.end(),
                                     [x](double a, double b) { return std::abs(a - x) < std::abs(b - x); });
    return tau[static_cast<std::size_t>(it - xs.begin())];
  };
  auto f0 = table(d.w_keys, 1, [f0fn](const Vec& w) { return vec1(f0fn(w[0])); });
  auto f1 = table(d.w_keys, 1, [f0fn, tau_of](const Vec& w) { return vec1(f0fn(w[0]) + tau_of(w[0])); });
  auto e0 = table(d.w_keys, 1, [efn](const Vec& w) { return vec1(efn(w[0])); });
  d.theta0 = table(d.x_keys, 1, [tau_of](const Vec& x) { return vec1(tau_of(x[0]) < 0.0 ? 1.0 : 0.0); });
  d.structural = {{"e0", e0}, {"f0", f0}, {"f1", f1}};

  ThetaClass cls = ThetaClass::linear(FeatureMap::one_hot(d.x_keys), 1, View::X);
  cls.constraint = ThetaClass::Constraint::Box;
  cls.lo = 0.0;
  cls.hi = 1.0;
  const FunctionHandle g0 = FunctionHandle::tabulate(FunctionHandle::stack({f0, f1, e0}), d.w_keys);
  d.setups["dr_policy_binary"] = finish_setup(dr_policy_loss_binary(clip), g0, cls, d.dist, {2});
  d.setups["ips_naive"] = finish_setup(ips_naive_loss(clip), g0, cls, d.dist, {2});
  d.default_loss = "dr_policy_binary";

  const KeyTable& wk = *d.w_keys;
  double r = 0.0;
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.treatment() - e0.scalar(s); }));
  r = std::max(r, max_conditional_mean(
                      d.dist, [&](const Sample& s) { return 2 * key_group(wk, s) + s.arm(); },
                      [&](const Sample& s) { return s.y - (s.arm() ? f1.scalar(s) : f0.scalar(s)); }));
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) {
                                         const double b = dr_binary_score(f0.scalar(s), f1.scalar(s), e0.scalar(s),
                                                                          s.treatment(), s.y, clip);
                                         return b - (f1.scalar(s) - f0.scalar(s));
                                       }));
  d.structural_residual = r;
  return d;
}

DgpSpec policy_highvar(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p = merge_params("policy_highvar",
                                   {{"bins", 10}, {"delta", 0.1}, {"sigma0", 1.0}, {"var_ratio", 10.0},
                                    {"e", 0.5}, {"candidates", 20}, {"clip_eta", 0.01}},
                                   given);
  const int bins = int_param(p, "bins", 2, 64);
  const double delta = p.at("delta");
  const double s0 = p.at("sigma0");
  const double s1 = s0 * std::sqrt(p.at("var_ratio"));
  const double e = p.at("e");
  const int ncand = int_param(p, "candidates", 1, 1000);
  const double clip = p.at("clip_eta");
  if (!(e > 0.0 && e < 1.0)) throw ConfigError("policy_highvar: e must lie in (0, 1)");
  if (!(p.at("var_ratio") > 0.0)) throw ConfigError("policy_highvar: var_ratio must be > 0");

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (double x : linspace(-1.0, 1.0, bins)) {
    for (int t = 0; t <= 1; ++t) {
      for (double xi : {-1.0, 1.0}) {
        const double y = t * delta + (t ? s1 : s0) * xi;
        atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), vec1(x), Slice{0, 1}, y, vec1(t)));
        weights.push_back((t ? e : 1.0 - e) * 0.5 / bins);
      }
    }
  }
  DgpSpec d;
  d.id = "policy_highvar";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  auto f0 = table(d.w_keys, 1, [](const Vec&) { return vec1(0.0); });
  auto f1 = table(d.w_keys, 1, [delta](const Vec&) { return vec1(delta); });
  auto e0 = table(d.w_keys, 1, [e](const Vec&) { return vec1(e); });
  d.structural = {{"e0", e0}, {"f0", f0}, {"f1", f1}};

  // Never-treat plus seeded random treatment sets.
  std::vector<FunctionHandle> members;
  const int K = d.x_keys->size();
  members.push_back(FunctionHandle::tabular(d.x_keys, Mat::Zero(K, 1)));
  Rng rng(seed, "policy_highvar_class");
  for (int c = 0; c < ncand; ++c) {
    Mat v = Mat::Zero(K, 1);
    while (v.sum() == 0.0) {
      for (int k = 0; k < K; ++k) v(k, 0) = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    members.push_back(FunctionHandle::tabular(d.x_keys, v));
  }
  d.theta0 = members.front();
  const FunctionHandle g0 = FunctionHandle::tabulate(FunctionHandle::stack({f0, f1, e0}), d.w_keys);
  d.setups["dr_policy_binary"] = finish_setup(dr_policy_loss_binary(clip), g0, ThetaClass::finite(members), d.dist, {2});
  d.default_loss = "dr_policy_binary";
  const KeyTable& wk = *d.w_keys;
  d.structural_residual = max_conditional_mean(
      d.dist, [&](const Sample& s) { return 2 * key_group(wk, s) + s.arm(); },
      [&](const Sample& s) { return s.y - (s.arm() ? delta : 0.0); });
  return d;
}

DgpSpec policy_multi_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p =
      merge_params("policy_multi_enum", {{"n_x", 8}, {"arms", 3}, {"sigma", 0.5}, {"clip_eta", 0.01}}, given);
  const int nx = int_param(p, "n_x", 2, 500);
  const int N = int_param(p, "arms", 2, 10);
  const double sigma = p.at("sigma");
  const double clip = p.at("clip_eta");
  auto prop = [N](double x) {
    Vec a(N);
    for (int k = 0; k < N; ++k) a[k] = std::exp(0.6 * x * (k - 0.5 * (N - 1)) / std::max(1, N - 1));
    return Vec(a / a.sum());
  };
  auto outcome = [](double x, int k) { return 0.3 * std::sin(2.0 * x + k) + 0.1 * k; };

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (double x : linspace(-1.0, 1.0, nx)) {
    const Vec pr = prop(x);
    for (int k = 0; k < N; ++k) {
      for (double xi : {-1.0, 1.0}) {
        Vec t = Vec::Zero(N);
        t[k] = 1.0;
        atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), vec1(x), Slice{0, 1},
                                    outcome(x, k) + sigma * xi, t));
        weights.push_back(pr[k] * 0.5 / nx);
      }
    }
  }
  DgpSpec d;
  d.id = "policy_multi_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  const FunctionHandle g0 = table(d.w_keys, 2 * N, [&](const Vec& w) {
    Vec g(2 * N);
    for (int k = 0; k < N; ++k) g[k] = outcome(w[0], k);
    g.tail(N) = prop(w[0]);
    return g;
  });
  d.structural["g0"] = g0;
  ThetaClass cls = ThetaClass::linear(FeatureMap::one_hot(d.x_keys), N, View::X);
  cls.constraint = ThetaClass::Constraint::Simplex;
  std::vector<int> slots;
  for (int k = 0; k < N; ++k) slots.push_back(N + k);
  d.setups["dr_policy_multi"] = finish_setup(dr_policy_loss_multi(N, clip), g0, cls, d.dist, slots);
  d.theta0 = d.setups["dr_policy_multi"].theta_star;
  d.default_loss = "dr_policy_multi";

  const KeyTable& wk = *d.w_keys;
  double r = 0.0;
  for (int k = 0; k < N; ++k) {
    r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                         [&](const Sample& s) { return s.t[k] - g0(s)[N + k]; }));
  }
  r = std::max(r, max_conditional_mean(
                      d.dist, [&](const Sample& s) { return N * key_group(wk, s) + s.arm(); },
                      [&](const Sample& s) { return s.y - g0(s)[s.arm()]; }));
  d.structural_residual = r;
  return d;
}

// ---------------------------------------------------------------------------
// Missing outcomes, covariate shift, strategic entry, plain regression.

DgpSpec missing_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p = merge_params("missing_enum", {{"n_x", 6}, {"n_v", 3}, {"sigma", 0.3}, {"clip_eta", 0.01}}, given);
  const int nx = int_param(p, "n_x", 2, 200);
  const int nv = int_param(p, "n_v", 1, 50);
  const double sigma = p.at("sigma");
  const double clip = p.at("clip_eta");
  auto theta = [](double x) { return 0.5 - x; };
  auto mean_y = [theta](double x, double v) { return theta(x) + 0.5 * v; };
  auto efn = [](double x, double v) { return 0.6 + 0.2 * x * v; };

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (double x : linspace(-1.0, 1.0, nx)) {
    for (double v : linspace(-1.0, 1.0, nv)) {
      for (double xi : {-1.0, 1.0}) {
        const double y_latent = mean_y(x, v) + sigma * xi;
        for (int t = 0; t <= 1; ++t) {
          Vec w(2);
          w << x, v;
          atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), w, Slice{0, 1}, t * y_latent, vec1(t),
                                      vec1(y_latent), vec1(v)));
          weights.push_back((t ? efn(x, v) : 1.0 - efn(x, v)) * 0.5 / (nx * nv));
        }
      }
    }
  }
  DgpSpec d;
  d.id = "missing_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  Mat tw(2, 1);
  tw << 0.5, -1.0;
  d.theta0 = linear_x(1, tw);
  auto e0 = table(d.w_keys, 1, [efn](const Vec& w) { return vec1(efn(w[0], w[1])); });
  auto h0 = table(d.w_keys, 1, [=](const Vec& w) {
    return vec1(-2.0 * (mean_y(w[0], w[1]) - theta(w[0])) / efn(w[0], w[1]));
  });
  d.structural = {{"e0", e0}, {"h0", h0}};
  const ThetaClass cls = ThetaClass::linear(FeatureMap::intercept(1), 1, View::X);
  d.setups["missing_data"] = finish_setup(missing_data_loss(clip),
                                          FunctionHandle::tabulate(FunctionHandle::stack({h0, e0}), d.w_keys), cls,
                                          d.dist, {1});
  d.default_loss = "missing_data";

  // h0 recomputed from the atoms: E[Y | w] from the latent outcomes.
  const KeyTable& wk = *d.w_keys;
  std::vector<double> ey(static_cast<std::size_t>(wk.size()), 0.0), mass(static_cast<std::size_t>(wk.size()), 0.0);
  for (std::size_t i = 0; i < d.dist.atoms().size(); ++i) {
    const auto& s = d.dist.atoms()[i];
    const auto k = static_cast<std::size_t>(wk.lookup(s));
    ey[k] += d.dist.weights()[i] * s.u[0];
    mass[k] += d.dist.weights()[i];
  }
  double r = 0.0;
  for (int k = 0; k < wk.size(); ++k) {
    const Vec& w = wk.key(k);
    const double h = -2.0 * (ey[static_cast<std::size_t>(k)] / mass[static_cast<std::size_t>(k)] - theta(w[0])) /
                     efn(w[0], w[1]);
    Sample probe;
    probe.w = w;
    probe.x_slice = Slice{0, 1};
    r = std::max(r, std::abs(h - h0.scalar(probe)));
  }
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.treatment() - e0.scalar(s); }));
  d.structural_residual = r;
  return d;
}

DgpSpec covshift_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p = merge_params("covshift_enum", {{"n_x", 10}, {"sigma", 0.2}, {"shift", 1.0}, {"clip_eta", 0.01}},
                                   given);
  const int nx = int_param(p, "n_x", 2, 1000);
  const double sigma = p.at("sigma");
  const double shift = p.at("shift");
  const auto xs = linspace(-1.0, 1.0, nx);
  std::vector<double> ps, pt;
  double zs = 0.0, zt = 0.0;
  for (double x : xs) {
    ps.push_back(std::exp(-0.5 * shift * x));
    pt.push_back(std::exp(0.5 * shift * x));
    zs += ps.back();
    zt += pt.back();
  }
  for (auto& v : ps) v /= zs;
  for (auto& v : pt) v /= zt;
  auto theta = [](double x) { return 0.3 + 0.8 * x; };

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (int j = 0; j < nx; ++j) {
    const double x = xs[static_cast<std::size_t>(j)];
    for (double xi : {-1.0, 1.0}) {
      atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), vec1(x), Slice{0, 1}, theta(x) + sigma * xi,
                                  Vec()));
      weights.push_back(ps[static_cast<std::size_t>(j)] * 0.5);
    }
  }
  DgpSpec d;
  d.id = "covshift_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  Mat tw(2, 1);
  tw << 0.3, 0.8;
  d.theta0 = linear_x(1, tw);
  auto ratio = table(d.w_keys, 1, [&](const Vec& w) {
    const auto it = std::min_element(xs.begin(), xs.end(),
                                     [&](double a, double b) { return std::abs(a - w[0]) < std::abs(b - w[0]); });
    const auto j = static_cast<std::size_t>(it - xs.begin());
    return vec1(pt[j] / ps[j]);
  });
  d.structural = {{"f", ratio}};
  const ThetaClass cls = ThetaClass::linear(FeatureMap::intercept(1), 1, View::X);
  d.setups["domain_adapt"] = finish_setup(domain_adaptation_loss(p.at("clip_eta")), ratio, cls, d.dist, {});
  d.default_loss = "domain_adapt";

  const KeyTable& wk = *d.w_keys;
  const double total = expectation(d.dist, [&](const Sample& s) { return ratio.scalar(s); });
  double r = std::abs(total - 1.0);
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.y - theta(s.w[0]); }));
  d.structural_residual = r;
  return d;
}

DgpSpec strategic_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p = merge_params("strategic_enum",
                                   {{"n_x", 9}, {"psi_a", -0.2}, {"psi_b", 0.5}, {"delta", -1.5}, {"g_a", 0.2},
                                    {"g_b", 0.8}},
                                   given);
  const int nx = int_param(p, "n_x", 3, 1000);
  const double pa = p.at("psi_a"), pb = p.at("psi_b"), dl = p.at("delta"), ga = p.at("g_a"), gb = p.at("g_b");
  auto g0fn = [ga, gb](double x) { return logistic(ga + gb * x); };
  auto entry = [=](double x) { return logistic(pa + pb * x + dl * g0fn(x)); };

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (double x : linspace(-1.0, 1.0, nx)) {
    const double py = entry(x);
    const double pu = g0fn(x);
    for (int y = 0; y <= 1; ++y) {
      for (int u = 0; u <= 1; ++u) {
        atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), vec1(x), Slice{0, 1}, y, Vec(), vec1(u)));
        weights.push_back((y ? py : 1.0 - py) * (u ? pu : 1.0 - pu) / nx);
      }
    }
  }
  DgpSpec d;
  d.id = "strategic_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  Mat tw(2, 2);
  tw << pa, dl, pb, 0.0;
  d.theta0 = linear_x(1, tw);
  auto g0 = table(d.w_keys, 1, [g0fn](const Vec& w) { return vec1(g0fn(w[0])); });
  auto a0 = table(d.w_keys, 2, [=](const Vec& w) {
    const double l = entry(w[0]);
    Vec a(2);
    a << dl * l * (1.0 - l), dl * l * (1.0 - l) * g0fn(w[0]);
    return a;
  });
  d.structural = {{"g0", g0}, {"a0", a0}};
  const ThetaClass cls = ThetaClass::linear(FeatureMap::intercept(1), 2, View::X);
  d.setups["strategic"] = finish_setup(strategic_loss(), g0, cls, d.dist, {0}, d.theta0);
  d.default_loss = "strategic";

  const KeyTable& wk = *d.w_keys;
  double r = 0.0;
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.y - entry(s.w[0]); }));
  r = std::max(r, max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                       [&](const Sample& s) { return s.u[0] - g0fn(s.w[0]); }));
  d.structural_residual = r;
  return d;
}

DgpSpec regress_enum(const DgpParams& given, std::uint64_t seed) {
  const DgpParams p =
      merge_params("regress_enum", {{"n_x", 32}, {"sigma", 0.4}, {"candidates", 16}, {"spread", 0.12}}, given);
  const int nx = int_param(p, "n_x", 2, 5000);
  const int M = int_param(p, "candidates", 1, 1000);
  const double sigma = p.at("sigma");
  const double spread = p.at("spread");
  if (!(sigma >= 0.0 && sigma <= 0.4)) throw ConfigError("regress_enum: sigma must lie in [0, 0.4]");
  if (!(spread >= 0.0 && spread <= 0.2)) throw ConfigError("regress_enum: spread must lie in [0, 0.2]");
  // Candidate 0 is the regression function; the others are bounded wiggles around it.
  auto cand = [spread](int k, double x) {
    const double base = 0.4 * std::sin(1.5 * x);
    return k == 0 ? base : base + spread * std::sin(1.3 * k * x + 0.7 * k);
  };

  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (double x : linspace(-1.0, 1.0, nx)) {
    for (double xi : {-1.0, 1.0}) {
      atoms.push_back(make_sample(static_cast<std::int64_t>(atoms.size()), vec1(x), Slice{0, 1}, cand(0, x) + sigma * xi,
                                  Vec()));
      weights.push_back(0.5 / nx);
    }
  }
  DgpSpec d;
  d.id = "regress_enum";
  d.params = p;
  d.seed = seed;
  d.dist = Distribution::enumerated(std::move(atoms), std::move(weights));
  d.w_keys = std::make_shared<const KeyTable>(d.dist, View::W);
  d.x_keys = std::make_shared<const KeyTable>(d.dist, View::X);
  std::vector<FunctionHandle> members;
  for (int k = 0; k < M; ++k) members.push_back(table(d.x_keys, 1, [&](const Vec& x) { return vec1(cand(k, x[0])); }));
  d.theta0 = members.front();
  d.setups["square"] = finish_setup(square_loss(), FunctionHandle::empty(View::W), ThetaClass::finite(members), d.dist, {});
  d.default_loss = "square";
  const KeyTable& wk = *d.w_keys;
  d.structural_residual = max_conditional_mean(d.dist, [&](const Sample& s) { return key_group(wk, s); },
                                               [&](const Sample& s) { return s.y - cand(0, s.w[0]); });
  return d;
}

// Sign of the direction at a nuisance input: hash of the exact input bits.
double direction_sign(const VecRef& w, std::uint64_t seed, int component) {
  std::uint64_t h = mix64(seed ^ 0x9e3779b97f4a7c15ULL);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    double v = w[i] == 0.0 ? 0.0 : w[i];
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix64(h ^ bits);
  }
  h = mix64(h ^ static_cast<std::uint64_t>(component + 1));
  return (h >> 63) ? 1.0 : -1.0;
}

}  // namespace

const LossSetup& DgpSpec::setup(const std::string& loss_id) const {
  const auto it = setups.find(loss_id);
  if (it == setups.end()) {
    std::string known;
    for (const auto& [k, v] : setups) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("dgp '" + id + "' has no setup for loss '" + loss_id + "' (available: " + known + ")");
  }
  return it->second;
}

std::vector<std::string> DgpSpec::loss_ids() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : setups) out.push_back(k);
  return out;
}

std::vector<std::string> dgp_ids() {
  return {"cate_enum",     "cate_linear",   "cate_highdim",      "policy_binary_enum", "policy_highvar",
          "missing_enum",  "covshift_enum", "policy_multi_enum", "strategic_enum",     "regress_enum"};
}

DgpSpec make_dgp(const std::string& id, const DgpParams& params, std::uint64_t seed) {
  if (id == "cate_enum") return cate_enum(params, seed);
  if (id == "cate_linear" || id == "cate_highdim") return cate_sampler(id, params, seed);
  if (id == "policy_binary_enum") return policy_binary_enum(params, seed);
  if (id == "policy_highvar") return policy_highvar(params, seed);
  if (id == "policy_multi_enum") return policy_multi_enum(params, seed);
  if (id == "missing_enum") return missing_enum(params, seed);
  if (id == "covshift_enum") return covshift_enum(params, seed);
  if (id == "strategic_enum") return strategic_enum(params, seed);
  if (id == "regress_enum") return regress_enum(params, seed);
  throw ConfigError("unknown dgp id '" + id + "'");
}

LossModel resolve_loss(const std::string& id, const LossOptions& options) {
  if (id == "aipw_constructed") return build_orthogonal_loss(aipw_base_spec());
  return make_loss(id, options);
}

FunctionHandle population_minimizer(const LossModel& loss, const FunctionHandle& g, const Distribution& dist,
                                    const ThetaClass& cls) {
  if (!dist.is_enumerated()) throw ConfigError("population minimizer needs an enumerated distribution");
  ErmOptions opt;
  opt.max_iters = 20000;
  opt.tol = 1e-12;
  return weighted_erm(loss, g, dist.atoms(), dist.weights(), cls, opt).handle;
}

FunctionHandle inject_nuisance_error(const FunctionHandle& g0, double eps, std::uint64_t direction_seed,
                                     const InjectOptions& opt) {
  if (!(eps >= 0.0)) throw ConfigError("injected error size must be >= 0");
  const int K = g0.out_dim();
  if (eps == 0.0 || K == 0) return g0;
  // Aligned: weights proportional to K, K-1, ..., 1 so that differences of
  // components move too; independent: equal weights.
  std::vector<double> weight(static_cast<std::size_t>(K));
  double norm2 = 0.0;
  for (int k = 0; k < K; ++k) {
    weight[static_cast<std::size_t>(k)] = opt.aligned ? static_cast<double>(K - k) : 1.0;
    norm2 += weight[static_cast<std::size_t>(k)] * weight[static_cast<std::size_t>(k)];
  }
  for (auto& w : weight) w *= eps / std::sqrt(norm2);
  const bool aligned = opt.aligned;
  const auto slots = opt.probability_slots;
  const double lo = opt.clip_eta, hi = 1.0 - opt.clip_eta;
  const View view = g0.view();
  auto perturb = [=](const VecRef& w, VecOut out) {
    for (int k = 0; k < K; ++k) out[k] += weight[static_cast<std::size_t>(k)] * direction_sign(w, direction_seed, aligned ? 0 : k);
    for (int k : slots) out[k] = std::clamp(out[k], lo, hi);
  };
  if (const auto* tab = g0.as_tabular()) {
    Mat values = tab->values;
    for (int r = 0; r < tab->keys->size(); ++r) {
      Vec row = values.row(r).transpose();
      perturb(tab->keys->key(r), row);
      values.row(r) = row.transpose();
    }
    return FunctionHandle::tabular(tab->keys, std::move(values));
  }
  return FunctionHandle::opaque(view, K, [g0, perturb, view](const Sample& s, VecOut out) {
    g0.eval(s, out);
    perturb(s.view(view), out);
  });
}

// ---------------------------------------------------------------------------
// First-stage learners per loss.

namespace {

std::vector<Sample> subset(std::span<const Sample> data, const std::function<bool(const Sample&)>& keep) {
  std::vector<Sample> out;
  for (const auto& s : data) {
    if (keep(s)) out.push_back(s);
  }
  return out;
}

Mat column(std::span<const Sample> data, const std::function<double(const Sample&)>& f) {
  Mat m(static_cast<Eigen::Index>(data.size()), 1);
  for (std::size_t i = 0; i < data.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = f(data[i]);
  return m;
}

FunctionHandle regress_arm(const LearnerConfig& cfg, std::span<const Sample> data, int arm) {
  const auto sub = subset(data, [arm](const Sample& s) { return s.arm() == arm; });
  if (sub.empty()) throw ConfigError("first stage: no samples with treatment " + std::to_string(arm) + " in S1");
  return fit_regression(cfg, sub, column(sub, [](const Sample& s) { return s.y; })).handle;
}

}  // namespace

NuisanceLearner make_first_stage(const DgpSpec& dgp, const std::string& loss_id, const LearnerConfig& cfg) {
  double clip = 0.01;
  if (dgp.setups.count(loss_id)) clip = dgp.setup(loss_id).loss.clip_eta;
  return make_first_stage(loss_id, cfg, clip);
}

NuisanceLearner make_first_stage(const std::string& loss_id, const LearnerConfig& cfg, double clip_eta) {
  if (cfg.learner_id == "oracle") throw ConfigError("the oracle first stage needs a DGP; use oracle_nuisance");
  if (loss_id == "robinson") {
    return make_nuisance_learner(cfg, [](std::span<const Sample> d) {
      Mat t(static_cast<Eigen::Index>(d.size()), 2);
      for (std::size_t i = 0; i < d.size(); ++i) t.row(static_cast<Eigen::Index>(i)) << d[i].y, d[i].treatment();
      return t;
    });
  }
  if (loss_id == "plugoutcome_naive") {
    return [cfg](std::span<const Sample> d) {
      return FunctionHandle::stack({regress_arm(cfg, d, 0), regress_arm(cfg, d, 1)});
    };
  }
  if (loss_id == "dr_policy_binary" || loss_id == "ips_naive") {
    return [cfg](std::span<const Sample> d) {
      const FunctionHandle e = fit_regression(cfg, d, column(d, [](const Sample& s) { return s.treatment(); })).handle;
      return FunctionHandle::stack({regress_arm(cfg, d, 0), regress_arm(cfg, d, 1), e});
    };
  }
  if (loss_id == "dr_policy_multi") {
    return [cfg](std::span<const Sample> d) {
      if (d.empty() || d.front().t.size() < 2) throw ConfigError("dr_policy_multi needs one-hot treatments");
      const int N = static_cast<int>(d.front().t.size());
      std::vector<FunctionHandle> parts;
      for (int k = 0; k < N; ++k) parts.push_back(regress_arm(cfg, d, k));
      Mat onehot(static_cast<Eigen::Index>(d.size()), N);
      for (std::size_t i = 0; i < d.size(); ++i) onehot.row(static_cast<Eigen::Index>(i)) = d[i].t.transpose();
      parts.push_back(fit_regression(cfg, d, onehot).handle);
      return FunctionHandle::stack(parts);
    };
  }
  if (loss_id == "missing_data") {
    return [cfg, clip_eta](std::span<const Sample> d) {
      const FunctionHandle e_raw =
          fit_regression(cfg, d, column(d, [](const Sample& s) { return s.treatment(); })).handle;
      const FunctionHandle m_obs = fit_regression(cfg, d, column(d, [](const Sample& s) { return s.y; })).handle;
      auto e_of = [e_raw, clip_eta](const Sample& s) { return std::clamp(e_raw.scalar(s), clip_eta, 1.0); };
      // Preliminary target: inverse-propensity weighted regression on x.
      const FittedModel pre = fit_ridge(d, column(d, [&](const Sample& s) { return s.y / e_of(s); }), 1e-8,
                                        FeatureMap::intercept(static_cast<int>(d.front().x_slice.length)), View::X);
      const FunctionHandle theta_pre = pre.handle;
      return FunctionHandle::opaque(View::W, 2, [=](const Sample& s, VecOut out) {
        const double e = e_of(s);
        out[0] = -2.0 * (m_obs.scalar(s) / e - theta_pre.scalar(s)) / e;
        out[1] = e;
      });
    };
  }
  if (loss_id == "strategic") {
    return make_nuisance_learner(cfg, [](std::span<const Sample> d) {
      return column(d, [](const Sample& s) {
        if (s.u.size() < 1) throw ConfigError("strategic first stage needs the opponent decision in u");
        return s.u[0];
      });
    });
  }
  if (loss_id == "square") {
    return [](std::span<const Sample>) { return FunctionHandle::empty(View::W); };
  }
  throw ConfigError("no learned first stage for loss '" + loss_id + "'; use the oracle nuisance or the construct pipeline");
}

}  // namespace osl
