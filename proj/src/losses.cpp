#include "osl/losses.hpp"

#include <cmath>

namespace osl {

namespace {

std::atomic<std::uint64_t> g_clip_events{0};

double clip_propensity(double e, double eta, bool* clipped) {
  if (std::isnan(e)) throw NumericError("propensity is NaN");
  const double c = std::min(std::max(e, eta), 1.0 - eta);
  if (c != e) {
    g_clip_events.fetch_add(1, std::memory_order_relaxed);
    if (clipped) *clipped = true;
  }
  if (!(c > 0.0 && c < 1.0)) throw NumericError("propensity outside (0, 1) after clipping");
  return c;
}

double logistic(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

double softplus(double s) { return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

}  // namespace

std::uint64_t clip_event_count() { return g_clip_events.load(); }
void reset_clip_events() { g_clip_events.store(0); }

// ---------------------------------------------------------------------------
// Single-index template

double SingleIndexLoss::index(const VecRef& zeta, const VecRef& gamma, const Sample& z) const {
  return lambda(gamma, z).dot(zeta);
}

double SingleIndexLoss::value(const VecRef& zeta, const VecRef& gamma, const Sample& z) const {
  const double s = index(zeta, gamma, z);
  double v = psi(s) - gamma_fn(gamma, z) * s;
  if (offset) v += offset(gamma, z);
  return scale * v;
}

double SingleIndexLoss::index_derivative(double s, const VecRef& gamma, const Sample& z) const {
  return phi(s) - gamma_fn(gamma, z);
}

LossModel make_single_index_loss(const SingleIndexLoss& spec, Regime regime) {
  if (!spec.lambda || !spec.gamma_fn || !spec.phi || !spec.psi) {
    throw ConfigError("single-index loss '" + spec.id + "' is incomplete");
  }
  LossModel m;
  m.id = spec.id;
  m.target_dim = spec.target_dim;
  m.nuisance_dim = spec.nuisance_dim;
  m.nuisance_components = spec.nuisance_components;
  m.regime = regime;
  m.shape = ZetaShape::General;
  m.value = [spec](const VecRef& zeta, const VecRef& gamma, const Sample& z) { return spec.value(zeta, gamma, z); };
  m.grad_zeta = [spec](const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) {
    const Vec lam = spec.lambda(gamma, z);
    const double s = lam.dot(zeta);
    out = spec.scale * spec.index_derivative(s, gamma, z) * lam;
  };
  m.index_weight = spec.lambda;
  return m;
}

// ---------------------------------------------------------------------------
// Treatment effects

LossModel robinson_loss() {
  LossModel m;
  m.id = "robinson";
  m.target_dim = 1;
  m.nuisance_dim = 2;
  m.nuisance_components = {"m", "e"};
  m.regime = Regime::Fast;
  m.shape = ZetaShape::Quadratic;
  m.claims_universal_orthogonality = true;
  m.value = [](const VecRef& zeta, const VecRef& g, const Sample& z) {
    const double r = z.y - g[0] - (z.treatment() - g[1]) * zeta[0];
    return r * r;
  };
  m.grad_zeta = [](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    const double te = z.treatment() - g[1];
    const double r = z.y - g[0] - te * zeta[0];
    out[0] = -2.0 * r * te;
  };
  m.grad_gamma = [](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    const double r = z.y - g[0] - (z.treatment() - g[1]) * zeta[0];
    out[0] = -2.0 * r;
    out[1] = 2.0 * r * zeta[0];
  };
  m.index_weight = [](const VecRef& g, const Sample& z) {
    Vec lam(1);
    lam[0] = z.treatment() - g[1];
    return lam;
  };
  return m;
}

SingleIndexLoss robinson_single_index() {
  SingleIndexLoss s;
  s.id = "robinson_single_index";
  s.target_dim = 1;
  s.nuisance_dim = 2;
  s.nuisance_components = {"m", "e"};
  s.lambda = [](const VecRef& g, const Sample& z) {
    Vec lam(1);
    lam[0] = z.treatment() - g[1];
    return lam;
  };
  s.gamma_fn = [](const VecRef& g, const Sample& z) { return z.y - g[0]; };
  s.phi = [](double x) { return x; };
  s.psi = [](double x) { return 0.5 * x * x; };
  s.offset = [](const VecRef& g, const Sample& z) {
    const double r = z.y - g[0];
    return 0.5 * r * r;
  };
  s.scale = 2.0;
  s.tau = 1.0;
  s.T = 1.0;
  return s;
}

LossModel plugoutcome_naive_loss() {
  LossModel m;
  m.id = "plugoutcome_naive";
  m.target_dim = 1;
  m.nuisance_dim = 2;
  m.nuisance_components = {"f0", "f1"};
  m.regime = Regime::Fast;
  m.shape = ZetaShape::Quadratic;
  m.value = [](const VecRef& zeta, const VecRef& g, const Sample&) {
    const double r = g[1] - g[0] - zeta[0];
    return r * r;
  };
  m.grad_zeta = [](const VecRef& zeta, const VecRef& g, const Sample&, VecOut out) {
    out[0] = -2.0 * (g[1] - g[0] - zeta[0]);
  };
  m.grad_gamma = [](const VecRef& zeta, const VecRef& g, const Sample&, VecOut out) {
    const double r = g[1] - g[0] - zeta[0];
    out[0] = -2.0 * r;
    out[1] = 2.0 * r;
  };
  return m;
}

// ---------------------------------------------------------------------------
// Policy learning

double dr_binary_score(double f0, double f1, double e, double t, double y, double clip_eta) {
  const double ec = clip_propensity(e, clip_eta, nullptr);
  return f1 - f0 + t * (y - f1) / ec - (1.0 - t) * (y - f0) / (1.0 - ec);
}

Vec dr_multi_scores(const VecRef& f, const VecRef& p, int arm, double y, double clip_eta) {
  Vec beta = f;
  if (arm < 0 || arm >= f.size()) throw DomainError("treatment arm out of range");
  double pa = p[arm];
  if (std::isnan(pa)) throw NumericError("propensity is NaN");
  if (pa < clip_eta) {
    g_clip_events.fetch_add(1, std::memory_order_relaxed);
    pa = clip_eta;
  }
  beta[arm] += (y - f[arm]) / pa;
  return beta;
}

void check_simplex(const VecRef& zeta) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < zeta.size(); ++i) {
    if (zeta[i] < -1e-9) throw DomainError("policy output has a negative coordinate");
    total += zeta[i];
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("policy output does not sum to one");
}

LossModel dr_policy_loss_binary(double clip_eta) {
  LossModel m;
  m.id = "dr_policy_binary";
  m.target_dim = 1;
  m.nuisance_dim = 3;
  m.nuisance_components = {"f0", "f1", "e"};
  m.regime = Regime::Slow;
  m.shape = ZetaShape::Linear;
  m.clip_eta = clip_eta;
  m.propensity_slots = {2};
  m.claims_universal_orthogonality = true;
  m.value = [clip_eta](const VecRef& zeta, const VecRef& g, const Sample& z) {
    return dr_binary_score(g[0], g[1], g[2], z.treatment(), z.y, clip_eta) * zeta[0];
  };
  m.grad_zeta = [clip_eta](const VecRef&, const VecRef& g, const Sample& z, VecOut out) {
    out[0] = dr_binary_score(g[0], g[1], g[2], z.treatment(), z.y, clip_eta);
  };
  m.grad_gamma = [clip_eta](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    bool clipped = false;
    const double e = clip_propensity(g[2], clip_eta, &clipped);
    const double t = z.treatment();
    out[0] = zeta[0] * (-1.0 + (1.0 - t) / (1.0 - e));
    out[1] = zeta[0] * (1.0 - t / e);
    out[2] = clipped ? 0.0
                     : zeta[0] * (-t * (z.y - g[1]) / (e * e) - (1.0 - t) * (z.y - g[0]) / ((1.0 - e) * (1.0 - e)));
  };
  return m;
}

LossModel dr_policy_loss_multi(int n, double clip_eta) {
  if (n < 2) throw ConfigError("dr_policy_multi needs at least two treatments");
  LossModel m;
  m.id = "dr_policy_multi";
  m.target_dim = n;
  m.nuisance_dim = 2 * n;
  for (int t = 0; t < n; ++t) m.nuisance_components.push_back("f" + std::to_string(t));
  for (int t = 0; t < n; ++t) m.nuisance_components.push_back("p" + std::to_string(t));
  m.regime = Regime::Slow;
  m.shape = ZetaShape::Linear;
  m.clip_eta = clip_eta;
  for (int t = 0; t < n; ++t) m.propensity_slots.push_back(n + t);
  m.claims_universal_orthogonality = true;
  m.target_domain = check_simplex;
  m.value = [n, clip_eta](const VecRef& zeta, const VecRef& g, const Sample& z) {
    return dr_multi_scores(g.head(n), g.tail(n), z.arm(), z.y, clip_eta).dot(zeta);
  };
  m.grad_zeta = [n, clip_eta](const VecRef&, const VecRef& g, const Sample& z, VecOut out) {
    out = dr_multi_scores(g.head(n), g.tail(n), z.arm(), z.y, clip_eta);
  };
  m.grad_gamma = [n, clip_eta](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    out.setZero();
    const int a = z.arm();
    for (int t = 0; t < n; ++t) out[t] = zeta[t];
    const double p = g[n + a];
    const double pc = std::max(p, clip_eta);
    out[a] = zeta[a] * (1.0 - 1.0 / pc);
    out[n + a] = p < clip_eta ? 0.0 : -zeta[a] * (z.y - g[a]) / (p * p);
  };
  return m;
}

LossModel ips_naive_loss(double clip_eta) {
  LossModel m;
  m.id = "ips_naive";
  m.target_dim = 1;
  m.nuisance_dim = 3;
  m.nuisance_components = {"f0", "f1", "e"};
  m.regime = Regime::Slow;
  m.shape = ZetaShape::Linear;
  m.clip_eta = clip_eta;
  m.propensity_slots = {2};
  auto score = [clip_eta](const VecRef& g, const Sample& z) {
    const double e = clip_propensity(g[2], clip_eta, nullptr);
    const double t = z.treatment();
    return t * z.y / e - (1.0 - t) * z.y / (1.0 - e);
  };
  m.value = [score](const VecRef& zeta, const VecRef& g, const Sample& z) { return score(g, z) * zeta[0]; };
  m.grad_zeta = [score](const VecRef&, const VecRef& g, const Sample& z, VecOut out) { out[0] = score(g, z); };
  m.grad_gamma = [clip_eta](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    bool clipped = false;
    const double e = clip_propensity(g[2], clip_eta, &clipped);
    const double t = z.treatment();
    out[0] = 0.0;
    out[1] = 0.0;
    out[2] = clipped ? 0.0 : zeta[0] * (-t * z.y / (e * e) - (1.0 - t) * z.y / ((1.0 - e) * (1.0 - e)));
  };
  return m;
}

std::vector<LossModel> naive_baseline_losses(double clip_eta) {
  return {ips_naive_loss(clip_eta), plugoutcome_naive_loss()};
}

// ---------------------------------------------------------------------------
// Covariate shift and missing data

LossModel domain_adaptation_loss(double clip_eta) {
  LossModel m;
  m.id = "domain_adapt";
  m.target_dim = 1;
  m.nuisance_dim = 1;
  m.nuisance_components = {"f"};
  m.regime = Regime::Fast;
  m.shape = ZetaShape::Quadratic;
  m.clip_eta = clip_eta;
  auto weight = [clip_eta](double f, bool* clipped) {
    if (!(f >= 0.0)) throw NumericError("domain adaptation: negative or NaN density-ratio weight");
    if (f < clip_eta) {
      g_clip_events.fetch_add(1, std::memory_order_relaxed);
      if (clipped) *clipped = true;
      return clip_eta;
    }
    return f;
  };
  m.value = [weight](const VecRef& zeta, const VecRef& g, const Sample& z) {
    const double r = zeta[0] - z.y;
    return weight(g[0], nullptr) * r * r;
  };
  m.grad_zeta = [weight](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    out[0] = 2.0 * weight(g[0], nullptr) * (zeta[0] - z.y);
  };
  m.grad_gamma = [weight](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    bool clipped = false;
    weight(g[0], &clipped);
    const double r = zeta[0] - z.y;
    out[0] = clipped ? 0.0 : r * r;
  };
  return m;
}

LossModel missing_data_loss(double clip_eta) {
  LossModel m;
  m.id = "missing_data";
  m.target_dim = 1;
  m.nuisance_dim = 2;
  m.nuisance_components = {"h", "e"};
  m.regime = Regime::Fast;
  m.shape = ZetaShape::Quadratic;
  m.clip_eta = clip_eta;
  m.propensity_slots = {1};
  auto check = [clip_eta](double e) {
    if (!(e >= clip_eta) || e > 1.0 + 1e-12) {
      throw NumericError("missing data: observation propensity " + std::to_string(e) + " outside [" +
                         std::to_string(clip_eta) + ", 1]");
    }
  };
  m.value = [check](const VecRef& zeta, const VecRef& g, const Sample& z) {
    check(g[1]);
    const double t = z.treatment();
    const double r = z.y - zeta[0];
    return t * r * r / g[1] - zeta[0] * g[0] * (t - g[1]);
  };
  m.grad_zeta = [check](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    check(g[1]);
    const double t = z.treatment();
    out[0] = -2.0 * t * (z.y - zeta[0]) / g[1] - g[0] * (t - g[1]);
  };
  m.grad_gamma = [check](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    check(g[1]);
    const double t = z.treatment();
    const double r = z.y - zeta[0];
    out[0] = -zeta[0] * (t - g[1]);
    out[1] = -t * r * r / (g[1] * g[1]) + zeta[0] * g[0];
  };
  return m;
}

LossModel square_loss() {
  LossModel m;
  m.id = "square";
  m.target_dim = 1;
  m.nuisance_dim = 0;
  m.regime = Regime::Fast;
  m.shape = ZetaShape::Quadratic;
  m.value = [](const VecRef& zeta, const VecRef&, const Sample& z) {
    const double r = zeta[0] - z.y;
    return r * r;
  };
  m.grad_zeta = [](const VecRef& zeta, const VecRef&, const Sample& z, VecOut out) { out[0] = 2.0 * (zeta[0] - z.y); };
  m.grad_gamma = [](const VecRef&, const VecRef&, const Sample&, VecOut) {};
  m.index_weight = [](const VecRef&, const Sample&) { return Vec::Ones(1); };
  return m;
}

// ---------------------------------------------------------------------------
// Entry game: y is the player's entry decision, g(x) = E[u | x] the
// opponent's entry probability, target (psi(x), Delta).

SingleIndexLoss strategic_single_index() {
  SingleIndexLoss s;
  s.id = "strategic";
  s.target_dim = 2;
  s.nuisance_dim = 1;
  s.nuisance_components = {"g"};
  s.lambda = [](const VecRef& g, const Sample&) {
    Vec lam(2);
    lam << 1.0, g[0];
    return lam;
  };
  s.gamma_fn = [](const VecRef&, const Sample& z) { return z.y; };
  s.phi = logistic;
  s.psi = softplus;
  s.scale = 1.0;
  s.tau = 0.0;
  s.T = 0.25;
  return s;
}

LossModel strategic_loss() {
  LossModel m = make_single_index_loss(strategic_single_index(), Regime::Fast);
  m.grad_gamma = [](const VecRef& zeta, const VecRef& g, const Sample& z, VecOut out) {
    const double s = zeta[0] + zeta[1] * g[0];
    out[0] = (logistic(s) - z.y) * zeta[1];
  };
  return m;
}

// ---------------------------------------------------------------------------

LossModel make_loss(std::string_view id, const LossOptions& o) {
  if (id == "robinson") return robinson_loss();
  if (id == "dr_policy_binary") return dr_policy_loss_binary(o.clip_eta);
  if (id == "dr_policy_multi") return dr_policy_loss_multi(o.n_treatments, o.clip_eta);
  if (id == "domain_adapt") return domain_adaptation_loss(o.clip_eta);
  if (id == "missing_data") return missing_data_loss(o.clip_eta);
  if (id == "ips_naive") return ips_naive_loss(o.clip_eta);
  if (id == "plugoutcome_naive") return plugoutcome_naive_loss();
  if (id == "square") return square_loss();
  if (id == "strategic") return strategic_loss();
  throw ConfigError("unknown loss id '" + std::string(id) + "'");
}

std::vector<std::string> catalog_loss_ids() {
  return {"robinson",     "dr_policy_binary", "dr_policy_multi",   "domain_adapt", "missing_data",
          "ips_naive",    "plugoutcome_naive", "square",           "strategic"};
}

}  // namespace osl
