#include "osl/construct.hpp"

#include <cmath>
#include <limits>

#include "osl/losses.hpp"

namespace osl {

namespace {

double logistic(double s) { return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s)); }

void require_complete(const BaseLossSpec& spec) {
  if (!spec.base.value) throw ConfigError("construct '" + spec.id + "': base loss missing");
  if (!spec.u) throw ConfigError("construct '" + spec.id + "': no mapping for the first-stage target u");
}

// d/dgamma of the (half-)gradient in zeta, K2 x K1.
Mat mixed_hessian(const BaseLossSpec& spec, const VecRef& zeta, const VecRef& gamma, const Sample& z) {
  const LossModel& loss = spec.base;
  const int K1 = loss.nuisance_dim;
  const int K2 = loss.target_dim;
  const double factor = spec.residual ? 0.5 : 1.0;
  Mat H(K2, K1);
  Vec gp = gamma;
  Vec gm = gamma;
  Vec up(K2), dn(K2);
  for (int k = 0; k < K1; ++k) {
    const double h = std::cbrt(std::numeric_limits<double>::epsilon()) * std::max(1.0, std::abs(gamma[k]));
    gp[k] = gamma[k] + h;
    gm[k] = gamma[k] - h;
    loss.gradient_zeta(zeta, gp, z, up);
    loss.gradient_zeta(zeta, gm, z, dn);
    H.col(k) = factor * (up - dn) / (gp[k] - gm[k]);
    gp[k] = gamma[k];
    gm[k] = gamma[k];
  }
  return H;
}

int selector_of(const BaseLossSpec& spec, const Sample& z) {
  const int k = spec.selector(z);
  if (k < 0 || k >= spec.base.nuisance_dim) {
    throw DomainError("construct '" + spec.id + "': selector " + std::to_string(k) + " outside the nuisance components");
  }
  return k;
}

}  // namespace

RieszMode parse_riesz_mode(const std::string& name) {
  if (name == "oracle") return RieszMode::Oracle;
  if (name == "formula") return RieszMode::Formula;
  if (name == "regress") return RieszMode::Regress;
  throw ConfigError("unknown representer mode '" + name + "' (oracle, formula, regress)");
}

BaseLossSpec aipw_base_spec() {
  BaseLossSpec s;
  s.id = "aipw_constructed";
  s.base = plugoutcome_naive_loss();
  s.nuisance_view = View::W;
  s.u = [](const Sample& z) {
    Vec u(1);
    u[0] = z.y;
    return u;
  };
  s.selector = [](const Sample& z) { return z.arm(); };
  s.residual = [](const VecRef& g, const Sample&) { return g[1] - g[0]; };
  s.mode = RieszMode::Oracle;
  return s;
}

BaseLossSpec strategic_base_spec() {
  BaseLossSpec s;
  s.id = "strategic_constructed";
  s.base = strategic_loss();
  s.nuisance_view = View::W;
  s.u = [](const Sample& z) {
    if (z.u.size() < 1) throw ConfigError("strategic construction needs the opponent decision in u");
    Vec u(1);
    u[0] = z.u[0];
    return u;
  };
  s.formula = [](const VecRef& zeta, const VecRef& g, const Sample&) {
    const double s0 = zeta[0] + zeta[1] * g[0];
    const double l = logistic(s0);
    Vec a(2);
    a << zeta[1] * l * (1.0 - l), zeta[1] * l * (1.0 - l) * g[0];
    return a;
  };
  s.mode = RieszMode::Formula;
  return s;
}

int riesz_dim(const BaseLossSpec& spec) {
  const int K1 = spec.base.nuisance_dim;
  return spec.selector ? K1 : spec.base.target_dim * K1;
}

LossModel build_orthogonal_loss(const BaseLossSpec& spec) {
  require_complete(spec);
  const LossModel& base = spec.base;
  if (base.target_dim != 1) {
    throw ConfigError("construct '" + spec.id + "': the correction is defined for scalar targets only (K2 = " +
                      std::to_string(base.target_dim) + ")");
  }
  const int K1 = base.nuisance_dim;
  if (K1 < 1) throw ConfigError("construct '" + spec.id + "': base loss has no nuisance to correct for");

  LossModel m;
  m.id = spec.id;
  m.target_dim = 1;
  m.nuisance_dim = 2 * K1;
  m.nuisance_components = base.nuisance_components;
  for (const auto& c : base.nuisance_components) m.nuisance_components.push_back("a_" + c);
  m.regime = base.regime;
  m.clip_eta = base.clip_eta;
  m.propensity_slots = base.propensity_slots;
  m.shape = spec.residual ? ZetaShape::Quadratic : base.shape;
  m.claims_universal_orthogonality = static_cast<bool>(spec.residual);

  // <a, u - g> with the selector applied.
  auto correction = [spec, K1](const VecRef& gt, const Sample& z) {
    const Vec u = spec.u(z);
    if (spec.selector) {
      if (u.size() != 1) throw ConfigError("construct '" + spec.id + "': selector mode needs a scalar u");
      const int k = selector_of(spec, z);
      return gt[K1 + k] * (u[0] - gt[k]);
    }
    if (u.size() != K1) throw ConfigError("construct '" + spec.id + "': u must have one entry per nuisance component");
    return gt.tail(K1).dot(u - gt.head(K1));
  };

  if (spec.residual) {
    m.value = [spec, correction, K1](const VecRef& zeta, const VecRef& gt, const Sample& z) {
      const double r = zeta[0] - spec.residual(gt.head(K1), z) + correction(gt, z);
      return r * r;
    };
    m.grad_zeta = [spec, correction, K1](const VecRef& zeta, const VecRef& gt, const Sample& z, VecOut out) {
      out[0] = 2.0 * (zeta[0] - spec.residual(gt.head(K1), z) + correction(gt, z));
    };
  } else {
    m.value = [base, correction, K1](const VecRef& zeta, const VecRef& gt, const Sample& z) {
      return base.value(zeta, gt.head(K1), z) + correction(gt, z) * zeta[0];
    };
    m.grad_zeta = [base, correction, K1](const VecRef& zeta, const VecRef& gt, const Sample& z, VecOut out) {
      base.gradient_zeta(zeta, gt.head(K1), z, out);
      out[0] += correction(gt, z);
    };
  }
  if (base.target_domain) m.target_domain = base.target_domain;
  return m;
}

Mat riesz_targets(const BaseLossSpec& spec, const FunctionHandle& theta, const FunctionHandle& g,
                  std::span<const Sample> data) {
  require_complete(spec);
  const int K1 = spec.base.nuisance_dim;
  const int K2 = spec.base.target_dim;
  check_arity(spec.base, theta, g);
  Mat out(static_cast<Eigen::Index>(data.size()), K1 * K2);
  Vec zeta(K2), gamma(K1);
  for (std::size_t i = 0; i < data.size(); ++i) {
    theta.eval(data[i], zeta);
    g.eval(data[i], gamma);
    const Mat H = mixed_hessian(spec, zeta, gamma, data[i]);
    for (int r = 0; r < K2; ++r) {
      out.row(static_cast<Eigen::Index>(i)).segment(r * K1, K1) = H.row(r);
    }
  }
  return out;
}

FunctionHandle riesz_oracle(const BaseLossSpec& spec, const Distribution& dist, const FunctionHandle& theta0,
                            const FunctionHandle& g0) {
  require_complete(spec);
  if (!dist.is_enumerated()) {
    throw ConfigError("oracle representer needs an enumerated distribution; use regress mode instead");
  }
  if (spec.selector && spec.base.target_dim != 1) {
    throw ConfigError("construct '" + spec.id + "': selector mode needs a scalar target");
  }
  auto keys = std::make_shared<const KeyTable>(dist, spec.nuisance_view);
  const int K1 = spec.base.nuisance_dim;
  const int D = riesz_dim(spec);
  const auto& atoms = dist.atoms();
  const auto& weights = dist.weights();
  const Mat H = riesz_targets(spec, theta0, g0, atoms);

  Mat num = Mat::Zero(keys->size(), D);
  Mat den = Mat::Zero(keys->size(), spec.selector ? K1 : 1);
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    const int key = keys->atom_keys()[i];
    const double w = weights[i];
    const auto row = static_cast<Eigen::Index>(i);
    num.row(key) += w * H.row(row);
    if (spec.selector) {
      den(key, selector_of(spec, atoms[i])) += w;
    } else {
      den(key, 0) += w;
    }
  }
  Mat values(keys->size(), D);
  for (int k = 0; k < keys->size(); ++k) {
    for (int j = 0; j < D; ++j) {
      const double d = spec.selector ? den(k, j) : den(k, 0);
      if (!(d > 0.0)) {
        throw NumericError("construct '" + spec.id + "': selector component " + std::to_string(j) +
                           " has zero probability at nuisance key " + std::to_string(k));
      }
      values(k, j) = num(k, j) / d;
    }
  }
  return FunctionHandle::tabular(keys, std::move(values));
}

FunctionHandle riesz_formula(const BaseLossSpec& spec, const FunctionHandle& theta, const FunctionHandle& g) {
  if (!spec.formula) throw ConfigError("construct '" + spec.id + "': no closed-form representer declared");
  const int K1 = spec.base.nuisance_dim;
  const int K2 = spec.base.target_dim;
  const int D = riesz_dim(spec);
  auto formula = spec.formula;
  return FunctionHandle::opaque(spec.nuisance_view, D, [formula, theta, g, K1, K2, D](const Sample& s, VecOut out) {
    Vec zeta(K2), gamma(K1);
    theta.eval(s, zeta);
    g.eval(s, gamma);
    const Vec a = formula(zeta, gamma, s);
    if (a.size() != D) throw ConfigError("closed-form representer returned the wrong dimension");
    out = a;
  });
}

FunctionHandle riesz_regress(const BaseLossSpec& spec, const FunctionHandle& theta_init, const FunctionHandle& g_hat,
                             std::span<const Sample> data, const LearnerConfig& learner) {
  if (data.empty()) throw ConfigError("representer regression: empty data");
  const Mat targets = riesz_targets(spec, theta_init, g_hat, data);
  LearnerConfig cfg = learner;
  cfg.view = spec.nuisance_view;
  const FunctionHandle num = fit_regression(cfg, data, targets).handle;
  if (!spec.selector) return num;

  const int K1 = spec.base.nuisance_dim;
  Mat ind = Mat::Zero(static_cast<Eigen::Index>(data.size()), K1);
  for (std::size_t i = 0; i < data.size(); ++i) ind(static_cast<Eigen::Index>(i), selector_of(spec, data[i])) = 1.0;
  const FunctionHandle prob = fit_regression(cfg, data, ind).handle;
  const double floor = spec.base.clip_eta > 0.0 ? spec.base.clip_eta : 1e-3;
  return FunctionHandle::opaque(spec.nuisance_view, K1, [num, prob, floor, K1](const Sample& s, VecOut out) {
    Vec a(K1), p(K1);
    num.eval(s, a);
    prob.eval(s, p);
    out = a.array() / p.array().max(floor);
  });
}

FourFoldResult four_fold_fit(const BaseLossSpec& spec, std::span<const Sample> data, const FourFoldLearners& learners,
                             std::uint64_t seed, bool shuffled) {
  if (data.size() < 4) throw ConfigError("four-fold fit needs at least 4 samples");
  if (!learners.nuisance || !learners.initial || !learners.riesz || !learners.final_stage) {
    throw ConfigError("four-fold fit: every stage needs a learner");
  }
  const LossModel corrected = build_orthogonal_loss(spec);
  FourFoldResult res;
  res.plan = split(data.size(), 4, seed, shuffled);
  assert_partition(res.plan);
  const auto& f = res.plan.folds;
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      assert_no_leakage(f[a], f[b], "four-fold fit (S" + std::to_string(a + 1) + "/S" + std::to_string(b + 1) + ")");
    }
  }
  const auto s1 = gather(data, f[0]);
  const auto s2 = gather(data, f[1]);
  const auto s3 = gather(data, f[2]);
  const auto s4 = gather(data, f[3]);
  res.g_hat = with_stage("fold S1 (nuisance)", [&] { return learners.nuisance(s1); });
  res.theta_init = with_stage("fold S2 (initial target)", [&] {
    return learners.initial(spec.base, res.g_hat, s2).handle;
  });
  res.a_hat = with_stage("fold S3 (representer)", [&] { return learners.riesz(res.theta_init, res.g_hat, s3); });
  const FunctionHandle g_tilde = FunctionHandle::stack({res.g_hat, res.a_hat});
  FittedModel fit = with_stage("fold S4 (corrected target)", [&] {
    check_arity(corrected, FunctionHandle::constant(View::W, Vec::Zero(1)), g_tilde);
    return learners.final_stage(corrected, g_tilde, s4);
  });
  res.theta = fit.handle;
  res.diagnostics = fit.diagnostics;
  return res;
}

}  // namespace osl
