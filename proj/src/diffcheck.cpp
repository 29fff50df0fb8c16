#include "osl/diffcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace osl {

namespace {

struct Stencil {
  std::vector<std::pair<double, double>> points;  // (offset in steps, coefficient)
};

Stencil stencil(int order) {
  switch (order) {
    case 0: return {{{0.0, 1.0}}};
    case 1: return {{{-1.0, -0.5}, {1.0, 0.5}}};
    case 2: return {{{-1.0, 1.0}, {0.0, -2.0}, {1.0, 1.0}}};
    default: throw ConfigError("derivative order must be 0, 1 or 2 per slot");
  }
}

double central(const std::function<double(double, double)>& F, int ot, int os, double ht, double hs) {
  const Stencil st = stencil(ot);
  const Stencil ss = stencil(os);
  double acc = 0.0;
  for (const auto& [pt, ct] : st.points) {
    for (const auto& [ps, cs] : ss.points) {
      const double v = F(pt * ht, ps * hs);
      if (!std::isfinite(v)) throw NumericError("functional is non-finite on the finite-difference stencil");
      acc += ct * cs * v;
    }
  }
  return acc / (std::pow(ht, ot) * std::pow(hs, os));
}

// Values of a handle at every atom, one row per atom.
Mat eval_on_atoms(const FunctionHandle& f, const std::vector<Sample>& atoms) {
  Mat out(static_cast<Eigen::Index>(atoms.size()), f.out_dim());
  Vec buf(f.out_dim());
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    f.eval(atoms[i], buf);
    out.row(static_cast<Eigen::Index>(i)) = buf.transpose();
  }
  return out;
}

// Exact risk along (theta + t * dtheta, g + s * dg) on the atoms of an
// enumerated distribution, bypassing handle construction on every stencil point.
class AtomRisk {
 public:
  AtomRisk(const LossModel& loss, const Distribution& dist) : loss_(loss), atoms_(dist.atoms()), w_(dist.weights()) {}

  const std::vector<Sample>& atoms() const { return atoms_; }

  double operator()(const Mat& theta, const Mat& dtheta, double t, const Mat& g, const Mat& dg, double s) const {
    Vec zeta(loss_.target_dim);
    Vec gamma(loss_.nuisance_dim);
    double sum = 0.0;
    double comp = 0.0;
    for (std::size_t i = 0; i < atoms_.size(); ++i) {
      if (w_[i] == 0.0) continue;
      const auto r = static_cast<Eigen::Index>(i);
      zeta = theta.row(r).transpose();
      if (t != 0.0) zeta += t * dtheta.row(r).transpose();
      if (loss_.nuisance_dim > 0) {
        gamma = g.row(r).transpose();
        if (s != 0.0) gamma += s * dg.row(r).transpose();
      }
      const double v = w_[i] * loss_.value(zeta, gamma, atoms_[i]);
      const double tt = sum + v;
      comp += std::abs(sum) >= std::abs(v) ? (sum - tt) + v : (v - tt) + sum;
      sum = tt;
    }
    return sum + comp;
  }

 private:
  const LossModel& loss_;
  const std::vector<Sample>& atoms_;
  const std::vector<double>& w_;
};

double base_scale(const Mat& a, const Mat& b) {
  double s = 1.0;
  if (a.size() > 0) s = std::max(s, a.cwiseAbs().maxCoeff());
  if (b.size() > 0) s = std::max(s, b.cwiseAbs().maxCoeff());
  return s;
}

void finalize(OrthoReport& r, bool one_sided) {
  r.max_abs = 0.0;
  double worst_err = 0.0;
  double most_negative = 0.0;
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    r.max_abs = std::max(r.max_abs, std::abs(r.values[i]));
    worst_err = std::max(worst_err, r.error_estimates[i]);
    most_negative = std::min(most_negative, r.values[i]);
  }
  const double stat = one_sided ? -most_negative : r.max_abs;
  if (stat <= r.tolerance) {
    r.verdict = Verdict::Pass;
  } else if (stat - worst_err <= r.tolerance) {
    r.verdict = Verdict::Inconclusive;
  } else {
    r.verdict = Verdict::Fail;
  }
}

void require_enumerated(const CheckTarget& target) {
  if (!target.dist.is_enumerated()) {
    throw ConfigError("certificates need an enumerated distribution (exact expectations)");
  }
  if (!target.theta_star.valid()) throw ConfigError("certificate target is missing theta*");
}

}  // namespace

double default_fd_step(int total_order, double scale) {
  const double eps = std::numeric_limits<double>::epsilon();
  return std::pow(eps, 1.0 / (2.0 + std::max(1, total_order))) * std::max(1.0, scale);
}

FdResult stencil_derivative(const std::function<double(double, double)>& F, int order_t, int order_s, double step_t,
                            double step_s) {
  if (!(step_t > 0.0) || !(step_s > 0.0)) throw ConfigError("finite-difference step must be positive");
  const double coarse = central(F, order_t, order_s, step_t, step_s);
  const double fine = central(F, order_t, order_s, 0.5 * step_t, 0.5 * step_s);
  FdResult r;
  r.value = (4.0 * fine - coarse) / 3.0;
  r.error_estimate = std::abs(r.value - fine);
  r.richardson_levels = 1;
  return r;
}

FdResult dir_derivative(const DerivativeRequest& req) {
  if (!req.functional) throw ConfigError("derivative request has no functional");
  if (req.theta_order > 0 && !req.theta_dir.valid()) throw ConfigError("missing theta direction");
  if (req.g_order > 0 && !req.g_dir.valid()) throw ConfigError("missing nuisance direction");
  if (req.theta_order > 0 && req.theta_dir.out_dim() != req.theta_bar.out_dim()) {
    throw ConfigError("theta direction dimension mismatch");
  }
  if (req.g_order > 0 && req.g_dir.out_dim() != req.g_bar.out_dim()) {
    throw ConfigError("nuisance direction dimension mismatch");
  }
  const double h = req.step > 0.0 ? req.step : default_fd_step(req.theta_order + req.g_order, req.scale);
  auto F = [&](double t, double s) {
    const FunctionHandle th = req.theta_order > 0 ? FunctionHandle::composite(req.theta_bar, t, req.theta_dir)
                                                  : req.theta_bar;
    const FunctionHandle g = req.g_order > 0 ? FunctionHandle::composite(req.g_bar, s, req.g_dir) : req.g_bar;
    return req.functional(th, g);
  };
  return stencil_derivative(F, req.theta_order, req.g_order, h, h);
}

FunctionHandle random_direction(std::shared_ptr<const KeyTable> keys, int out_dim, Rng& rng) {
  Mat values(keys->size(), out_dim);
  for (Eigen::Index k = 0; k < values.rows(); ++k) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) values(k, j) = rng.uniform(-1.0, 1.0);
  }
  double norm2 = 0.0;
  const auto& mass = keys->key_mass();
  for (Eigen::Index k = 0; k < values.rows(); ++k) norm2 += mass[static_cast<std::size_t>(k)] * values.row(k).squaredNorm();
  if (norm2 > 0.0) values /= std::sqrt(norm2);
  return FunctionHandle::tabular(std::move(keys), std::move(values));
}

const char* verdict_name(Verdict v) {
  switch (v) {
    case Verdict::Pass: return "pass";
    case Verdict::Fail: return "fail";
    case Verdict::Inconclusive: return "inconclusive";
  }
  return "inconclusive";
}

OrthoReport check_orthogonality(const LossModel& loss, const CheckTarget& target, const CheckOptions& options) {
  require_enumerated(target);
  if (options.n_dirs < 1) throw ConfigError("orthogonality check needs at least one direction");
  check_arity(loss, target.theta_star, target.g0);
  const auto xkeys = std::make_shared<const KeyTable>(target.dist, View::X);
  const auto wkeys = std::make_shared<const KeyTable>(target.dist, View::W);
  const AtomRisk risk(loss, target.dist);
  const auto& atoms = risk.atoms();
  const Mat theta_star = eval_on_atoms(target.theta_star, atoms);
  const Mat g0 = loss.nuisance_dim > 0 ? eval_on_atoms(target.g0, atoms) : Mat(atoms.size(), 0);
  const Mat zero_t = Mat::Zero(theta_star.rows(), theta_star.cols());

  OrthoReport rep;
  rep.loss_id = loss.id;
  rep.assumption = options.universal ? "universal_orthogonality" : "orthogonality";
  rep.n_dirs = options.n_dirs;
  rep.seed = options.seed;
  rep.functional_scale = risk(theta_star, zero_t, 0.0, g0, g0, 0.0);
  rep.tolerance = options.tolerance > 0.0 ? options.tolerance : 1e-6 * std::max(1.0, std::abs(rep.functional_scale));

  const Rng root(options.seed, "orthocheck");
  for (int d = 0; d < options.n_dirs; ++d) {
    Rng rng = root.derive("direction", static_cast<std::uint64_t>(d));
    const Mat dtheta = eval_on_atoms(random_direction(xkeys, loss.target_dim, rng), atoms);
    Mat dg(atoms.size(), loss.nuisance_dim);
    if (loss.nuisance_dim > 0) dg = eval_on_atoms(random_direction(wkeys, loss.nuisance_dim, rng), atoms);
    Mat theta_bar = theta_star;
    if (options.universal) {
      const double s = rng.uniform();
      const double r = rng.uniform();
      if (target.class_members.size() >= 2) {
        const auto a = rng.below(target.class_members.size());
        const auto b = rng.below(target.class_members.size());
        theta_bar += s * (eval_on_atoms(target.class_members[a], atoms) - theta_star) +
                     r * (eval_on_atoms(target.class_members[b], atoms) - theta_star);
      } else {
        theta_bar += s * eval_on_atoms(random_direction(xkeys, loss.target_dim, rng), atoms) +
                     r * eval_on_atoms(random_direction(xkeys, loss.target_dim, rng), atoms);
      }
    }
    FdResult fd;
    if (loss.nuisance_dim == 0) {
      fd = FdResult{};  // no nuisance, nothing to differentiate
    } else {
      const double h = options.step > 0.0 ? options.step : default_fd_step(2, base_scale(theta_bar, g0));
      fd = stencil_derivative([&](double t, double s) { return risk(theta_bar, dtheta, t, g0, dg, s); }, 1, 1, h, h);
    }
    rep.values.push_back(fd.value);
    rep.error_estimates.push_back(fd.error_estimate);
  }
  finalize(rep, false);
  return rep;
}

OrthoReport check_first_order(const LossModel& loss, const CheckTarget& target, const CheckOptions& options) {
  require_enumerated(target);
  if (options.n_dirs < 1) throw ConfigError("first-order check needs at least one direction");
  check_arity(loss, target.theta_star, target.g0);
  const auto xkeys = std::make_shared<const KeyTable>(target.dist, View::X);
  const AtomRisk risk(loss, target.dist);
  const auto& atoms = risk.atoms();
  const Mat theta_star = eval_on_atoms(target.theta_star, atoms);
  const Mat g0 = loss.nuisance_dim > 0 ? eval_on_atoms(target.g0, atoms) : Mat(atoms.size(), 0);
  const Mat no_dg = Mat::Zero(g0.rows(), g0.cols());

  OrthoReport rep;
  rep.loss_id = loss.id;
  rep.assumption = "first_order";
  rep.seed = options.seed;
  rep.functional_scale = risk(theta_star, theta_star, 0.0, g0, no_dg, 0.0);
  rep.tolerance = options.tolerance > 0.0 ? options.tolerance : 1e-6 * std::max(1.0, std::abs(rep.functional_scale));

  std::vector<Mat> dirs;
  if (!target.class_members.empty()) {
    for (const auto& m : target.class_members) dirs.push_back(eval_on_atoms(m, atoms) - theta_star);
  } else {
    // Unconstrained class: both signs of random directions.
    const Rng root(options.seed, "first_order");
    for (int d = 0; d < options.n_dirs; ++d) {
      Rng rng = root.derive("direction", static_cast<std::uint64_t>(d));
      Mat h = eval_on_atoms(random_direction(xkeys, loss.target_dim, rng), atoms);
      dirs.push_back(h);
      dirs.push_back(-h);
    }
  }
  const double h = options.step > 0.0 ? options.step : default_fd_step(1, base_scale(theta_star, g0));
  for (const auto& d : dirs) {
    const FdResult fd =
        stencil_derivative([&](double t, double) { return risk(theta_star, d, t, g0, no_dg, 0.0); }, 1, 0, h, h);
    rep.values.push_back(fd.value);
    rep.error_estimates.push_back(fd.error_estimate);
  }
  rep.n_dirs = static_cast<int>(dirs.size());
  finalize(rep, true);
  return rep;
}

Curvature estimate_curvature(const LossModel& loss, const CheckTarget& target, int n_dirs, std::uint64_t seed,
                             NormKind norm) {
  require_enumerated(target);
  if (n_dirs < 1) throw ConfigError("curvature estimate needs at least one direction");
  check_arity(loss, target.theta_star, target.g0);
  const auto xkeys = std::make_shared<const KeyTable>(target.dist, View::X);
  const AtomRisk risk(loss, target.dist);
  const auto& atoms = risk.atoms();
  const auto& w = target.dist.weights();
  const Mat theta_star = eval_on_atoms(target.theta_star, atoms);
  const Mat g0 = loss.nuisance_dim > 0 ? eval_on_atoms(target.g0, atoms) : Mat(atoms.size(), 0);
  const Mat no_dg = Mat::Zero(g0.rows(), g0.cols());
  const double h = default_fd_step(2, base_scale(theta_star, g0));

  Curvature c;
  c.lambda_hat = std::numeric_limits<double>::infinity();
  c.beta1_hat = -std::numeric_limits<double>::infinity();
  const Rng root(seed, "curvature");
  for (int d = 0; d < n_dirs; ++d) {
    Rng rng = root.derive("direction", static_cast<std::uint64_t>(d));
    const Mat dir = eval_on_atoms(random_direction(xkeys, loss.target_dim, rng), atoms);
    double norm2 = 0.0;
    for (std::size_t i = 0; i < atoms.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      if (norm == NormKind::LambdaWeighted) {
        if (!loss.index_weight) throw ConfigError("Lambda-weighted norm needs a single-index loss");
        const double ip = loss.index_weight(g0.row(r).transpose(), atoms[i]).dot(dir.row(r).transpose());
        norm2 += w[i] * ip * ip;
      } else if (norm == NormKind::L4) {
        const double q = dir.row(r).squaredNorm();
        norm2 += w[i] * q * q;
      } else {
        norm2 += w[i] * dir.row(r).squaredNorm();
      }
    }
    if (norm == NormKind::L4) norm2 = std::sqrt(norm2);
    if (!(norm2 > 1e-300)) {
      ++c.skipped;
      continue;
    }
    const FdResult fd =
        stencil_derivative([&](double t, double) { return risk(theta_star, dir, t, g0, no_dg, 0.0); }, 2, 0, h, h);
    const double ratio = fd.value / norm2;
    c.lambda_hat = std::min(c.lambda_hat, ratio);
    c.beta1_hat = std::max(c.beta1_hat, ratio);
    ++c.used;
  }
  if (c.used == 0) {
    c.lambda_hat = 0.0;
    c.beta1_hat = 0.0;
  }
  return c;
}

}  // namespace osl
