#include "osl/learners.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "osl/rng.hpp"

namespace osl {

namespace {

void require_nonempty(std::span<const Sample> data, const char* what) {
  if (data.empty()) throw ConfigError(std::string(what) + ": empty data");
}

void require_rows(std::span<const Sample> data, const Mat& targets, const char* what) {
  require_nonempty(data, what);
  if (targets.rows() != static_cast<Eigen::Index>(data.size())) {
    throw ConfigError(std::string(what) + ": one target row per sample required");
  }
  if (!targets.allFinite()) throw NumericError(std::string(what) + ": non-finite targets");
}

Mat view_matrix(std::span<const Sample> data, View view) {
  const Eigen::Index d = data.front().view(view).size();
  Mat out(static_cast<Eigen::Index>(data.size()), d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto v = data[i].view(view);
    if (v.size() != d) throw ConfigError("inconsistent input dimensions across samples");
    out.row(static_cast<Eigen::Index>(i)) = v.transpose();
  }
  return out;
}

// Nuisance values at every sample, one row per sample.
Mat nuisance_matrix(const LossModel& loss, const FunctionHandle& g, std::span<const Sample> data) {
  Mat out(static_cast<Eigen::Index>(data.size()), loss.nuisance_dim);
  if (loss.nuisance_dim == 0) return out;
  Vec buf(loss.nuisance_dim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    g.eval(data[i], buf);
    out.row(static_cast<Eigen::Index>(i)) = buf.transpose();
  }
  return out;
}

Vec normalized_weights(std::span<const double> weights, std::size_t n) {
  if (weights.empty()) return Vec::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n));
  if (weights.size() != n) throw ConfigError("one weight per sample required");
  Vec w(static_cast<Eigen::Index>(n));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(weights[i] >= 0.0)) throw ConfigError("sample weights must be nonnegative");
    w[static_cast<Eigen::Index>(i)] = weights[i];
    total += weights[i];
  }
  if (!(total > 0.0)) throw ConfigError("sample weights sum to zero");
  return w / total;
}

double weighted_sum(const std::vector<double>& values, const Vec& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += w[static_cast<Eigen::Index>(i)] * values[i];
  return s;
}

Vec project_simplex(const Vec& v) {
  const Eigen::Index n = v.size();
  std::vector<double> u(v.data(), v.data() + n);
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0;
  double tau = 0.0;
  for (Eigen::Index j = 0; j < n; ++j) {
    cum += u[static_cast<std::size_t>(j)];
    const double t = (cum - 1.0) / static_cast<double>(j + 1);
    if (u[static_cast<std::size_t>(j)] - t > 0.0) tau = t;
  }
  return (v.array() - tau).cwiseMax(0.0).matrix();
}

// Solves a symmetric positive semidefinite system, refusing singular ones.
Mat solve_spd(const Mat& A, const Mat& B, const char* what) {
  Eigen::LDLT<Mat> ldlt(A);
  if (ldlt.info() != Eigen::Success) throw NumericError(std::string(what) + ": factorization failed");
  const Vec d = ldlt.vectorD();
  const double dmax = d.cwiseAbs().maxCoeff();
  if (!(dmax > 0.0) || d.minCoeff() <= 1e-13 * dmax) {
    throw NumericError(std::string(what) + ": singular system; add regularization (lambda_reg > 0)");
  }
  Mat X = ldlt.solve(B);
  // One step of iterative refinement.
  X += ldlt.solve(B - A * X);
  return X;
}

struct LinearProblem {
  const LossModel& loss;
  std::span<const Sample> data;
  Mat phi;    // n x p
  Mat gamma;  // n x K1
  int K;
  Vec wts;    // sums to one

  double objective(const Mat& W) const {
    Vec zeta(K);
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      zeta.noalias() = W.transpose() * phi.row(r).transpose();
      sum += wts[r] * loss.value(zeta, gamma.row(r).transpose(), data[i]);
    }
    return sum;
  }

  Mat gradient(const Mat& W) const {
    Mat G = Mat::Zero(W.rows(), W.cols());
    Vec zeta(K);
    Vec grad(K);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      zeta.noalias() = W.transpose() * phi.row(r).transpose();
      loss.gradient_zeta(zeta, gamma.row(r).transpose(), data[i], grad);
      G.noalias() += (wts[r] * phi.row(r).transpose()) * grad.transpose();
    }
    return G;
  }
};

// Projected gradient descent with backtracking; the trace is monotone.
Mat projected_descent(const std::function<double(const Mat&)>& f, const std::function<Mat(const Mat&)>& grad,
                      const ThetaClass& cls, Mat W, const ErmOptions& opt, Diagnostics& diag) {
  W = cls.project(W);
  double fw = f(W);
  diag.objective_trace.push_back(fw);
  double eta = opt.step > 0.0 ? opt.step : 1.0;
  diag.converged = false;
  for (int it = 0; it < opt.max_iters; ++it) {
    const Mat G = grad(W);
    bool accepted = false;
    Mat Wn;
    double fn = fw;
    for (int bt = 0; bt < 60; ++bt) {
      Wn = cls.project(W - eta * G);
      const Mat dW = Wn - W;
      fn = f(Wn);
      if (fn <= fw + (G.array() * dW.array()).sum() + dW.squaredNorm() / (2.0 * eta) + 1e-15 * std::abs(fw)) {
        accepted = true;
        break;
      }
      eta *= 0.5;
    }
    diag.iterations = it + 1;
    const double pg = (Wn - W).norm() / eta;
    if (!accepted || fn > fw) {
      // No monotone progress possible at machine precision.
      diag.kkt_residual = pg;
      diag.converged = pg <= std::sqrt(opt.tol);
      break;
    }
    W = Wn;
    fw = fn;
    diag.objective_trace.push_back(fw);
    diag.kkt_residual = pg;
    if (pg <= opt.tol) {
      diag.converged = true;
      break;
    }
    eta *= 2.0;
  }
  if (!diag.converged) {
    diag.warnings.push_back("projected gradient stopped before tolerance; gradient norm " +
                            std::to_string(diag.kkt_residual));
  }
  diag.objective = fw;
  return W;
}

}  // namespace

Mat design_matrix(std::span<const Sample> data, const FeatureMap& features, View view) {
  Mat out(static_cast<Eigen::Index>(data.size()), features.dim());
  Vec buf(features.dim());
  for (std::size_t i = 0; i < data.size(); ++i) {
    features.features(data[i], view, buf);
    out.row(static_cast<Eigen::Index>(i)) = buf.transpose();
  }
  if (!out.allFinite()) throw NumericError("design matrix has non-finite entries");
  return out;
}

// ---------------------------------------------------------------------------
// Regression learners

FittedModel fit_ridge(std::span<const Sample> data, const Mat& targets, double lambda_reg, const FeatureMap& features,
                      View view) {
  require_rows(data, targets, "ridge");
  if (!(lambda_reg >= 0.0)) throw ConfigError("ridge: lambda_reg must be >= 0");
  const Mat X = design_matrix(data, features, view);
  Mat A = X.transpose() * X;
  A.diagonal().array() += lambda_reg;
  const Mat B = X.transpose() * targets;
  Mat W = solve_spd(A, B, "ridge");
  FittedModel fm;
  fm.diagnostics.kkt_residual = (A * W - B).norm();
  fm.diagnostics.objective = ((X * W - targets).squaredNorm() + lambda_reg * W.squaredNorm());
  fm.handle = FunctionHandle::linear(view, features, W);
  return fm;
}

double lasso_kkt_residual(const Mat& X, const Vec& y, const Vec& w, double lambda_1, const std::vector<bool>& penalized) {
  const double n = static_cast<double>(X.rows());
  const Vec g = X.transpose() * (y - X * w) / n;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    double r = 0.0;
    if (!penalized[static_cast<std::size_t>(j)]) {
      r = std::abs(g[j]);
    } else if (w[j] != 0.0) {
      r = std::abs(g[j] - lambda_1 * (w[j] > 0.0 ? 1.0 : -1.0));
    } else {
      r = std::max(0.0, std::abs(g[j]) - lambda_1);
    }
    worst = std::max(worst, r);
  }
  return worst;
}

FittedModel fit_lasso(std::span<const Sample> data, const Mat& targets, const LassoOptions& opt,
                      const FeatureMap& features, View view) {
  require_rows(data, targets, "lasso");
  if (!(opt.lambda_1 >= 0.0)) throw ConfigError("lasso: lambda_1 must be >= 0");
  if (opt.max_iters < 1 || !(opt.tol > 0.0)) throw ConfigError("lasso: max_iters >= 1 and tol > 0 required");
  const Mat X = design_matrix(data, features, view);
  const Eigen::Index p = X.cols();
  const double n = static_cast<double>(X.rows());
  std::vector<bool> penalized(static_cast<std::size_t>(p), true);
  if (features.kind == FeatureMap::Kind::Intercept && !opt.penalize_intercept) penalized[0] = false;
  const Vec z = X.colwise().squaredNorm().transpose() / n;

  FittedModel fm;
  Mat W = Mat::Zero(p, targets.cols());
  for (Eigen::Index c = 0; c < targets.cols(); ++c) {
    const Vec y = targets.col(c);
    Vec w = Vec::Zero(p);
    Vec r = y;
    bool converged = false;
    int it = 0;
    for (; it < opt.max_iters; ++it) {
      double max_change = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (z[j] == 0.0) continue;
        const double rho = X.col(j).dot(r) / n + z[j] * w[j];
        const double lam = penalized[static_cast<std::size_t>(j)] ? opt.lambda_1 : 0.0;
        const double wn = (rho > lam ? rho - lam : (rho < -lam ? rho + lam : 0.0)) / z[j];
        const double delta = wn - w[j];
        if (delta != 0.0) {
          r -= delta * X.col(j);
          w[j] = wn;
          max_change = std::max(max_change, std::abs(delta));
        }
      }
      if (max_change <= opt.tol) {
        converged = true;
        ++it;
        break;
      }
    }
    const double kkt = lasso_kkt_residual(X, y, w, opt.lambda_1, penalized);
    fm.diagnostics.kkt_residual = std::max(fm.diagnostics.kkt_residual, kkt);
    fm.diagnostics.iterations = std::max(fm.diagnostics.iterations, it);
    if (!converged) {
      fm.diagnostics.converged = false;
      fm.diagnostics.warnings.push_back("lasso reached max_iters for output " + std::to_string(c) +
                                        "; KKT residual " + std::to_string(kkt));
    }
    for (Eigen::Index j = 0; j < p; ++j) {
      if (w[j] != 0.0) fm.diagnostics.active_set.push_back(static_cast<int>(j));
    }
    W.col(c) = w;
  }
  fm.handle = FunctionHandle::linear(view, features, W);
  return fm;
}

FittedModel fit_knn(std::span<const Sample> data, const Mat& targets, int k, View view) {
  require_rows(data, targets, "knn");
  if (k < 1 || static_cast<std::size_t>(k) > data.size()) throw ConfigError("knn: k must lie in [1, n]");
  auto points = std::make_shared<const Mat>(view_matrix(data, view));
  auto values = std::make_shared<const Mat>(targets);
  const int out = static_cast<int>(targets.cols());
  FittedModel fm;
  fm.handle = FunctionHandle::opaque(view, out, [points, values, k, view](const Sample& s, VecOut o) {
    const auto q = s.view(view);
    const Eigen::Index n = points->rows();
    std::vector<std::pair<double, Eigen::Index>> d(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = {(points->row(i).transpose() - q).squaredNorm(), i};
    std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
    std::sort(d.begin(), d.begin() + k);
    o.setZero();
    for (int j = 0; j < k; ++j) o += values->row(d[static_cast<std::size_t>(j)].second).transpose();
    o /= static_cast<double>(k);
  });
  return fm;
}

FittedModel fit_kernel(std::span<const Sample> data, const Mat& targets, double bandwidth, View view) {
  require_rows(data, targets, "kernel");
  if (!(bandwidth > 0.0)) throw ConfigError("kernel: bandwidth must be > 0");
  auto points = std::make_shared<const Mat>(view_matrix(data, view));
  auto values = std::make_shared<const Mat>(targets);
  const int out = static_cast<int>(targets.cols());
  FittedModel fm;
  fm.handle = FunctionHandle::opaque(view, out, [points, values, bandwidth, view](const Sample& s, VecOut o) {
    const auto q = s.view(view);
    const double inv = 1.0 / (2.0 * bandwidth * bandwidth);
    double norm = 0.0;
    o.setZero();
    for (Eigen::Index i = 0; i < points->rows(); ++i) {
      const double w = std::exp(-(points->row(i).transpose() - q).squaredNorm() * inv);
      norm += w;
      o += w * values->row(i).transpose();
    }
    o /= std::max(norm, 1e-12);
  });
  return fm;
}

// ---------------------------------------------------------------------------
// Target classes

ThetaClass ThetaClass::finite(std::vector<FunctionHandle> members) {
  if (members.empty()) throw ConfigError("finite class needs at least one member");
  ThetaClass c;
  c.kind = Kind::Finite;
  c.out_dim = members.front().out_dim();
  c.view = members.front().view();
  for (const auto& m : members) {
    if (m.out_dim() != c.out_dim) throw ConfigError("finite class members disagree on output dimension");
  }
  c.members = std::move(members);
  return c;
}

ThetaClass ThetaClass::linear(FeatureMap features, int out_dim, View view) {
  ThetaClass c;
  c.kind = Kind::Linear;
  c.features = std::move(features);
  c.out_dim = out_dim;
  c.view = view;
  return c;
}

FunctionHandle ThetaClass::make(const Mat& weights) const { return FunctionHandle::linear(view, features, weights); }

Mat ThetaClass::project(const Mat& W) const {
  switch (constraint) {
    case Constraint::None: return W;
    case Constraint::Box: return W.cwiseMax(lo).cwiseMin(hi);
    case Constraint::Ball: {
      const double n = W.norm();
      return n > radius ? Mat(W * (radius / n)) : W;
    }
    case Constraint::Simplex: {
      Mat out = W;
      for (Eigen::Index r = 0; r < W.rows(); ++r) out.row(r) = project_simplex(W.row(r).transpose()).transpose();
      return out;
    }
  }
  return W;
}

// ---------------------------------------------------------------------------
// Plug-in ERM

FittedModel plugin_erm(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> data,
                       const ThetaClass& cls, const ErmOptions& opt) {
  return weighted_erm(loss, g_hat, data, {}, cls, opt);
}

FittedModel weighted_erm(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> data,
                         std::span<const double> weights, const ThetaClass& cls, const ErmOptions& opt) {
  require_nonempty(data, "plugin ERM");
  const Vec wts = normalized_weights(weights, data.size());
  FittedModel fm;
  if (cls.kind == ThetaClass::Kind::Finite) {
    if (cls.members.empty()) throw ConfigError("plugin ERM: empty finite class");
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < cls.members.size(); ++k) {
      const double r = weights.empty() ? empirical_risk(loss, cls.members[k], g_hat, data)
                                       : weighted_sum(pointwise_losses(loss, cls.members[k], g_hat, data), wts);
      fm.diagnostics.objective_trace.push_back(r);
      if (r < best) {
        best = r;
        best_k = k;
      }
    }
    fm.handle = cls.members[best_k];
    fm.diagnostics.selected_index = best_k;
    fm.diagnostics.objective = best;
    return fm;
  }

  if (cls.out_dim != loss.target_dim) throw ConfigError("plugin ERM: class output dimension does not match the loss");
  check_arity(loss, cls.make(Mat::Zero(cls.weight_rows(), cls.out_dim)), g_hat);
  LinearProblem prob{loss, data, design_matrix(data, cls.features, cls.view), nuisance_matrix(loss, g_hat, data),
                     cls.out_dim, wts};
  const Eigen::Index p = prob.phi.rows() > 0 ? prob.phi.cols() : 0;
  Mat W = Mat::Zero(p, cls.out_dim);

  if (loss.shape == ZetaShape::Linear) {
    // Objective = const + <C, W>.
    Vec zero = Vec::Zero(cls.out_dim);
    Vec grad(cls.out_dim);
    Mat C = Mat::Zero(p, cls.out_dim);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      loss.gradient_zeta(zero, prob.gamma.row(r).transpose(), data[i], grad);
      C.noalias() += (wts[r] * prob.phi.row(r).transpose()) * grad.transpose();
    }
    switch (cls.constraint) {
      case ThetaClass::Constraint::Box:
        for (Eigen::Index j = 0; j < p; ++j) {
          for (Eigen::Index k = 0; k < cls.out_dim; ++k) W(j, k) = C(j, k) < 0.0 ? cls.hi : cls.lo;
        }
        break;
      case ThetaClass::Constraint::Simplex:
        for (Eigen::Index j = 0; j < p; ++j) {
          Eigen::Index best = 0;
          for (Eigen::Index k = 1; k < cls.out_dim; ++k) {
            if (C(j, k) < C(j, best)) best = k;
          }
          W(j, best) = 1.0;
        }
        break;
      case ThetaClass::Constraint::Ball: {
        const double cn = C.norm();
        if (cn > 0.0) W = -cls.radius * C / cn;
        break;
      }
      case ThetaClass::Constraint::None:
        if (C.cwiseAbs().maxCoeff() > 1e-14) {
          throw ConfigError("plugin ERM: linear loss over an unconstrained class is unbounded below");
        }
        break;
    }
    fm.diagnostics.objective = prob.objective(W);
    fm.diagnostics.objective_trace.push_back(fm.diagnostics.objective);
    fm.handle = cls.make(W);
    return fm;
  }

  if (loss.shape == ZetaShape::Quadratic && cls.out_dim == 1 &&
      (cls.constraint == ThetaClass::Constraint::None || cls.constraint == ThetaClass::Constraint::Box)) {
    // l_i(zeta) = a_i zeta^2 + b_i zeta + c_i, recovered from three evaluations.
    Mat H = Mat::Zero(p, p);
    Vec q = Vec::Zero(p);
    Vec z0(1), zp(1), zm(1);
    z0 << 0.0;
    zp << 1.0;
    zm << -1.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const Vec g = prob.gamma.row(r).transpose();
      const double l0 = loss.value(z0, g, data[i]);
      const double l1 = loss.value(zp, g, data[i]);
      const double lm = loss.value(zm, g, data[i]);
      const double a = 0.5 * (l1 + lm) - l0;
      const double b = 0.5 * (l1 - lm);
      H.noalias() += (2.0 * a * wts[r]) * prob.phi.row(r).transpose() * prob.phi.row(r);
      q.noalias() += (b * wts[r]) * prob.phi.row(r).transpose();
    }
    if (cls.constraint == ThetaClass::Constraint::None) {
      W.col(0) = solve_spd(H, -q, "plugin ERM");
      fm.diagnostics.kkt_residual = (H * W.col(0) + q).norm();
    } else {
      // Exact cyclic coordinate minimization of the box-constrained quadratic.
      Vec w = Vec::Zero(p).cwiseMax(cls.lo).cwiseMin(cls.hi);
      fm.diagnostics.converged = false;
      for (int it = 0; it < std::max(opt.max_iters, 1) * 10; ++it) {
        double change = 0.0;
        for (Eigen::Index j = 0; j < p; ++j) {
          const double gj = H.row(j).dot(w) + q[j];
          double wn;
          if (H(j, j) > 0.0) {
            wn = std::clamp(w[j] - gj / H(j, j), cls.lo, cls.hi);
          } else {
            wn = gj > 0.0 ? cls.lo : (gj < 0.0 ? cls.hi : w[j]);
          }
          change = std::max(change, std::abs(wn - w[j]));
          w[j] = wn;
        }
        fm.diagnostics.iterations = it + 1;
        if (change <= opt.tol) {
          fm.diagnostics.converged = true;
          break;
        }
      }
      if (!fm.diagnostics.converged) fm.diagnostics.warnings.push_back("box QP coordinate descent hit max_iters");
      const Vec g = H * w + q;
      double kkt = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) {
        if (w[j] <= cls.lo) kkt = std::max(kkt, std::max(0.0, -g[j]));
        else if (w[j] >= cls.hi) kkt = std::max(kkt, std::max(0.0, g[j]));
        else kkt = std::max(kkt, std::abs(g[j]));
      }
      fm.diagnostics.kkt_residual = kkt;
      W.col(0) = w;
    }
    fm.diagnostics.objective = prob.objective(W);
    fm.diagnostics.objective_trace.push_back(fm.diagnostics.objective);
    fm.handle = cls.make(W);
    return fm;
  }

  W = projected_descent([&](const Mat& M) { return prob.objective(M); }, [&](const Mat& M) { return prob.gradient(M); },
                        cls, W, opt, fm.diagnostics);
  fm.handle = cls.make(W);
  return fm;
}

// ---------------------------------------------------------------------------
// Variance-penalized ERM

double variance_penalized_objective(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g_hat,
                                    std::span<const Sample> s2, double mu_hat, double weight) {
  const auto l = pointwise_losses(loss, theta, g_hat, s2);
  double mean = 0.0;
  double dev = 0.0;
  for (double v : l) {
    mean += v;
    dev += (v - mu_hat) * (v - mu_hat);
  }
  const double n = static_cast<double>(l.size());
  return mean / n + weight * std::sqrt(dev / n);
}

FittedModel variance_penalized_erm(const LossModel& loss, const FunctionHandle& g_hat, std::span<const Sample> s2,
                                   std::span<const Sample> s3, const ThetaClass& cls, const VarPenConfig& cfg,
                                   VarPenDiagnostics* info) {
  if (!(cfg.delta_n >= 0.0)) throw ConfigError("variance-penalized ERM: delta_n must be >= 0");
  if (cfg.R != 0.0 && !(cfg.R >= 1.0)) throw ConfigError("variance-penalized ERM: R must be >= 1");
  if (!(cfg.c_pen >= 0.0)) throw ConfigError("variance-penalized ERM: c_pen must be >= 0");
  require_nonempty(s2, "variance-penalized ERM (S2)");
  require_nonempty(s3, "variance-penalized ERM (S3)");

  const FittedModel on_s3 = plugin_erm(loss, g_hat, s3, cls, cfg.erm);
  const double mu_hat = on_s3.diagnostics.objective;
  const FittedModel plain = plugin_erm(loss, g_hat, s2, cls, cfg.erm);

  double R = cfg.R;
  if (R == 0.0) {
    R = 1.0;
    const std::vector<FunctionHandle> probe =
        cls.kind == ThetaClass::Kind::Finite ? cls.members : std::vector<FunctionHandle>{plain.handle};
    for (const auto& f : probe) {
      for (double v : pointwise_losses(loss, f, g_hat, s2)) R = std::max(R, std::abs(v));
    }
  }
  const double weight = cfg.c_pen * cfg.delta_n / R;
  if (info) *info = VarPenDiagnostics{mu_hat, R, weight};

  if (weight == 0.0) return plain;

  FittedModel fm;
  if (cls.kind == ThetaClass::Kind::Finite) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < cls.members.size(); ++k) {
      const double obj = variance_penalized_objective(loss, cls.members[k], g_hat, s2, mu_hat, weight);
      fm.diagnostics.objective_trace.push_back(obj);
      if (obj < best) {
        best = obj;
        best_k = k;
      }
    }
    fm.handle = cls.members[best_k];
    fm.diagnostics.selected_index = best_k;
    fm.diagnostics.objective = best;
    return fm;
  }

  LinearProblem prob{loss, s2, design_matrix(s2, cls.features, cls.view), nuisance_matrix(loss, g_hat, s2),
                     cls.out_dim, normalized_weights({}, s2.size())};
  const double n = static_cast<double>(s2.size());
  auto objective = [&](const Mat& W) {
    return variance_penalized_objective(loss, cls.make(W), g_hat, s2, mu_hat, weight);
  };
  auto gradient = [&](const Mat& W) {
    Mat G = Mat::Zero(W.rows(), W.cols());
    Mat Gp = Mat::Zero(W.rows(), W.cols());
    Vec zeta(cls.out_dim);
    Vec grad(cls.out_dim);
    double dev = 0.0;
    for (std::size_t i = 0; i < s2.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      zeta.noalias() = W.transpose() * prob.phi.row(r).transpose();
      const Vec g = prob.gamma.row(r).transpose();
      const double l = loss.value(zeta, g, s2[i]);
      loss.gradient_zeta(zeta, g, s2[i], grad);
      const Mat outer = prob.phi.row(r).transpose() * grad.transpose();
      G += outer;
      Gp += (l - mu_hat) * outer;
      dev += (l - mu_hat) * (l - mu_hat);
    }
    G /= n;
    const double pen = std::sqrt(dev / n);
    if (pen > 0.0) G += weight * Gp / (n * pen);
    return G;
  };
  const FunctionHandle start = plain.handle;
  Mat W0 = start.as_linear() ? start.as_linear()->weights : Mat::Zero(cls.weight_rows(), cls.out_dim);
  const Mat W = projected_descent(objective, gradient, cls, W0, cfg.erm, fm.diagnostics);
  fm.handle = cls.make(W);
  return fm;
}

// ---------------------------------------------------------------------------
// Star aggregation

namespace {

Mat prediction_matrix(const std::vector<FunctionHandle>& candidates, std::span<const Sample> data) {
  Mat P(static_cast<Eigen::Index>(candidates.size()), static_cast<Eigen::Index>(data.size()));
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    if (candidates[k].out_dim() != 1) throw ConfigError("aggregation needs scalar candidates");
    for (std::size_t i = 0; i < data.size(); ++i) {
      P(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = candidates[k].scalar(data[i]);
    }
  }
  if (!P.allFinite()) throw NumericError("aggregation candidate produced a non-finite prediction");
  return P;
}

// Minimizes t -> phi(t) on [0, 1]; phi is quadratic, linear or general.
double minimize_segment(const std::function<double(double)>& phi, ZetaShape shape, double* value) {
  double t = 0.0;
  if (shape == ZetaShape::Quadratic || shape == ZetaShape::Linear) {
    const double f0 = phi(0.0);
    const double f1 = phi(1.0);
    const double fm = phi(-1.0);
    const double A = 0.5 * (f1 + fm) - f0;
    const double B = 0.5 * (f1 - fm);
    if (A > 0.0) {
      t = std::clamp(-B / (2.0 * A), 0.0, 1.0);
    } else {
      t = f1 < f0 ? 1.0 : 0.0;
    }
  } else {
    const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
    double a = 0.0, b = 1.0;
    double c = b - gr * (b - a), d = a + gr * (b - a);
    double fc = phi(c), fd = phi(d);
    for (int it = 0; it < 80; ++it) {
      if (fc <= fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - gr * (b - a);
        fc = phi(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + gr * (b - a);
        fd = phi(d);
      }
    }
    t = 0.5 * (a + b);
    if (phi(0.0) < phi(t)) t = 0.0;
    if (phi(1.0) < phi(t)) t = 1.0;
  }
  if (value) *value = phi(t);
  return t;
}

StarResult star_core(const std::vector<FunctionHandle>& candidates, const Mat& P, std::size_t n_first,
                     const PointLoss& L, ZetaShape shape, const Vec* square_targets) {
  const std::size_t n = static_cast<std::size_t>(P.cols());
  const std::size_t M = candidates.size();
  const std::size_t a0 = 0, a1 = n_first;  // first half [a0, a1)
  const std::size_t b0 = n_first < n ? n_first : 0, b1 = n;

  StarResult res;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < M; ++k) {
    double r = 0.0;
    for (std::size_t i = a0; i < a1; ++i) r += L(i, P(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)));
    if (r < best) {
      best = r;
      res.first = k;
    }
  }
  const auto k1 = static_cast<Eigen::Index>(res.first);
  best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < M; ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    double t = 1.0;
    double val = 0.0;
    if (square_targets) {
      double rd = 0.0, dd = 0.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double d = P(k1, ii) - P(kk, ii);
        rd += ((*square_targets)[ii] - P(kk, ii)) * d;
        dd += d * d;
      }
      t = dd > 0.0 ? std::clamp(rd / dd, 0.0, 1.0) : 1.0;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        const double e = (*square_targets)[ii] - (t * P(k1, ii) + (1.0 - t) * P(kk, ii));
        val += e * e;
      }
    } else {
      auto phi = [&](double s) {
        double acc = 0.0;
        for (std::size_t i = b0; i < b1; ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          acc += L(i, s * P(k1, ii) + (1.0 - s) * P(kk, ii));
        }
        return acc;
      };
      t = k == res.first ? 1.0 : minimize_segment(phi, shape, &val);
      if (k == res.first) val = phi(1.0);
    }
    if (val < best) {
      best = val;
      res.second = k;
      res.t = t;
    }
  }
  if (res.second == res.first) res.t = 1.0;
  if (res.t >= 1.0) {
    res.t = 1.0;
    res.handle = candidates[res.first];
  } else if (res.t <= 0.0) {
    res.t = 0.0;
    res.handle = candidates[res.second];
  } else {
    res.handle = FunctionHandle::sum({{res.t, candidates[res.first]}, {1.0 - res.t, candidates[res.second]}});
  }
  return res;
}

}  // namespace

StarResult star_aggregate(const std::vector<FunctionHandle>& candidates, std::span<const Sample> data,
                          const Vec& targets) {
  if (candidates.empty()) throw ConfigError("star aggregation: no candidates");
  require_nonempty(data, "star aggregation");
  if (targets.size() != static_cast<Eigen::Index>(data.size())) throw ConfigError("star aggregation: target size");
  const Mat P = prediction_matrix(candidates, data);
  if (P.size() > 0 && P.cwiseAbs().maxCoeff() > 1.0 + 1e-12) {
    throw DomainError("star aggregation: candidate values must lie in [-1, 1]");
  }
  if (targets.cwiseAbs().maxCoeff() > 1.0 + 1e-12) throw DomainError("star aggregation: targets must lie in [-1, 1]");
  const std::size_t n1 = data.size() >= 2 ? data.size() / 2 : data.size();
  auto L = [&](std::size_t i, double p) {
    const double e = targets[static_cast<Eigen::Index>(i)] - p;
    return e * e;
  };
  return star_core(candidates, P, n1, L, ZetaShape::Quadratic, &targets);
}

StarResult star_aggregate(const std::vector<FunctionHandle>& candidates, const LossModel& loss,
                          const FunctionHandle& g_hat, std::span<const Sample> data) {
  if (candidates.empty()) throw ConfigError("star aggregation: no candidates");
  require_nonempty(data, "star aggregation");
  if (loss.target_dim != 1) throw ConfigError("star aggregation needs a scalar target");
  const Mat P = prediction_matrix(candidates, data);
  const Mat G = nuisance_matrix(loss, g_hat, data);
  const std::size_t n1 = data.size() >= 2 ? data.size() / 2 : data.size();
  Vec zeta(1);
  auto L = [&](std::size_t i, double p) {
    zeta[0] = p;
    return loss.value(zeta, G.row(static_cast<Eigen::Index>(i)).transpose(), data[i]);
  };
  return star_core(candidates, P, n1, L, loss.shape, nullptr);
}

std::vector<std::size_t> greedy_cover(const Mat& P, double eps) {
  if (!(eps > 0.0)) throw ConfigError("cover scale must be > 0");
  std::vector<std::size_t> centers;
  if (P.rows() == 0) return centers;
  const double n = static_cast<double>(std::max<Eigen::Index>(P.cols(), 1));
  Vec mind = Vec::Constant(P.rows(), std::numeric_limits<double>::infinity());
  Eigen::Index next = 0;
  while (true) {
    centers.push_back(static_cast<std::size_t>(next));
    for (Eigen::Index k = 0; k < P.rows(); ++k) {
      mind[k] = std::min(mind[k], std::sqrt((P.row(k) - P.row(next)).squaredNorm() / n));
    }
    Eigen::Index far = 0;
    const double worst = mind.maxCoeff(&far);
    if (worst <= eps) break;
    next = far;
  }
  return centers;
}

std::vector<FunctionHandle> grid_class(const ThetaClass& cls, double eps, std::size_t cap) {
  if (cls.kind != ThetaClass::Kind::Linear || cls.constraint != ThetaClass::Constraint::Box || cls.out_dim != 1) {
    throw ConfigError("grid discretization needs a one-output Linear class with a box constraint");
  }
  if (!(eps > 0.0)) throw ConfigError("grid scale must be > 0");
  std::vector<double> axis;
  for (double v = cls.lo; v < cls.hi; v += eps) axis.push_back(v);
  axis.push_back(cls.hi);
  const int p = cls.weight_rows();
  double total = 1.0;
  for (int j = 0; j < p; ++j) total *= static_cast<double>(axis.size());
  if (total > static_cast<double>(cap)) {
    throw ConfigError("grid of " + std::to_string(static_cast<long long>(total)) + " points exceeds the cap of " +
                      std::to_string(cap) + "; use a larger eps_net");
  }
  std::vector<FunctionHandle> out;
  std::vector<std::size_t> idx(static_cast<std::size_t>(p), 0);
  while (true) {
    Mat W(p, 1);
    for (int j = 0; j < p; ++j) W(j, 0) = axis[idx[static_cast<std::size_t>(j)]];
    out.push_back(cls.make(W));
    int j = 0;
    while (j < p && ++idx[static_cast<std::size_t>(j)] == axis.size()) idx[static_cast<std::size_t>(j++)] = 0;
    if (j == p) break;
  }
  return out;
}

SkeletonResult skeleton_aggregate(const ThetaClass& cls, const LossModel& loss, const FunctionHandle& g_hat,
                                  std::span<const Sample> data, const SkeletonOptions& opt) {
  require_nonempty(data, "skeleton aggregation");
  const std::vector<FunctionHandle> members =
      cls.kind == ThetaClass::Kind::Finite ? cls.members : grid_class(cls, opt.eps_net, opt.net_cap);
  const std::size_t n1 = data.size() >= 2 ? data.size() / 2 : data.size();
  const auto first = data.subspan(0, n1);
  const auto second = data.size() >= 2 ? data.subspan(n1) : data;
  const Mat P = prediction_matrix(members, first);
  SkeletonResult res;
  res.net_indices = greedy_cover(P, opt.eps_net);
  if (res.net_indices.size() > opt.net_cap) {
    throw ConfigError("skeleton net exceeds the size cap; use a larger eps_net");
  }
  for (std::size_t k : res.net_indices) res.net.push_back(members[k]);
  res.star = star_aggregate(res.net, loss, g_hat, second);
  return res;
}

// ---------------------------------------------------------------------------
// Critical radius

namespace {

// Per-draw |<sigma, v_k>| / n for every member, with the member norms.
struct RademacherTable {
  Mat c;      // n_mc x M
  Vec norms;  // M
};

RademacherTable rademacher_table(const Mat& V, std::size_t n_mc, std::uint64_t seed) {
  const Eigen::Index M = V.rows();
  const Eigen::Index n = V.cols();
  RademacherTable t;
  t.norms = (V.rowwise().squaredNorm() / static_cast<double>(n)).cwiseSqrt();
  t.c.resize(static_cast<Eigen::Index>(n_mc), M);
  Vec sigma(n);
  // Exact expectation over all sign vectors when that is no more work than n_mc draws.
  if (n < 63 && (std::uint64_t{1} << n) <= n_mc) {
    const std::uint64_t total = std::uint64_t{1} << n;
    t.c.resize(static_cast<Eigen::Index>(total), M);
    for (std::uint64_t pattern = 0; pattern < total; ++pattern) {
      for (Eigen::Index i = 0; i < n; ++i) sigma[i] = ((pattern >> i) & 1) ? 1.0 : -1.0;
      t.c.row(static_cast<Eigen::Index>(pattern)) = ((V * sigma).cwiseAbs() / static_cast<double>(n)).transpose();
    }
    return t;
  }
  const Rng root(seed, "rademacher");
  for (std::size_t d = 0; d < n_mc; ++d) {
    Rng rng = root.derive("draw", d);
    for (Eigen::Index i = 0; i < n; ++i) sigma[i] = rng.sign();
    t.c.row(static_cast<Eigen::Index>(d)) = ((V * sigma).cwiseAbs() / static_cast<double>(n)).transpose();
  }
  return t;
}

double complexity_at(const RademacherTable& t, double delta) {
  const Eigen::Index M = t.norms.size();
  Vec scale(M);
  for (Eigen::Index k = 0; k < M; ++k) {
    scale[k] = t.norms[k] <= delta ? 1.0 : (t.norms[k] > 0.0 ? delta / t.norms[k] : 0.0);
  }
  double sum = 0.0;
  for (Eigen::Index d = 0; d < t.c.rows(); ++d) {
    double best = 0.0;
    for (Eigen::Index k = 0; k < M; ++k) best = std::max(best, scale[k] * t.c(d, k));
    sum += best;
  }
  return t.c.rows() > 0 ? sum / static_cast<double>(t.c.rows()) : 0.0;
}

}  // namespace

double localized_rademacher(const Mat& V, double delta, std::size_t n_mc, std::uint64_t seed) {
  if (n_mc < 1) throw ConfigError("Rademacher estimate needs n_mc >= 1");
  if (!(delta >= 0.0)) throw ConfigError("radius must be >= 0");
  if (V.rows() == 0 || V.cols() == 0) return 0.0;
  return complexity_at(rademacher_table(V, n_mc, seed), delta);
}

double critical_radius(const Mat& V, double R, std::size_t n_mc, std::uint64_t seed) {
  if (n_mc < 1) throw ConfigError("critical radius needs n_mc >= 1");
  if (!(R > 0.0)) throw ConfigError("critical radius needs R > 0");
  if (V.rows() == 0 || V.cols() == 0 || V.cwiseAbs().maxCoeff() == 0.0) return 0.0;
  const RademacherTable t = rademacher_table(V, n_mc, seed);
  const double sat = complexity_at(t, std::numeric_limits<double>::infinity());
  const double top = std::max(t.norms.maxCoeff(), std::sqrt(R * sat));
  // Geometric grid top * 2^(-j/16), j = 0..J; the predicate is monotone.
  const int J = 16 * 50;
  auto grid = [&](int j) { return top * std::pow(2.0, -static_cast<double>(j) / 16.0); };
  auto ok = [&](int j) {
    const double d = grid(j);
    return complexity_at(t, d) <= d * d / R;
  };
  int good = 0;  // ok(0) holds by construction
  int bad = J + 1;
  if (ok(J)) return grid(J);
  bad = J;
  while (bad - good > 1) {
    const int mid = (good + bad) / 2;
    if (ok(mid)) good = mid;
    else bad = mid;
  }
  // Refine inside the bracket [grid(bad), grid(good)].
  double lo = grid(bad), hi = grid(good);
  for (int it = 0; it < 60 && hi - lo > 1e-14 * hi; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (complexity_at(t, mid) <= mid * mid / R) hi = mid;
    else lo = mid;
  }
  return hi;
}

double estimate_critical_radius(const std::vector<FunctionHandle>& members, const FunctionHandle& center,
                                std::span<const Sample> data, double R, std::size_t n_mc, std::uint64_t seed) {
  require_nonempty(data, "critical radius");
  const int K = center.out_dim();
  Mat V(static_cast<Eigen::Index>(members.size()), static_cast<Eigen::Index>(data.size()) * K);
  Vec a(K), b(K);
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (members[k].out_dim() != K) throw ConfigError("critical radius: member dimension mismatch");
    for (std::size_t i = 0; i < data.size(); ++i) {
      members[k].eval(data[i], a);
      center.eval(data[i], b);
      V.row(static_cast<Eigen::Index>(k)).segment(static_cast<Eigen::Index>(i) * K, K) = (a - b).transpose();
    }
  }
  return critical_radius(V, R, n_mc, seed);
}

// ---------------------------------------------------------------------------
// Factories

FittedModel fit_regression(const LearnerConfig& cfg, std::span<const Sample> data, const Mat& targets) {
  if (cfg.learner_id == "ridge") return fit_ridge(data, targets, cfg.lambda_reg, cfg.features, cfg.view);
  if (cfg.learner_id == "lasso") {
    LassoOptions o;
    o.lambda_1 = cfg.lambda_1;
    o.max_iters = cfg.max_iters;
    o.tol = cfg.tol;
    return fit_lasso(data, targets, o, cfg.features, cfg.view);
  }
  if (cfg.learner_id == "knn") return fit_knn(data, targets, std::min<int>(cfg.k, static_cast<int>(data.size())), cfg.view);
  if (cfg.learner_id == "kernel") return fit_kernel(data, targets, cfg.bandwidth, cfg.view);
  throw ConfigError("'" + cfg.learner_id + "' is not a regression learner (ridge, lasso, knn, kernel)");
}

NuisanceLearner make_nuisance_learner(const LearnerConfig& cfg, TargetExtractor targets) {
  return [cfg, targets](std::span<const Sample> data) { return fit_regression(cfg, data, targets(data)).handle; };
}

NuisanceLearner oracle_nuisance(FunctionHandle g0) {
  return [g0](std::span<const Sample>) { return g0; };
}

TargetLearner make_target_learner(const LearnerConfig& cfg, ThetaClass cls) {
  if (cfg.learner_id == "erm") {
    return [cfg, cls](const LossModel& loss, const FunctionHandle& g, std::span<const Sample> data) {
      return plugin_erm(loss, g, data, cls, cfg.erm);
    };
  }
  if (cfg.learner_id == "star_agg") {
    if (cls.kind != ThetaClass::Kind::Finite) throw ConfigError("star_agg needs a finite class");
    return [cls](const LossModel& loss, const FunctionHandle& g, std::span<const Sample> data) {
      FittedModel fm;
      const StarResult r = star_aggregate(cls.members, loss, g, data);
      fm.handle = r.handle;
      fm.diagnostics.selected_index = r.first;
      return fm;
    };
  }
  if (cfg.learner_id == "skeleton_agg") {
    return [cfg, cls](const LossModel& loss, const FunctionHandle& g, std::span<const Sample> data) {
      FittedModel fm;
      SkeletonOptions o;
      o.eps_net = cfg.eps_net;
      const SkeletonResult r = skeleton_aggregate(cls, loss, g, data, o);
      fm.handle = r.star.handle;
      return fm;
    };
  }
  if (cfg.learner_id == "erm_varpen") {
    throw ConfigError("erm_varpen needs three folds; use the three-stage pipeline");
  }
  throw ConfigError("'" + cfg.learner_id + "' is not a second-stage learner (erm, star_agg, skeleton_agg)");
}

}  // namespace osl
