#include "osl/core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "osl/rng.hpp"

namespace osl {

namespace {

std::atomic<std::uint64_t> g_next_source{1};

// Neumaier compensated summation; keeps exact-enumeration identities at the
// 1e-12 level for a few thousand atoms.
class Accumulator {
 public:
  void add(double v) {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

bool all_finite(const Vec& v) { return v.size() == 0 || v.allFinite(); }

std::string key_bytes(const Eigen::VectorBlock<const Vec>& v) {
  std::string out(static_cast<std::size_t>(v.size()) * sizeof(double), '\0');
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    double d = v[i];
    if (d == 0.0) d = 0.0;  // fold -0.0 into +0.0
    std::memcpy(out.data() + static_cast<std::size_t>(i) * sizeof(double), &d, sizeof(double));
  }
  return out;
}

}  // namespace

int Sample::arm() const {
  if (t.size() == 0) return 0;
  if (t.size() == 1) return t[0] > 0.5 ? 1 : 0;
  Eigen::Index idx = 0;
  t.maxCoeff(&idx);
  return static_cast<int>(idx);
}

void validate_sample(const Sample& s) {
  if (s.x_slice.offset < 0 || s.x_slice.length < 0 || s.x_slice.offset + s.x_slice.length > s.w.size()) {
    throw ConfigError("sample " + std::to_string(s.id) + ": x slice does not fit inside w");
  }
  if (!all_finite(s.w) || !std::isfinite(s.y) || !all_finite(s.t) || !all_finite(s.u) || !all_finite(s.v)) {
    throw NumericError("sample " + std::to_string(s.id) + " has non-finite coordinates");
  }
}

// ---------------------------------------------------------------------------
// Distribution

struct Distribution::Impl {
  Kind kind = Kind::Empirical;
  std::vector<Sample> atoms;
  std::vector<double> weights;
  std::vector<double> cdf;
  DrawFn draw;
  std::uint64_t source = 0;
};

Distribution Distribution::enumerated(std::vector<Sample> atoms, std::vector<double> weights) {
  if (atoms.empty()) throw ConfigError("enumerated distribution needs at least one atom");
  if (atoms.size() != weights.size()) throw ConfigError("enumerated distribution: atoms/weights size mismatch");
  Accumulator total;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("enumerated distribution: negative or non-finite weight");
    total.add(w);
  }
  if (std::abs(total.value() - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "enumerated distribution: weights sum to " << total.value() << ", expected 1";
    throw ConfigError(msg.str());
  }
  auto impl = std::make_shared<Impl>();
  impl->kind = Kind::Enumerated;
  impl->source = g_next_source.fetch_add(1);
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    validate_sample(atoms[i]);
    atoms[i].atom = static_cast<std::int32_t>(i);
    atoms[i].source = impl->source;
  }
  impl->cdf.resize(weights.size());
  double run = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    run += weights[i];
    impl->cdf[i] = run;
  }
  impl->atoms = std::move(atoms);
  impl->weights = std::move(weights);
  Distribution d;
  d.impl_ = std::move(impl);
  return d;
}

Distribution Distribution::uniform(std::vector<Sample> atoms) {
  const std::size_t n = atoms.size();
  if (n == 0) throw ConfigError("enumerated distribution needs at least one atom");
  std::vector<double> weights(n, 1.0 / static_cast<double>(n));
  return enumerated(std::move(atoms), std::move(weights));
}

Distribution Distribution::sampler(DrawFn draw) {
  if (!draw) throw ConfigError("sampler distribution needs a draw function");
  auto impl = std::make_shared<Impl>();
  impl->kind = Kind::Sampler;
  impl->draw = std::move(draw);
  Distribution d;
  d.impl_ = std::move(impl);
  return d;
}

Distribution Distribution::empirical(std::vector<Sample> samples) {
  if (samples.empty()) throw ConfigError("empirical distribution needs at least one sample");
  auto impl = std::make_shared<Impl>();
  impl->kind = Kind::Empirical;
  impl->source = g_next_source.fetch_add(1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    validate_sample(samples[i]);
    samples[i].atom = static_cast<std::int32_t>(i);
    samples[i].source = impl->source;
  }
  impl->atoms = std::move(samples);
  impl->weights.assign(impl->atoms.size(), 1.0 / static_cast<double>(impl->atoms.size()));
  Distribution d;
  d.impl_ = std::move(impl);
  return d;
}

Distribution Distribution::mixture(const Distribution& a, const Distribution& b, double alpha) {
  if (!a.is_enumerated() || !b.is_enumerated()) throw ConfigError("mixture requires enumerated distributions");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("mixture weight must lie in [0, 1]");
  std::vector<Sample> atoms;
  std::vector<double> weights;
  for (std::size_t i = 0; i < a.atoms().size(); ++i) {
    atoms.push_back(a.atoms()[i]);
    weights.push_back(alpha * a.weights()[i]);
  }
  for (std::size_t i = 0; i < b.atoms().size(); ++i) {
    atoms.push_back(b.atoms()[i]);
    weights.push_back((1.0 - alpha) * b.weights()[i]);
  }
  return enumerated(std::move(atoms), std::move(weights));
}

Distribution::Kind Distribution::kind() const { return impl_->kind; }

const std::vector<Sample>& Distribution::atoms() const {
  if (impl_->kind == Kind::Sampler) throw ConfigError("sampler distributions have no atom list");
  return impl_->atoms;
}

const std::vector<double>& Distribution::weights() const {
  if (impl_->kind == Kind::Sampler) throw ConfigError("sampler distributions have no weights");
  return impl_->weights;
}

std::uint64_t Distribution::source_id() const { return impl_->source; }

Sample Distribution::draw(std::uint64_t seed, std::uint64_t index) const {
  switch (impl_->kind) {
    case Kind::Sampler: {
      Sample s = impl_->draw(seed, index);
      s.id = static_cast<std::int64_t>(index);
      return s;
    }
    case Kind::Enumerated: {
      Rng rng(seed, "draw", index);
      const double u = rng.uniform();
      auto it = std::upper_bound(impl_->cdf.begin(), impl_->cdf.end(), u);
      std::size_t pos = static_cast<std::size_t>(it - impl_->cdf.begin());
      if (pos >= impl_->atoms.size()) pos = impl_->atoms.size() - 1;
      // Skip zero-weight atoms that share a cdf value with their successor.
      while (impl_->weights[pos] == 0.0 && pos + 1 < impl_->atoms.size()) ++pos;
      Sample s = impl_->atoms[pos];
      s.id = static_cast<std::int64_t>(index);
      return s;
    }
    case Kind::Empirical: {
      Rng rng(seed, "draw", index);
      Sample s = impl_->atoms[rng.below(impl_->atoms.size())];
      s.id = static_cast<std::int64_t>(index);
      return s;
    }
  }
  throw ConfigError("unknown distribution kind");
}

std::vector<Sample> Distribution::draw_n(std::uint64_t seed, std::size_t n) const {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(draw(seed, i));
  return out;
}

// ---------------------------------------------------------------------------
// KeyTable

KeyTable::KeyTable(const Distribution& dist, View view) : view_(view), source_(dist.source_id()) {
  const auto& atoms = dist.atoms();
  const auto& weights = dist.weights();
  atom_keys_.resize(atoms.size());
  for (std::size_t i = 0; i < atoms.size(); ++i) {
    const auto bytes = key_bytes(atoms[i].view(view));
    auto [it, inserted] = index_.emplace(bytes, static_cast<int>(keys_.size()));
    if (inserted) {
      keys_.emplace_back(atoms[i].view(view));
      key_mass_.push_back(0.0);
    }
    atom_keys_[i] = it->second;
    key_mass_[static_cast<std::size_t>(it->second)] += weights[i];
  }
}

int KeyTable::lookup(const Sample& s) const {
  if (s.source == source_ && s.atom >= 0 && static_cast<std::size_t>(s.atom) < atom_keys_.size()) {
    return atom_keys_[static_cast<std::size_t>(s.atom)];
  }
  auto it = index_.find(key_bytes(s.view(view_)));
  return it == index_.end() ? -1 : it->second;
}

// ---------------------------------------------------------------------------
// FeatureMap

int FeatureMap::dim() const {
  switch (kind) {
    case Kind::Raw: return input_dim;
    case Kind::Intercept: return input_dim + 1;
    case Kind::OneHot: return keys ? keys->size() : 0;
    case Kind::Constant: return 1;
  }
  return 0;
}

void FeatureMap::features(const Sample& s, View view, VecOut out) const {
  switch (kind) {
    case Kind::Raw: {
      const auto v = s.view(view);
      if (v.size() != input_dim) throw ConfigError("feature map: input dimension mismatch");
      out = v;
      return;
    }
    case Kind::Intercept: {
      const auto v = s.view(view);
      if (v.size() != input_dim) throw ConfigError("feature map: input dimension mismatch");
      out[0] = 1.0;
      out.tail(input_dim) = v;
      return;
    }
    case Kind::OneHot: {
      const int idx = keys->lookup(s);
      if (idx < 0) throw DomainError("one-hot feature map evaluated outside its key table");
      out.setZero();
      out[idx] = 1.0;
      return;
    }
    case Kind::Constant:
      out[0] = 1.0;
      return;
  }
}

Vec FeatureMap::features(const Sample& s, View view) const {
  Vec out(dim());
  features(s, view, out);
  return out;
}

// ---------------------------------------------------------------------------
// FunctionHandle

struct FunctionHandle::Impl {
  Rep rep = Rep::Opaque;
  View view = View::W;
  int out_dim = 0;
  LinearRep linear;
  TabularRep tabular;
  FunctionHandle base;
  FunctionHandle direction;
  double t = 0.0;
  std::vector<std::pair<double, FunctionHandle>> terms;
  EvalFn fn;
};

FunctionHandle FunctionHandle::empty(View view) {
  return linear(view, FeatureMap::constant(), Mat(1, 0));
}

FunctionHandle FunctionHandle::linear(View view, FeatureMap features, Mat weights) {
  if (weights.rows() != features.dim()) throw ConfigError("linear handle: weight rows must equal feature dimension");
  if (!weights.allFinite()) throw NumericError("linear handle: non-finite weights");
  auto impl = std::make_shared<Impl>();
  impl->rep = Rep::Linear;
  impl->view = view;
  impl->out_dim = static_cast<int>(weights.cols());
  impl->linear = LinearRep{std::move(features), std::move(weights)};
  return FunctionHandle(std::move(impl));
}

FunctionHandle FunctionHandle::constant(View view, const Vec& value) {
  return linear(view, FeatureMap::constant(), value.transpose());
}

FunctionHandle FunctionHandle::tabular(std::shared_ptr<const KeyTable> keys, Mat values) {
  if (!keys) throw ConfigError("tabular handle needs a key table");
  if (values.rows() != keys->size()) throw ConfigError("tabular handle: one row per key required");
  if (!values.allFinite()) throw NumericError("tabular handle: non-finite values");
  auto impl = std::make_shared<Impl>();
  impl->rep = Rep::Tabular;
  impl->view = keys->view();
  impl->out_dim = static_cast<int>(values.cols());
  impl->tabular = TabularRep{std::move(keys), std::move(values)};
  return FunctionHandle(std::move(impl));
}

FunctionHandle FunctionHandle::composite(FunctionHandle base, double t, FunctionHandle direction) {
  if (!base.valid() || !direction.valid()) throw ConfigError("composite handle: missing base or direction");
  if (base.out_dim() != direction.out_dim()) throw ConfigError("composite handle: output dimension mismatch");
  auto impl = std::make_shared<Impl>();
  impl->rep = Rep::Composite;
  // A W-view handle cannot be evaluated from x alone; W dominates.
  impl->view = (base.view() == View::W || direction.view() == View::W) ? View::W : View::X;
  impl->out_dim = base.out_dim();
  impl->base = std::move(base);
  impl->t = t;
  impl->direction = std::move(direction);
  return FunctionHandle(std::move(impl));
}

FunctionHandle FunctionHandle::sum(std::vector<std::pair<double, FunctionHandle>> terms) {
  if (terms.empty()) throw ConfigError("sum handle needs at least one term");
  const int dim = terms.front().second.out_dim();
  View view = View::X;
  for (const auto& [c, f] : terms) {
    if (!f.valid() || f.out_dim() != dim) throw ConfigError("sum handle: output dimension mismatch");
    if (f.view() == View::W) view = View::W;
  }
  auto impl = std::make_shared<Impl>();
  impl->rep = Rep::Sum;
  impl->view = view;
  impl->out_dim = dim;
  impl->terms = std::move(terms);
  return FunctionHandle(std::move(impl));
}

FunctionHandle FunctionHandle::opaque(View view, int out_dim, EvalFn fn) {
  if (!fn) throw ConfigError("opaque handle needs an evaluator");
  auto impl = std::make_shared<Impl>();
  impl->rep = Rep::Opaque;
  impl->view = view;
  impl->out_dim = out_dim;
  impl->fn = std::move(fn);
  return FunctionHandle(std::move(impl));
}

FunctionHandle FunctionHandle::stack(const std::vector<FunctionHandle>& parts) {
  if (parts.empty()) throw ConfigError("stack handle needs at least one part");
  int total = 0;
  View view = View::X;
  for (const auto& p : parts) {
    total += p.out_dim();
    if (p.view() == View::W) view = View::W;
  }
  return opaque(view, total, [parts](const Sample& s, VecOut out) {
    Eigen::Index offset = 0;
    for (const auto& p : parts) {
      const Eigen::Index d = p.out_dim();
      if (d == 0) continue;
      Vec tmp(d);
      p.eval(s, tmp);
      out.segment(offset, d) = tmp;
      offset += d;
    }
  });
}

FunctionHandle FunctionHandle::tabulate(const FunctionHandle& f, std::shared_ptr<const KeyTable> keys) {
  if (!keys) throw ConfigError("tabulate needs a key table");
  if (f.view() == View::W && keys->view() == View::X) {
    throw ConfigError("cannot tabulate a w-function on x keys");
  }
  Mat values(keys->size(), f.out_dim());
  Sample probe;
  for (int k = 0; k < keys->size(); ++k) {
    probe.w = keys->key(k);
    probe.x_slice = Slice{0, probe.w.size()};
    probe.atom = -1;
    Vec out(f.out_dim());
    f.eval(probe, out);
    values.row(k) = out.transpose();
  }
  return tabular(std::move(keys), std::move(values));
}

FunctionHandle::Rep FunctionHandle::rep() const { return impl_->rep; }
View FunctionHandle::view() const { return impl_->view; }
int FunctionHandle::out_dim() const { return impl_ ? impl_->out_dim : 0; }

void FunctionHandle::eval(const Sample& s, VecOut out) const {
  const Impl& f = *impl_;
  switch (f.rep) {
    case Rep::Linear: {
      const auto& lin = f.linear;
      const Mat& W = lin.weights;
      switch (lin.features.kind) {
        case FeatureMap::Kind::Constant:
          out = W.row(0).transpose();
          return;
        case FeatureMap::Kind::OneHot: {
          const int idx = lin.features.keys->lookup(s);
          if (idx < 0) throw DomainError("one-hot linear handle evaluated outside its key table");
          out = W.row(idx).transpose();
          return;
        }
        case FeatureMap::Kind::Raw: {
          const auto v = s.view(f.view);
          if (v.size() != W.rows()) throw ConfigError("linear handle: input dimension mismatch");
          out.noalias() = W.transpose() * v;
          return;
        }
        case FeatureMap::Kind::Intercept: {
          const auto v = s.view(f.view);
          if (v.size() + 1 != W.rows()) throw ConfigError("linear handle: input dimension mismatch");
          out = W.row(0).transpose();
          out.noalias() += W.bottomRows(v.size()).transpose() * v;
          return;
        }
      }
      return;
    }
    case Rep::Tabular: {
      const int idx = f.tabular.keys->lookup(s);
      if (idx < 0) throw DomainError("tabular handle evaluated outside its support");
      out = f.tabular.values.row(idx).transpose();
      return;
    }
    case Rep::Composite: {
      f.base.eval(s, out);
      Vec d(f.out_dim);
      f.direction.eval(s, d);
      out += f.t * d;
      return;
    }
    case Rep::Sum: {
      out.setZero();
      Vec tmp(f.out_dim);
      for (const auto& [c, h] : f.terms) {
        h.eval(s, tmp);
        out += c * tmp;
      }
      return;
    }
    case Rep::Opaque:
      f.fn(s, out);
      return;
  }
}

Vec FunctionHandle::operator()(const Sample& s) const {
  Vec out(out_dim());
  eval(s, out);
  return out;
}

double FunctionHandle::scalar(const Sample& s) const {
  if (out_dim() != 1) throw ConfigError("scalar evaluation of a vector-valued handle");
  Vec out(1);
  eval(s, out);
  return out[0];
}

const FunctionHandle::LinearRep* FunctionHandle::as_linear() const {
  return impl_ && impl_->rep == Rep::Linear ? &impl_->linear : nullptr;
}

const FunctionHandle::TabularRep* FunctionHandle::as_tabular() const {
  return impl_ && impl_->rep == Rep::Tabular ? &impl_->tabular : nullptr;
}

// ---------------------------------------------------------------------------
// LossModel

namespace {

double fd_step(double x) { return std::cbrt(std::numeric_limits<double>::epsilon()) * std::max(1.0, std::abs(x)); }

}  // namespace

void LossModel::fd_gradient_zeta(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const {
  Vec zp = zeta;
  for (Eigen::Index k = 0; k < zeta.size(); ++k) {
    const double h = fd_step(zeta[k]);
    zp[k] = zeta[k] + h;
    const double fp = value(zp, gamma, z);
    zp[k] = zeta[k] - h;
    const double fm = value(zp, gamma, z);
    zp[k] = zeta[k];
    out[k] = (fp - fm) / (2.0 * h);
  }
}

void LossModel::fd_gradient_gamma(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const {
  Vec gp = gamma;
  for (Eigen::Index k = 0; k < gamma.size(); ++k) {
    const double h = fd_step(gamma[k]);
    gp[k] = gamma[k] + h;
    const double fp = value(zeta, gp, z);
    gp[k] = gamma[k] - h;
    const double fm = value(zeta, gp, z);
    gp[k] = gamma[k];
    out[k] = (fp - fm) / (2.0 * h);
  }
}

void LossModel::gradient_zeta(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const {
  if (grad_zeta) {
    grad_zeta(zeta, gamma, z, out);
  } else {
    fd_gradient_zeta(zeta, gamma, z, out);
  }
}

void LossModel::gradient_gamma(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const {
  if (grad_gamma) {
    grad_gamma(zeta, gamma, z, out);
  } else {
    fd_gradient_gamma(zeta, gamma, z, out);
  }
}

bool LossModel::clipping_active(const VecRef& gamma) const {
  for (int slot : propensity_slots) {
    const double e = gamma[slot];
    if (e < clip_eta || e > 1.0 - clip_eta) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Risk functionals

void check_arity(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g) {
  if (!theta.valid() || theta.out_dim() != loss.target_dim) {
    throw ConfigError("loss '" + loss.id + "' expects a target of dimension " + std::to_string(loss.target_dim) +
                      ", got " + std::to_string(theta.out_dim()));
  }
  const int gdim = g.valid() ? g.out_dim() : 0;
  if (gdim != loss.nuisance_dim) {
    throw ConfigError("loss '" + loss.id + "' expects a nuisance of dimension " + std::to_string(loss.nuisance_dim) +
                      ", got " + std::to_string(gdim));
  }
}

namespace {

template <class Fn>
void for_each_loss(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g,
                   std::span<const Sample> data, Fn&& fn) {
  check_arity(loss, theta, g);
  Vec zeta(loss.target_dim);
  Vec gamma(loss.nuisance_dim);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    theta.eval(s, zeta);
    if (loss.target_domain) loss.target_domain(zeta);
    if (loss.nuisance_dim > 0) g.eval(s, gamma);
    const double l = loss.value(zeta, gamma, s);
    if (!std::isfinite(l)) {
      throw NumericError("loss '" + loss.id + "' is non-finite at sample index " + std::to_string(i) + " (id " +
                         std::to_string(s.id) + ")");
    }
    fn(i, l);
  }
}

}  // namespace

std::vector<double> pointwise_losses(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g,
                                     std::span<const Sample> data) {
  std::vector<double> out(data.size());
  for_each_loss(loss, theta, g, data, [&](std::size_t i, double l) { out[i] = l; });
  return out;
}

double empirical_risk(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g,
                      std::span<const Sample> data) {
  if (data.empty()) throw ConfigError("empirical risk over an empty sample");
  Accumulator acc;
  for_each_loss(loss, theta, g, data, [&](std::size_t, double l) { acc.add(l); });
  return acc.value() / static_cast<double>(data.size());
}

RiskEstimate population_risk(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g,
                             const Distribution& dist, std::size_t mc_n, std::uint64_t seed) {
  RiskEstimate est;
  switch (dist.kind()) {
    case Distribution::Kind::Enumerated: {
      const auto& atoms = dist.atoms();
      const auto& w = dist.weights();
      Accumulator acc;
      for_each_loss(loss, theta, g, atoms, [&](std::size_t i, double l) {
        if (w[i] != 0.0) acc.add(w[i] * l);
      });
      est.value = acc.value();
      est.draws = atoms.size();
      return est;
    }
    case Distribution::Kind::Empirical: {
      est.value = empirical_risk(loss, theta, g, dist.atoms());
      est.draws = dist.atoms().size();
      return est;
    }
    case Distribution::Kind::Sampler: {
      if (mc_n < 1) throw ConfigError("Monte-Carlo population risk needs mc_n >= 1");
      check_arity(loss, theta, g);
      Vec zeta(loss.target_dim);
      Vec gamma(loss.nuisance_dim);
      Accumulator sum;
      Accumulator sum_sq;
      for (std::size_t i = 0; i < mc_n; ++i) {
        const Sample s = dist.draw(seed, i);
        theta.eval(s, zeta);
        if (loss.target_domain) loss.target_domain(zeta);
        if (loss.nuisance_dim > 0) g.eval(s, gamma);
        const double l = loss.value(zeta, gamma, s);
        if (!std::isfinite(l)) {
          throw NumericError("loss '" + loss.id + "' is non-finite at Monte-Carlo draw " + std::to_string(i));
        }
        sum.add(l);
        sum_sq.add(l * l);
      }
      const double n = static_cast<double>(mc_n);
      est.value = sum.value() / n;
      const double var = std::max(0.0, sum_sq.value() / n - est.value * est.value);
      est.std_error = mc_n > 1 ? std::sqrt(var * n / (n - 1.0) / n) : 0.0;
      est.draws = mc_n;
      return est;
    }
  }
  throw ConfigError("unknown distribution kind");
}

ExcessRisk excess_risk(const LossModel& loss, const FunctionHandle& theta_hat, const FunctionHandle& g_ref,
                       const Distribution& dist, const Benchmark& benchmark, std::size_t mc_n, std::uint64_t seed) {
  ExcessRisk out;
  out.risk = population_risk(loss, theta_hat, g_ref, dist, mc_n, seed).value;
  if (const auto* single = std::get_if<FunctionHandle>(&benchmark)) {
    out.benchmark_risk = population_risk(loss, *single, g_ref, dist, mc_n, seed).value;
  } else {
    const auto& cls = std::get<std::vector<FunctionHandle>>(benchmark);
    if (cls.empty()) throw ConfigError("excess risk: empty benchmark class");
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < cls.size(); ++k) {
      const double r = population_risk(loss, cls[k], g_ref, dist, mc_n, seed).value;
      if (r < best) {
        best = r;
        out.benchmark_index = k;
      }
    }
    out.benchmark_risk = best;
  }
  out.value = out.risk - out.benchmark_risk;
  return out;
}

double expectation(const Distribution& dist, const std::function<double(const Sample&)>& f, std::size_t mc_n,
                   std::uint64_t seed) {
  Accumulator acc;
  switch (dist.kind()) {
    case Distribution::Kind::Enumerated:
    case Distribution::Kind::Empirical: {
      const auto& atoms = dist.atoms();
      const auto& w = dist.weights();
      for (std::size_t i = 0; i < atoms.size(); ++i) {
        if (w[i] != 0.0) acc.add(w[i] * f(atoms[i]));
      }
      return acc.value();
    }
    case Distribution::Kind::Sampler: {
      if (mc_n < 1) throw ConfigError("Monte-Carlo expectation needs mc_n >= 1");
      for (std::size_t i = 0; i < mc_n; ++i) acc.add(f(dist.draw(seed, i)));
      return acc.value() / static_cast<double>(mc_n);
    }
  }
  return acc.value();
}

double distance(const FunctionHandle& f, const FunctionHandle& h, const Distribution& dist, NormKind kind,
                const LossModel* loss, const FunctionHandle* g0, std::size_t mc_n, std::uint64_t seed) {
  if (f.out_dim() != h.out_dim()) throw ConfigError("distance: output dimension mismatch");
  Vec a(f.out_dim());
  Vec b(h.out_dim());
  switch (kind) {
    case NormKind::L2:
      return std::sqrt(expectation(
          dist,
          [&](const Sample& s) {
            f.eval(s, a);
            h.eval(s, b);
            return (a - b).squaredNorm();
          },
          mc_n, seed));
    case NormKind::L4:
      return std::pow(expectation(
                          dist,
                          [&](const Sample& s) {
                            f.eval(s, a);
                            h.eval(s, b);
                            const double q = (a - b).squaredNorm();
                            return q * q;
                          },
                          mc_n, seed),
                      0.25);
    case NormKind::LambdaWeighted: {
      if (loss == nullptr || g0 == nullptr || !loss->index_weight) {
        throw ConfigError("Lambda-weighted norm needs a single-index loss and the true nuisance");
      }
      Vec gamma(loss->nuisance_dim);
      return std::sqrt(expectation(
          dist,
          [&](const Sample& s) {
            f.eval(s, a);
            h.eval(s, b);
            if (loss->nuisance_dim > 0) g0->eval(s, gamma);
            const double ip = loss->index_weight(gamma, s).dot(a - b);
            return ip * ip;
          },
          mc_n, seed));
    }
  }
  return 0.0;
}

}  // namespace osl
