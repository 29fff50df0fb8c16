#pragma once

// Data model shared by every module: samples, distributions, function
// handles, pointwise losses and the risk functionals built on them.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "osl/error.hpp"

namespace osl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using VecRef = Eigen::Ref<const Eigen::VectorXd>;
using VecOut = Eigen::Ref<Eigen::VectorXd>;

// The target argument x is a fixed slice of the nuisance argument w.
struct Slice {
  Eigen::Index offset = 0;
  Eigen::Index length = 0;
};

enum class View { X, W };

struct Sample {
  std::int64_t id = 0;
  Vec w;
  Slice x_slice;
  double y = 0.0;  // outcome; for missing-data problems the observed T*Y
  Vec t;           // binary treatment (size 1) or one-hot treatment (size N)
  Vec u;           // first-stage regression target
  Vec v;           // auxiliary covariates

  // Set when the sample is an atom (or a draw of an atom) of an enumerated
  // distribution; lets tabular handles skip the hash lookup.
  std::int32_t atom = -1;
  std::uint64_t source = 0;

  Eigen::VectorBlock<const Vec> x() const { return w.segment(x_slice.offset, x_slice.length); }
  Eigen::VectorBlock<const Vec> view(View which) const {
    return which == View::X ? x() : w.segment(0, w.size());
  }
  // Binary treatment value, or the active arm of a one-hot treatment.
  double treatment() const { return t.size() == 0 ? 0.0 : t[0]; }
  int arm() const;
};

// Throws NumericError on non-finite coordinates and ConfigError when the x
// slice does not fit inside w.
void validate_sample(const Sample& s);

// ---------------------------------------------------------------------------
// Distribution

class Distribution {
 public:
  enum class Kind { Enumerated, Sampler, Empirical };
  using DrawFn = std::function<Sample(std::uint64_t seed, std::uint64_t index)>;

  // Weights must be nonnegative and sum to 1 within 1e-12.
  static Distribution enumerated(std::vector<Sample> atoms, std::vector<double> weights);
  static Distribution uniform(std::vector<Sample> atoms);
  static Distribution sampler(DrawFn draw);
  static Distribution empirical(std::vector<Sample> samples);
  // alpha * a + (1 - alpha) * b; both must be Enumerated.
  static Distribution mixture(const Distribution& a, const Distribution& b, double alpha);

  Kind kind() const;
  bool is_enumerated() const { return kind() == Kind::Enumerated; }
  // Atoms (Enumerated) or stored samples (Empirical).
  const std::vector<Sample>& atoms() const;
  const std::vector<double>& weights() const;
  std::uint64_t source_id() const;

  // Deterministic in (seed, index).
  Sample draw(std::uint64_t seed, std::uint64_t index) const;
  std::vector<Sample> draw_n(std::uint64_t seed, std::size_t n) const;

 private:
  struct Impl;
  std::shared_ptr<const Impl> impl_;
};

// ---------------------------------------------------------------------------
// Key tables: dense index over the distinct x (or w) values of an enumerated
// distribution. Tabular handles store one row per key.

class KeyTable {
 public:
  KeyTable(const Distribution& dist, View view);

  View view() const { return view_; }
  int size() const { return static_cast<int>(keys_.size()); }
  // -1 when the sample's view value is not in the table.
  int lookup(const Sample& s) const;
  const Vec& key(int index) const { return keys_[static_cast<std::size_t>(index)]; }
  // Key index of every atom of the source distribution.
  const std::vector<int>& atom_keys() const { return atom_keys_; }
  // Probability mass of each key under the source distribution.
  const std::vector<double>& key_mass() const { return key_mass_; }

 private:
  View view_;
  std::uint64_t source_ = 0;
  std::vector<Vec> keys_;
  std::vector<int> atom_keys_;
  std::vector<double> key_mass_;
  std::unordered_map<std::string, int> index_;
};

// ---------------------------------------------------------------------------
// Feature maps for linear handles.

struct FeatureMap {
  enum class Kind { Raw, Intercept, OneHot, Constant };
  Kind kind = Kind::Intercept;
  int input_dim = 1;                      // Raw / Intercept
  std::shared_ptr<const KeyTable> keys;   // OneHot

  static FeatureMap raw(int input_dim) { return {Kind::Raw, input_dim, nullptr}; }
  static FeatureMap intercept(int input_dim) { return {Kind::Intercept, input_dim, nullptr}; }
  static FeatureMap one_hot(std::shared_ptr<const KeyTable> keys) { return {Kind::OneHot, 0, std::move(keys)}; }
  static FeatureMap constant() { return {Kind::Constant, 0, nullptr}; }

  int dim() const;
  void features(const Sample& s, View view, VecOut out) const;
  Vec features(const Sample& s, View view) const;
};

// ---------------------------------------------------------------------------
// FunctionHandle: immutable, cheap to copy, pure evaluation.

class FunctionHandle {
 public:
  enum class Rep { Linear, Tabular, Composite, Sum, Opaque };
  using EvalFn = std::function<void(const Sample&, VecOut)>;

  struct LinearRep {
    FeatureMap features;
    Mat weights;  // features.dim() x out_dim
  };
  struct TabularRep {
    std::shared_ptr<const KeyTable> keys;
    Mat values;  // keys->size() x out_dim
  };

  FunctionHandle() = default;

  static FunctionHandle empty(View view = View::W);
  static FunctionHandle linear(View view, FeatureMap features, Mat weights);
  static FunctionHandle constant(View view, const Vec& value);
  static FunctionHandle tabular(std::shared_ptr<const KeyTable> keys, Mat values);
  // base + t * direction
  static FunctionHandle composite(FunctionHandle base, double t, FunctionHandle direction);
  static FunctionHandle sum(std::vector<std::pair<double, FunctionHandle>> terms);
  static FunctionHandle opaque(View view, int out_dim, EvalFn fn);
  // Concatenates the outputs of handles that share a view.
  static FunctionHandle stack(const std::vector<FunctionHandle>& parts);
  // Tabulates any handle on the keys of `keys`.
  static FunctionHandle tabulate(const FunctionHandle& f, std::shared_ptr<const KeyTable> keys);

  bool valid() const { return static_cast<bool>(impl_); }
  Rep rep() const;
  View view() const;
  int out_dim() const;

  void eval(const Sample& s, VecOut out) const;
  Vec operator()(const Sample& s) const;
  double scalar(const Sample& s) const;

  const LinearRep* as_linear() const;
  const TabularRep* as_tabular() const;

 private:
  struct Impl;
  explicit FunctionHandle(std::shared_ptr<const Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<const Impl> impl_;
};

// ---------------------------------------------------------------------------
// Pointwise loss l(zeta, gamma; z).

enum class Regime { Fast, Slow };
// How the loss depends on the target prediction zeta; lets learners use
// closed forms.
enum class ZetaShape { General, Quadratic, Linear };

using LossValueFn = std::function<double(const VecRef& zeta, const VecRef& gamma, const Sample& z)>;
using LossGradFn = std::function<void(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out)>;
using IndexWeightFn = std::function<Vec(const VecRef& gamma, const Sample& z)>;

struct LossModel {
  std::string id;
  int target_dim = 1;    // K2
  int nuisance_dim = 0;  // K1
  std::vector<std::string> nuisance_components;
  Regime regime = Regime::Fast;
  ZetaShape shape = ZetaShape::General;
  double clip_eta = 0.01;
  // Nuisance coordinates holding propensities; clipped or range-checked by the loss.
  std::vector<int> propensity_slots;
  bool claims_universal_orthogonality = false;

  LossValueFn value;
  LossGradFn grad_zeta;   // optional; central differences otherwise
  LossGradFn grad_gamma;  // optional; central differences otherwise
  IndexWeightFn index_weight;  // Lambda(gamma, v) of single-index losses, optional
  // Optional admissibility check on target outputs, applied by the risk
  // functionals (not by derivative stencils, which leave the domain).
  std::function<void(const VecRef& zeta)> target_domain;

  double operator()(const VecRef& zeta, const VecRef& gamma, const Sample& z) const {
    return value(zeta, gamma, z);
  }
  void gradient_zeta(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const;
  void gradient_gamma(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const;
  // Central-difference gradients, used as fallback and by the gradient checks.
  void fd_gradient_zeta(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const;
  void fd_gradient_gamma(const VecRef& zeta, const VecRef& gamma, const Sample& z, VecOut out) const;
  // True when evaluating at gamma would clip one of the propensity slots.
  bool clipping_active(const VecRef& gamma) const;
};

// ---------------------------------------------------------------------------
// Risk functionals.

// Checks handle output dimensions against the loss arity.
void check_arity(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g);

std::vector<double> pointwise_losses(const LossModel& loss, const FunctionHandle& theta,
                                     const FunctionHandle& g, std::span<const Sample> data);

double empirical_risk(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g,
                      std::span<const Sample> data);

struct RiskEstimate {
  double value = 0.0;
  double std_error = 0.0;  // zero for enumerated and empirical distributions
  std::size_t draws = 0;
};

inline constexpr std::size_t kDefaultMcDraws = 200000;

RiskEstimate population_risk(const LossModel& loss, const FunctionHandle& theta, const FunctionHandle& g,
                             const Distribution& dist, std::size_t mc_n = kDefaultMcDraws,
                             std::uint64_t seed = 0);

// Explicit minimizer, or a finite class to minimize over.
using Benchmark = std::variant<FunctionHandle, std::vector<FunctionHandle>>;

struct ExcessRisk {
  double value = 0.0;
  double risk = 0.0;
  double benchmark_risk = 0.0;
  std::size_t benchmark_index = 0;
};

ExcessRisk excess_risk(const LossModel& loss, const FunctionHandle& theta_hat, const FunctionHandle& g_ref,
                       const Distribution& dist, const Benchmark& benchmark,
                       std::size_t mc_n = kDefaultMcDraws, std::uint64_t seed = 0);

// Expectation of an arbitrary per-sample quantity.
double expectation(const Distribution& dist, const std::function<double(const Sample&)>& f,
                   std::size_t mc_n = kDefaultMcDraws, std::uint64_t seed = 0);

// Distances between handles under the data distribution. The Lambda-weighted
// norm needs the loss's index weight and the nuisance at which to evaluate it.
enum class NormKind { L2, L4, LambdaWeighted };

double distance(const FunctionHandle& f, const FunctionHandle& h, const Distribution& dist, NormKind kind,
                const LossModel* loss = nullptr, const FunctionHandle* g0 = nullptr,
                std::size_t mc_n = kDefaultMcDraws, std::uint64_t seed = 0);

}  // namespace osl
