#include "mfldiv/features.hpp"

#include <cmath>

#include "mfldiv/parallel.hpp"

namespace mfldiv {

namespace {

// tanh through a single exp; exact at 0 and saturates to +-1 without overflow.
inline double fast_tanh(double u) { return 1.0 - 2.0 / (std::exp(2.0 * u) + 1.0); }

struct Activated {
  double value;
  double slope;
};

inline Activated activate(Activation act, double pre) {
  switch (act) {
    case Activation::kTanh: {
      const double t = fast_tanh(pre);
      return {t, 1.0 - t * t};
    }
    case Activation::kSigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-pre));
      return {s, s * (1.0 - s)};
    }
    case Activation::kLinear:
      break;
  }
  return {pre, 1.0};
}

inline double dot(const double* x, const double* a, int n) {
  double s = 0.0;
  for (int k = 0; k < n; ++k) s += x[k] * a[k];
  return s;
}

// Neuron value and gradient factors: grad = (inner * a, inner, outer) for the
// activated kinds, inner * a for kLinear.
struct NeuronPass {
  double value;
  double inner;
  double outer;
};

inline NeuronPass pass_raw(const NeuronSpec& spec, const double* x, const double* a) {
  const double r = spec.clip_bound;
  const int d = spec.input_dim;
  if (spec.activation == Activation::kLinear) {
    const double t = fast_tanh(dot(x, a, d) / r);
    return {r * t, 1.0 - t * t, 0.0};
  }
  const Activated h = activate(spec.activation, dot(x, a, d) + x[d]);
  const double w2 = x[d + 1];
  const double t = fast_tanh(w2 * h.value / r);
  const double c = 1.0 - t * t;
  return {r * t, c * w2 * h.slope, c * h.value};
}

inline void add_grad(const NeuronSpec& spec, const double* a, double inner, double outer,
                     double scale, double* g) {
  const int d = spec.input_dim;
  const double si = scale * inner;
  for (int k = 0; k < d; ++k) g[k] += si * a[k];
  if (spec.activation == Activation::kLinear) return;
  g[d] += si;
  g[d + 1] += scale * outer;
}

void check_dims(const NeuronSpec& spec, std::span<const double> params,
                std::span<const double> input) {
  MFLDIV_REQUIRE(static_cast<int>(params.size()) == spec.param_dim(),
                 "parameter vector has length " + std::to_string(params.size()) + ", expected " +
                     std::to_string(spec.param_dim()));
  MFLDIV_REQUIRE(static_cast<int>(input.size()) == spec.input_dim,
                 "input has length " + std::to_string(input.size()) + ", expected " +
                     std::to_string(spec.input_dim));
}

void check_inputs(const NeuronSpec& spec, const RowMatrix& inputs) {
  MFLDIV_REQUIRE(inputs.cols() == spec.input_dim,
                 "input batch has " + std::to_string(inputs.cols()) + " columns, expected " +
                     std::to_string(spec.input_dim));
}

}  // namespace

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::kTanh:
      return "tanh";
    case Activation::kSigmoid:
      return "sigmoid";
    case Activation::kLinear:
      return "linear";
  }
  return "?";
}

Activation activation_from_string(std::string_view name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "linear") return Activation::kLinear;
  throw ContractError("unknown activation '" + std::string(name) + "'");
}

void NeuronSpec::validate() const {
  MFLDIV_REQUIRE(input_dim >= 1, "input_dim must be positive");
  MFLDIV_REQUIRE(clip_bound > 0.0 && std::isfinite(clip_bound), "clip bound must be positive");
}

double neuron_eval(const NeuronSpec& spec, std::span<const double> params,
                   std::span<const double> input) {
  check_dims(spec, params, input);
  return pass_raw(spec, params.data(), input.data()).value;
}

Eigen::VectorXd neuron_grad(const NeuronSpec& spec, std::span<const double> params,
                            std::span<const double> input) {
  check_dims(spec, params, input);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(spec.param_dim());
  const NeuronPass p = pass_raw(spec, params.data(), input.data());
  add_grad(spec, input.data(), p.inner, p.outer, 1.0, g.data());
  return g;
}

ParticleEnsemble::ParticleEnsemble(NeuronSpec spec, RowMatrix particles)
    : spec_(spec), particles_(std::move(particles)) {
  spec_.validate();
  MFLDIV_REQUIRE(particles_.rows() >= 1, "ensemble needs at least one particle");
  MFLDIV_REQUIRE(particles_.cols() == spec_.param_dim(),
                 "particle matrix has " + std::to_string(particles_.cols()) +
                     " columns, expected " + std::to_string(spec_.param_dim()));
}

double ParticleEnsemble::mean_sq_norm() const {
  return particles_.squaredNorm() / static_cast<double>(particles_.rows());
}

void ParticleEnsemble::check_finite(std::string_view context) const {
  for (Eigen::Index i = 0; i < particles_.rows(); ++i) {
    if (!particles_.row(i).allFinite()) {
      throw NumericalError(std::string(context) + ": non-finite particle at index " +
                           std::to_string(i));
    }
  }
}

double ensemble_eval(const ParticleEnsemble& ens, std::span<const double> input) {
  const NeuronSpec& spec = ens.spec();
  MFLDIV_REQUIRE(static_cast<int>(input.size()) == spec.input_dim,
                 "input has length " + std::to_string(input.size()) + ", expected " +
                     std::to_string(spec.input_dim));
  const RowMatrix& p = ens.particles();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) sum += pass_raw(spec, p.row(i).data(), input.data()).value;
  return sum * (1.0 / static_cast<double>(p.rows()));
}

Eigen::VectorXd ensemble_eval_batch(const ParticleEnsemble& ens, const RowMatrix& inputs,
                                    int threads) {
  const NeuronSpec& spec = ens.spec();
  check_inputs(spec, inputs);
  const RowMatrix& p = ens.particles();
  const double inv_n = 1.0 / static_cast<double>(p.rows());
  Eigen::VectorXd out(inputs.rows());
  parallel_for(static_cast<std::size_t>(inputs.rows()), threads,
               [&](std::size_t begin, std::size_t end) {
                 for (std::size_t k = begin; k < end; ++k) {
                   const double* a = inputs.row(static_cast<Eigen::Index>(k)).data();
                   double sum = 0.0;
                   for (Eigen::Index i = 0; i < p.rows(); ++i)
                     sum += pass_raw(spec, p.row(i).data(), a).value;
                   out[static_cast<Eigen::Index>(k)] = sum * inv_n;
                 }
               });
  return out;
}

RowMatrix weighted_feature_gradients(const ParticleEnsemble& ens, const RowMatrix& inputs,
                                     const Eigen::VectorXd& weights, int threads) {
  const NeuronSpec& spec = ens.spec();
  check_inputs(spec, inputs);
  MFLDIV_REQUIRE(inputs.rows() == weights.size(), "weights must match the number of inputs");
  const RowMatrix& p = ens.particles();
  RowMatrix out = RowMatrix::Zero(p.rows(), p.cols());
  parallel_for(static_cast<std::size_t>(p.rows()), threads,
               [&](std::size_t begin, std::size_t end) {
                 for (std::size_t i = begin; i < end; ++i) {
                   const auto row = static_cast<Eigen::Index>(i);
                   const double* x = p.row(row).data();
                   double* g = out.row(row).data();
                   for (Eigen::Index k = 0; k < inputs.rows(); ++k) {
                     const double* a = inputs.row(k).data();
                     const NeuronPass np = pass_raw(spec, x, a);
                     add_grad(spec, a, np.inner, np.outer, weights[k], g);
                   }
                 }
               });
  return out;
}

EnsembleForward::EnsembleForward(const ParticleEnsemble& ens, const RowMatrix& inputs,
                                 int threads)
    : ens_(&ens), inputs_(&inputs) {
  const NeuronSpec& spec = ens.spec();
  check_inputs(spec, inputs);
  const RowMatrix& p = ens.particles();
  const Eigen::Index n = p.rows();
  const Eigen::Index b = inputs.rows();
  outputs_.resize(b);
  inner_factor_.resize(n, b);
  outer_factor_.resize(n, b);
  const double inv_n = 1.0 / static_cast<double>(n);
  parallel_for(static_cast<std::size_t>(b), threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t kk = begin; kk < end; ++kk) {
      const auto k = static_cast<Eigen::Index>(kk);
      const double* a = inputs.row(k).data();
      double sum = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        const NeuronPass np = pass_raw(spec, p.row(i).data(), a);
        sum += np.value;
        inner_factor_(i, k) = np.inner;
        outer_factor_(i, k) = np.outer;
      }
      outputs_[k] = sum * inv_n;
    }
  });
}

RowMatrix EnsembleForward::weighted_gradients(const Eigen::VectorXd& weights, int threads) const {
  const NeuronSpec& spec = ens_->spec();
  const RowMatrix& inputs = *inputs_;
  MFLDIV_REQUIRE(inputs.rows() == weights.size(), "weights must match the number of inputs");
  const RowMatrix& p = ens_->particles();
  RowMatrix out = RowMatrix::Zero(p.rows(), p.cols());
  parallel_for(static_cast<std::size_t>(p.rows()), threads,
               [&](std::size_t begin, std::size_t end) {
                 for (std::size_t ii = begin; ii < end; ++ii) {
                   const auto i = static_cast<Eigen::Index>(ii);
                   double* g = out.row(i).data();
                   for (Eigen::Index k = 0; k < inputs.rows(); ++k) {
                     add_grad(spec, inputs.row(k).data(), inner_factor_(i, k), outer_factor_(i, k),
                              weights[k], g);
                   }
                 }
               });
  return out;
}

}  // namespace mfldiv
