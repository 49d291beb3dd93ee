#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <string_view>

#include "mfldiv/errors.hpp"

namespace mfldiv {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// kLinear is the clipped linear feature R*tanh(<x, a>/R) with no bias or
// output weight; it exists for closed-form ridge checks of the dynamics.
enum class Activation { kTanh, kSigmoid, kLinear };

std::string_view to_string(Activation act);
Activation activation_from_string(std::string_view name);

// One mean-field neuron. Parameter layout (w1[0..input_dim), b, w2) for the
// tanh/sigmoid kinds, plain weights for kLinear.
struct NeuronSpec {
  int input_dim = 1;
  double clip_bound = 1.0;
  Activation activation = Activation::kTanh;

  int param_dim() const { return activation == Activation::kLinear ? input_dim : input_dim + 2; }
  void validate() const;
  bool operator==(const NeuronSpec&) const = default;
};

double neuron_eval(const NeuronSpec& spec, std::span<const double> params,
                   std::span<const double> input);
Eigen::VectorXd neuron_grad(const NeuronSpec& spec, std::span<const double> params,
                            std::span<const double> input);

// Empirical measure (1/N) sum_i delta_{x_i} over neuron parameters.
class ParticleEnsemble {
 public:
  ParticleEnsemble(NeuronSpec spec, RowMatrix particles);

  const NeuronSpec& spec() const { return spec_; }
  const RowMatrix& particles() const { return particles_; }
  RowMatrix& mutable_particles() { return particles_; }
  Eigen::Index size() const { return particles_.rows(); }
  std::span<const double> particle(Eigen::Index i) const {
    return {particles_.row(i).data(), static_cast<std::size_t>(particles_.cols())};
  }
  // Mean squared Euclidean norm over particles, E_mu ||x||^2.
  double mean_sq_norm() const;
  // Throws NumericalError naming the first non-finite row.
  void check_finite(std::string_view context) const;

 private:
  NeuronSpec spec_;
  RowMatrix particles_;
};

double ensemble_eval(const ParticleEnsemble& ens, std::span<const double> input);
// One output per input row. Rows are distributed over threads; each row sums
// over particles in index order, so the result does not depend on `threads`.
Eigen::VectorXd ensemble_eval_batch(const ParticleEnsemble& ens, const RowMatrix& inputs,
                                    int threads = 1);

// out.row(i) = sum_k weights[k] * grad_x Psi(inputs.row(k); particle i).
// The building block of every Wasserstein gradient in this library.
RowMatrix weighted_feature_gradients(const ParticleEnsemble& ens, const RowMatrix& inputs,
                                     const Eigen::VectorXd& weights, int threads = 1);

// Ensemble outputs plus the per-(particle, row) factors of the parameter
// gradient, so a forward pass can be followed by any number of cheap
// weighted backward passes on the same inputs.
class EnsembleForward {
 public:
  EnsembleForward(const ParticleEnsemble& ens, const RowMatrix& inputs, int threads = 1);

  const Eigen::VectorXd& outputs() const { return outputs_; }
  // Same contract as weighted_feature_gradients, bit-identical results.
  RowMatrix weighted_gradients(const Eigen::VectorXd& weights, int threads = 1) const;

 private:
  const ParticleEnsemble* ens_;
  const RowMatrix* inputs_;
  Eigen::VectorXd outputs_;
  // Row-major (particle, input row): scale of the w1/b block and of w2.
  RowMatrix inner_factor_;
  RowMatrix outer_factor_;
};

inline std::span<const double> row_span(const RowMatrix& m, Eigen::Index i) {
  return {m.row(i).data(), static_cast<std::size_t>(m.cols())};
}

}  // namespace mfldiv
