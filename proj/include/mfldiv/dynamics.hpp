#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mfldiv/features.hpp"
#include "mfldiv/objectives.hpp"
#include "mfldiv/rng.hpp"

namespace mfldiv {

// Identifies the Gaussian draws of one step; particle i adds its index.
struct NoiseKey {
  Phase phase = Phase::kGeneric;
  std::uint64_t outer = 0;
  std::uint64_t inner = 0;
};

// x_i <- x_i - step * drift_i + sqrt(2 * sigma * step) * xi_i, synchronously for
// all particles. `drift` must have been evaluated on the pre-step ensemble.
ParticleEnsemble mfld_step(const ParticleEnsemble& ens, const RowMatrix& drift, double step,
                           double sigma, const CounterRng& rng, NoiseKey key, int threads = 1);

using GradField = std::function<Eigen::VectorXd(Eigen::Index, std::span<const double>)>;

ParticleEnsemble mfld_step(const ParticleEnsemble& ens, const GradField& field, double step,
                           double sigma, const CounterRng& rng, NoiseKey key, int threads = 1);

struct StepSizeViolation {
  std::string name;  // "alpha", "beta" or "gamma"
  double value = 0.0;
  double bound = 0.0;
};

// alpha <= 1/zeta1, beta <= 1/(lambda*zeta1), gamma <= 1/zeta2. A zero
// regularizer makes the matching bound vacuous.
std::vector<StepSizeViolation> validate_step_sizes(const RegParams& reg, double alpha, double beta,
                                                   double gamma);

std::string describe(const std::vector<StepSizeViolation>& violations);

}  // namespace mfldiv
