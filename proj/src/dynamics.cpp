#include "mfldiv/dynamics.hpp"

#include <cmath>
#include <sstream>

#include "mfldiv/errors.hpp"
#include "mfldiv/parallel.hpp"

namespace mfldiv {

ParticleEnsemble mfld_step(const ParticleEnsemble& ens, const RowMatrix& drift, double step,
                           double sigma, const CounterRng& rng, NoiseKey key, int threads) {
  MFLDIV_REQUIRE(step > 0.0 && std::isfinite(step), "step size must be positive");
  MFLDIV_REQUIRE(sigma >= 0.0 && std::isfinite(sigma), "noise level must be non-negative");
  const RowMatrix& x = ens.particles();
  MFLDIV_REQUIRE(drift.rows() == x.rows() && drift.cols() == x.cols(),
                 "drift shape does not match the ensemble");
  for (Eigen::Index i = 0; i < drift.rows(); ++i) {
    if (!drift.row(i).allFinite()) {
      throw NumericalError("non-finite gradient at particle " + std::to_string(i));
    }
  }

  RowMatrix next = x - step * drift;
  if (sigma > 0.0) {
    const double scale = std::sqrt(2.0 * sigma * step);
    const auto dim = static_cast<std::uint64_t>(x.cols());
    parallel_for(static_cast<std::size_t>(x.rows()), threads,
                 [&](std::size_t begin, std::size_t end) {
                   for (std::size_t i = begin; i < end; ++i) {
                     const RngKey k = rng.key(key.phase, key.outer, key.inner, i);
                     auto row = next.row(static_cast<Eigen::Index>(i));
                     for (std::uint64_t c = 0; c < dim; ++c) {
                       row[static_cast<Eigen::Index>(c)] += scale * rng.normal(k, c);
                     }
                   }
                 });
  }
  return ParticleEnsemble(ens.spec(), std::move(next));
}

ParticleEnsemble mfld_step(const ParticleEnsemble& ens, const GradField& field, double step,
                           double sigma, const CounterRng& rng, NoiseKey key, int threads) {
  const RowMatrix& x = ens.particles();
  RowMatrix drift(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Eigen::VectorXd g = field(i, ens.particle(i));
    MFLDIV_REQUIRE(g.size() == x.cols(), "gradient field returned the wrong dimension");
    drift.row(i) = g.transpose();
  }
  return mfld_step(ens, drift, step, sigma, rng, key, threads);
}

std::vector<StepSizeViolation> validate_step_sizes(const RegParams& reg, double alpha, double beta,
                                                   double gamma) {
  std::vector<StepSizeViolation> out;
  auto check = [&](const char* name, double value, double scale) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      out.push_back({name, value, 0.0});
      return;
    }
    if (scale > 0.0 && value > 1.0 / scale) out.push_back({name, value, 1.0 / scale});
  };
  check("alpha", alpha, reg.zeta1);
  check("beta", beta, reg.lambda * reg.zeta1);
  check("gamma", gamma, reg.zeta2);
  return out;
}

std::string describe(const std::vector<StepSizeViolation>& violations) {
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size(); ++i) {
    const auto& v = violations[i];
    if (i) os << "; ";
    if (v.bound > 0.0) {
      os << v.name << "=" << v.value << " exceeds bound " << v.bound;
    } else {
      os << v.name << "=" << v.value << " must be positive";
    }
  }
  return os.str();
}

}  // namespace mfldiv
