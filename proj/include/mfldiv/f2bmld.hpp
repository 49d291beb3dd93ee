#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "mfldiv/dynamics.hpp"
#include "mfldiv/features.hpp"
#include "mfldiv/npiv_data.hpp"
#include "mfldiv/objectives.hpp"
#include "mfldiv/rng.hpp"

namespace mfldiv {

struct TrainConfig {
  RegParams reg;
  double alpha = 1e-4;  // stage-I dynamics step
  double beta = 1e-4;   // penalized stage-I dynamics step
  double gamma = 1e-4;  // outer step
  int inner_steps = 10;
  int outer_steps = 1000;
  int n_x = 50;
  int n_z = 50;
  int batch_size = 32;
  bool warm_start = true;
  std::uint64_t seed = 0;
  double clip_bound = 10.0;
  Activation activation = Activation::kTanh;
  // Rows (from the top of each split) used for per-iteration trace metrics.
  int monitor_rows = 256;
  // Abort when the mean particle norm of any ensemble exceeds this.
  double divergence_norm = 1e6;
  // Worker threads for particle-level work; results do not depend on it.
  int threads = 1;

  // Throws ContractError on non-positive counts or step-size rule violations.
  void validate() const;
};

struct TraceRecord {
  int iter = 0;
  double f1 = 0.0;          // F1(x, z*) on the monitor rows
  double f2 = 0.0;          // F2(x, z*) on the monitor rows
  double gap = 0.0;         // F1(x, z~) - F1(x, z*)
  double lagrangian = 0.0;  // F2(x, z~) + lambda * gap
  double mean_norm_x = 0.0; // mean Euclidean norm of the x particles
  double wall_ms = 0.0;
  std::optional<double> value;  // policy value, when a probe is attached
};

struct InnerEnsembles {
  ParticleEnsemble z_star;   // approximates argmin F1(x, .)
  ParticleEnsemble tilde_z;  // approximates argmin F2(x, .) + lambda F1(x, .)
};

struct TrainedModel {
  ParticleEnsemble x;
  InnerEnsembles inner;
  std::vector<TraceRecord> trace;
  TrainConfig config;
  StageTwoForm form;
};

// Standard Gaussian particles keyed by (phase, outer iteration).
ParticleEnsemble gaussian_ensemble(const NeuronSpec& spec, int count, const CounterRng& rng,
                                   Phase phase, std::uint64_t outer = 0);
InnerEnsembles initial_inner(const NeuronSpec& z_spec, const TrainConfig& cfg,
                             std::uint64_t outer_iter);

NeuronSpec treatment_spec(const TrainConfig& cfg, const BilevelData& data);
NeuronSpec instrument_spec(const TrainConfig& cfg, const BilevelData& data);

// Uniform sample of min(count, population) distinct rows.
std::vector<Eigen::Index> sample_rows(Eigen::Index population, int count, const CounterRng& rng,
                                      RngKey key);

// T steps of each inner dynamics with ens_x held fixed, starting from `start`.
// Both runs see the same stage-I batch at a given step.
InnerEnsembles inner_loop(const ParticleEnsemble& ens_x, const BilevelData& data,
                          const TrainConfig& cfg, InnerEnsembles start, std::uint64_t outer_iter);

// One synchronous outer step with drift
//   zeta2 x + lambda (grad1 U1(x, z~) - grad1 U1(x, z*)) [+ direct stage-II term].
// `b2` is only read when the stage-II form has a direct term.
ParticleEnsemble outer_step(const ParticleEnsemble& ens_x, const ParticleEnsemble& tilde_z,
                            const ParticleEnsemble& z_star, const StageOneBatch& b1,
                            const StageTwoBatch& b2, const StageTwoForm& form,
                            const TrainConfig& cfg, std::uint64_t outer_iter);

// Drift used by outer_step, exposed for gradient checks.
RowMatrix outer_drift(const ParticleEnsemble& ens_x, const ParticleEnsemble& tilde_z,
                      const ParticleEnsemble& z_star, const StageOneBatch& b1,
                      const StageTwoBatch& b2, const StageTwoForm& form, const TrainConfig& cfg);

using ValueProbe = std::function<double(const ParticleEnsemble& ens_x)>;

TrainedModel train(const TrainConfig& cfg, const BilevelData& data,
                   const ValueProbe& probe = nullptr);
inline TrainedModel train(const TrainConfig& cfg, const NpivDataset& ds) {
  return train(cfg, BilevelData::from_npiv(ds));
}

double predict(const TrainedModel& model, std::span<const double> a);
inline double predict(const TrainedModel& model, double a) {
  return predict(model, std::span<const double>(&a, 1));
}

// Evenly spaced midpoints covering the instrument support [-r, r].
std::vector<double> instrument_grid(const StructuralSpec& spec, int points = 61);

// Mean over the grid of ((T h_hat)(w) - (T h)(w))^2.
double projected_risk(const std::function<double(double)>& h_hat,
                      const std::function<double(double)>& h_true, const StructuralSpec& spec,
                      std::span<const double> w_grid, int n_quad = 64);
// Same against the spec's own structural function, using its closed-form T h.
double projected_risk(const std::function<double(double)>& h_hat, const StructuralSpec& spec,
                      std::span<const double> w_grid, int n_quad = 64);
double projected_risk(const TrainedModel& model, const StructuralSpec& spec,
                      std::span<const double> w_grid, int n_quad = 64);
// E_A[(h_hat(A) - h(A))^2] under the generative law, by grid x quadrature.
double treatment_l2_risk(const std::function<double(double)>& h_hat, const StructuralSpec& spec,
                         int grid_points = 61, int n_quad = 64);

// Full-data objective values at the end of training.
struct TerminalMetrics {
  double f1 = 0.0;
  double f2 = 0.0;
  double gap = 0.0;
  double lagrangian = 0.0;
  double stage2_risk = 0.0;  // U2 at z*, the unregularized outer objective
};
TerminalMetrics terminal_metrics(const TrainedModel& model, const BilevelData& data);

}  // namespace mfldiv
