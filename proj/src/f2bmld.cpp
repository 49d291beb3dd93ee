#include "mfldiv/f2bmld.hpp"

#include <chrono>
#include <cmath>

#include "mfldiv/errors.hpp"

namespace mfldiv {

namespace {

double mean_particle_norm(const ParticleEnsemble& ens) {
  return ens.particles().rowwise().norm().mean();
}

void guard(const ParticleEnsemble& ens, const TrainConfig& cfg, const char* what,
           std::uint64_t iter) {
  ens.check_finite(what);
  const double norm = mean_particle_norm(ens);
  if (!(norm <= cfg.divergence_norm)) {
    throw NumericalError(std::string(what) + " diverged at outer iteration " +
                         std::to_string(iter) + ": mean particle norm " + std::to_string(norm));
  }
}

// Trace metrics from one forward pass per (ensemble, input block); equal to
// f1/f2/lagrangian_monitor on the same rows.
TraceRecord monitor_record(const ParticleEnsemble& x, const InnerEnsembles& inner,
                           const StageOneBatch& b1, const StageTwoBatch& b2, const RegParams& reg,
                           const StageTwoForm& form, int threads) {
  const Eigen::VectorXd hx = ensemble_eval_batch(x, b1.a, threads);
  const Eigen::VectorXd star1 = ensemble_eval_batch(inner.z_star, b1.w, threads);
  const Eigen::VectorXd tilde1 = ensemble_eval_batch(inner.tilde_z, b1.w, threads);
  Eigen::VectorXd star2 = form.projected * ensemble_eval_batch(inner.z_star, b2.w, threads) - b2.y;
  Eigen::VectorXd tilde2 = form.projected * ensemble_eval_batch(inner.tilde_z, b2.w, threads) - b2.y;
  if (form.has_direct()) {
    const Eigen::VectorXd hv = form.direct * ensemble_eval_batch(x, b2.v, threads);
    star2 += hv;
    tilde2 += hv;
  }
  const Eigen::VectorXd c1 = row_factors(b1.weight, b1.size());
  const Eigen::VectorXd c2 = row_factors(b2.weight, b2.size());
  const double l2_x = 0.5 * reg.zeta2 * x.mean_sq_norm();
  const double f1_star = 0.5 * (star1 - hx).cwiseAbs2().dot(c1) + 0.5 * reg.zeta1 * inner.z_star.mean_sq_norm();
  const double f1_tilde = 0.5 * (tilde1 - hx).cwiseAbs2().dot(c1) + 0.5 * reg.zeta1 * inner.tilde_z.mean_sq_norm();
  TraceRecord rec;
  rec.f1 = f1_star;
  rec.f2 = 0.5 * star2.cwiseAbs2().dot(c2) + l2_x;
  rec.gap = f1_tilde - f1_star;
  rec.lagrangian = 0.5 * tilde2.cwiseAbs2().dot(c2) + l2_x + reg.lambda * rec.gap;
  return rec;
}

}  // namespace

void TrainConfig::validate() const {
  reg.validate();
  MFLDIV_REQUIRE(inner_steps >= 0 && outer_steps >= 0, "iteration counts must be non-negative");
  MFLDIV_REQUIRE(n_x >= 1 && n_z >= 1, "particle counts must be positive");
  MFLDIV_REQUIRE(batch_size >= 1, "batch size must be positive");
  MFLDIV_REQUIRE(monitor_rows >= 1, "monitor_rows must be positive");
  MFLDIV_REQUIRE(clip_bound > 0.0, "clip bound must be positive");
  MFLDIV_REQUIRE(threads >= 1, "threads must be positive");
  const auto violations = validate_step_sizes(reg, alpha, beta, gamma);
  MFLDIV_REQUIRE(violations.empty(), "step-size rule violated: " + describe(violations));
}

ParticleEnsemble gaussian_ensemble(const NeuronSpec& spec, int count, const CounterRng& rng,
                                   Phase phase, std::uint64_t outer) {
  RowMatrix p(count, spec.param_dim());
  for (int i = 0; i < count; ++i) {
    const RngKey key = rng.key(phase, outer, 0, static_cast<std::uint64_t>(i));
    for (int c = 0; c < spec.param_dim(); ++c) p(i, c) = rng.normal(key, static_cast<std::uint64_t>(c));
  }
  return ParticleEnsemble(spec, std::move(p));
}

InnerEnsembles initial_inner(const NeuronSpec& z_spec, const TrainConfig& cfg,
                             std::uint64_t outer_iter) {
  const CounterRng rng(cfg.seed);
  ParticleEnsemble z = gaussian_ensemble(z_spec, cfg.n_z, rng, Phase::kInitZ, outer_iter);
  return {z, z};
}

NeuronSpec treatment_spec(const TrainConfig& cfg, const BilevelData& data) {
  return {data.treatment_dim(), cfg.clip_bound, cfg.activation};
}

NeuronSpec instrument_spec(const TrainConfig& cfg, const BilevelData& data) {
  return {data.instrument_dim(), cfg.clip_bound, cfg.activation};
}

std::vector<Eigen::Index> sample_rows(Eigen::Index population, int count, const CounterRng& rng,
                                      RngKey key) {
  MFLDIV_REQUIRE(population >= 1 && count >= 1, "cannot sample from an empty population");
  std::vector<Eigen::Index> rows;
  if (count >= population) {
    rows.resize(static_cast<std::size_t>(population));
    for (Eigen::Index i = 0; i < population; ++i) rows[static_cast<std::size_t>(i)] = i;
    return rows;
  }
  // Floyd's algorithm: exactly `count` draws, no rejection loop.
  rows.reserve(static_cast<std::size_t>(count));
  std::vector<char> taken(static_cast<std::size_t>(population), 0);
  std::uint64_t counter = 0;
  for (Eigen::Index j = population - count; j < population; ++j) {
    auto t = static_cast<Eigen::Index>(rng.below(key, counter++, static_cast<std::uint64_t>(j + 1)));
    if (taken[static_cast<std::size_t>(t)]) t = j;
    taken[static_cast<std::size_t>(t)] = 1;
    rows.push_back(t);
  }
  return rows;
}

InnerEnsembles inner_loop(const ParticleEnsemble& ens_x, const BilevelData& data,
                          const TrainConfig& cfg, InnerEnsembles start, std::uint64_t outer_iter) {
  const CounterRng rng(cfg.seed);
  const RegParams& reg = cfg.reg;
  const StageTwoForm& form = data.form;
  const int threads = cfg.threads;
  ParticleEnsemble z = std::move(start.z_star);
  ParticleEnsemble tz = std::move(start.tilde_z);

  for (int t = 0; t < cfg.inner_steps; ++t) {
    const auto tt = static_cast<std::uint64_t>(t);
    const auto rows1 = sample_rows(data.m(), cfg.batch_size, rng,
                                   rng.key(Phase::kBatchStage1, outer_iter, tt));
    const auto rows2 = sample_rows(data.n(), cfg.batch_size, rng,
                                   rng.key(Phase::kBatchStage2, outer_iter, tt));
    const StageOneBatch b1 = data.stage_one(rows1);
    const StageTwoBatch b2 = data.stage_two(rows2);
    const Eigen::VectorXd c1 = row_factors(b1.weight, b1.size());
    const Eigen::VectorXd c2 = row_factors(b2.weight, b2.size());
    const Eigen::VectorXd targets = ensemble_eval_batch(ens_x, b1.a, threads);

    // z <- z - alpha grad2 F1(x, z) + sqrt(2 alpha sigma1) xi
    {
      const EnsembleForward fw(z, b1.w, threads);
      RowMatrix drift = fw.weighted_gradients((fw.outputs() - targets).cwiseProduct(c1), threads);
      drift += reg.zeta1 * z.particles();
      z = mfld_step(z, drift, cfg.alpha, reg.sigma1, rng, {Phase::kNoiseZ, outer_iter, tt}, threads);
    }
    // z~ <- z~ - beta (grad U2 + lambda grad2 F1) + sqrt(2 beta lambda sigma1) xi~
    {
      const EnsembleForward fw1(tz, b1.w, threads);
      const EnsembleForward fw2(tz, b2.w, threads);
      Eigen::VectorXd resid2 = form.projected * fw2.outputs() - b2.y;
      if (form.has_direct()) resid2 += form.direct * ensemble_eval_batch(ens_x, b2.v, threads);
      RowMatrix drift =
          fw1.weighted_gradients(reg.lambda * (fw1.outputs() - targets).cwiseProduct(c1), threads);
      drift += fw2.weighted_gradients(form.projected * resid2.cwiseProduct(c2), threads);
      drift += (reg.lambda * reg.zeta1) * tz.particles();
      tz = mfld_step(tz, drift, cfg.beta, reg.lambda * reg.sigma1, rng,
                     {Phase::kNoiseTildeZ, outer_iter, tt}, threads);
    }
  }
  return {std::move(z), std::move(tz)};
}

RowMatrix outer_drift(const ParticleEnsemble& ens_x, const ParticleEnsemble& tilde_z,
                      const ParticleEnsemble& z_star, const StageOneBatch& b1,
                      const StageTwoBatch& b2, const StageTwoForm& form, const TrainConfig& cfg) {
  MFLDIV_REQUIRE(b1.size() >= 1, "empty stage I batch");
  const RegParams& reg = cfg.reg;
  const int threads = cfg.threads;
  // grad1 U1(x, z~) - grad1 U1(x, z*) = E[(g*(w) - g~(w)) grad Psi_a(x)]
  const Eigen::VectorXd diff =
      ensemble_eval_batch(z_star, b1.w, threads) - ensemble_eval_batch(tilde_z, b1.w, threads);
  RowMatrix drift = weighted_feature_gradients(
      ens_x, b1.a, reg.lambda * diff.cwiseProduct(row_factors(b1.weight, b1.size())), threads);
  drift += reg.zeta2 * ens_x.particles();
  if (form.has_direct()) {
    MFLDIV_REQUIRE(b2.size() >= 1 && b2.v.rows() == b2.size(), "direct term needs stage II rows");
    const EnsembleForward fw(ens_x, b2.v, threads);
    const Eigen::VectorXd resid2 = form.direct * fw.outputs() +
                                   form.projected * ensemble_eval_batch(tilde_z, b2.w, threads) -
                                   b2.y;
    drift += fw.weighted_gradients(
        form.direct * resid2.cwiseProduct(row_factors(b2.weight, b2.size())), threads);
  }
  return drift;
}

ParticleEnsemble outer_step(const ParticleEnsemble& ens_x, const ParticleEnsemble& tilde_z,
                            const ParticleEnsemble& z_star, const StageOneBatch& b1,
                            const StageTwoBatch& b2, const StageTwoForm& form,
                            const TrainConfig& cfg, std::uint64_t outer_iter) {
  const CounterRng rng(cfg.seed);
  const RowMatrix drift = outer_drift(ens_x, tilde_z, z_star, b1, b2, form, cfg);
  return mfld_step(ens_x, drift, cfg.gamma, cfg.reg.sigma2, rng, {Phase::kNoiseX, outer_iter, 0},
                   cfg.threads);
}

TrainedModel train(const TrainConfig& cfg, const BilevelData& data, const ValueProbe& probe) {
  cfg.validate();
  data.validate();
  const CounterRng rng(cfg.seed);
  const NeuronSpec x_spec = treatment_spec(cfg, data);
  const NeuronSpec z_spec = instrument_spec(cfg, data);
  const StageTwoForm& form = data.form;

  ParticleEnsemble x = gaussian_ensemble(x_spec, cfg.n_x, rng, Phase::kInitX);
  InnerEnsembles inner = initial_inner(z_spec, cfg, 0);
  const StageOneBatch mon1 = data.stage_one_head(cfg.monitor_rows);
  const StageTwoBatch mon2 = data.stage_two_head(cfg.monitor_rows);

  std::vector<TraceRecord> trace;
  trace.reserve(static_cast<std::size_t>(cfg.outer_steps) + 1);
  const auto t0 = std::chrono::steady_clock::now();

  for (int s = 0; s <= cfg.outer_steps; ++s) {
    const auto ss = static_cast<std::uint64_t>(s);
    if (!cfg.warm_start && s > 0) inner = initial_inner(z_spec, cfg, ss);
    inner = inner_loop(x, data, cfg, std::move(inner), ss);
    guard(inner.z_star, cfg, "stage I ensemble", ss);
    guard(inner.tilde_z, cfg, "penalized stage I ensemble", ss);

    TraceRecord rec = monitor_record(x, inner, mon1, mon2, cfg.reg, form, cfg.threads);
    rec.iter = s;
    rec.mean_norm_x = mean_particle_norm(x);
    if (probe) rec.value = probe(x);
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    for (double v : {rec.f1, rec.f2, rec.gap, rec.lagrangian, rec.mean_norm_x}) {
      if (!std::isfinite(v)) {
        throw NumericalError("non-finite trace metric at outer iteration " + std::to_string(s));
      }
    }
    trace.push_back(rec);
    if (s == cfg.outer_steps) break;

    const auto rows1 = sample_rows(data.m(), cfg.batch_size, rng, rng.key(Phase::kBatchOuter, ss, 0));
    const StageOneBatch b1 = data.stage_one(rows1);
    StageTwoBatch b2;
    if (form.has_direct()) {
      const auto rows2 = sample_rows(data.n(), cfg.batch_size, rng, rng.key(Phase::kBatchOuter, ss, 1));
      b2 = data.stage_two(rows2);
    }
    x = outer_step(x, inner.tilde_z, inner.z_star, b1, b2, form, cfg, ss);
    guard(x, cfg, "treatment ensemble", ss);
  }
  return TrainedModel{std::move(x), std::move(inner), std::move(trace), cfg, form};
}

double predict(const TrainedModel& model, std::span<const double> a) {
  return ensemble_eval(model.x, a);
}

std::vector<double> instrument_grid(const StructuralSpec& spec, int points) {
  MFLDIV_REQUIRE(points >= 1, "grid needs at least one point");
  std::vector<double> grid(static_cast<std::size_t>(points));
  const double r = spec.instrument_range;
  for (int k = 0; k < points; ++k) grid[static_cast<std::size_t>(k)] = -r + (2.0 * r) * (k + 0.5) / points;
  return grid;
}

double projected_risk(const std::function<double(double)>& h_hat,
                      const std::function<double(double)>& h_true, const StructuralSpec& spec,
                      std::span<const double> w_grid, int n_quad) {
  MFLDIV_REQUIRE(!w_grid.empty(), "empty instrument grid");
  double sum = 0.0;
  for (double w : w_grid) {
    const double d = oracle_th(spec, h_hat, w, n_quad) - oracle_th(spec, h_true, w, n_quad);
    sum += d * d;
  }
  return sum / static_cast<double>(w_grid.size());
}

double projected_risk(const std::function<double(double)>& h_hat, const StructuralSpec& spec,
                      std::span<const double> w_grid, int n_quad) {
  MFLDIV_REQUIRE(!w_grid.empty(), "empty instrument grid");
  double sum = 0.0;
  for (double w : w_grid) {
    const double d = oracle_th(spec, h_hat, w, n_quad) - structural_th(spec, w);
    sum += d * d;
  }
  return sum / static_cast<double>(w_grid.size());
}

double projected_risk(const TrainedModel& model, const StructuralSpec& spec,
                      std::span<const double> w_grid, int n_quad) {
  MFLDIV_REQUIRE(model.x.spec().input_dim == 1, "projected risk needs a scalar treatment");
  return projected_risk([&](double a) { return predict(model, a); }, spec, w_grid, n_quad);
}

double treatment_l2_risk(const std::function<double(double)>& h_hat, const StructuralSpec& spec,
                         int grid_points, int n_quad) {
  const auto grid = instrument_grid(spec, grid_points);
  double sum = 0.0;
  for (double w : grid) {
    sum += oracle_th(spec, [&](double a) { const double d = h_hat(a) - spec.h(a); return d * d; }, w, n_quad);
  }
  return sum / static_cast<double>(grid.size());
}

TerminalMetrics terminal_metrics(const TrainedModel& model, const BilevelData& data) {
  const StageOneBatch b1 = data.stage_one_head(data.m());
  const StageTwoBatch b2 = data.stage_two_head(data.n());
  const RegParams& reg = model.config.reg;
  TerminalMetrics out;
  out.f1 = f1(model.x, model.inner.z_star, b1, reg);
  out.f2 = f2(model.x, model.inner.z_star, b2, reg, data.form);
  const LagrangianValue lag =
      lagrangian_monitor(model.x, model.inner.tilde_z, model.inner.z_star, b1, b2, reg, data.form);
  out.gap = lag.gap;
  out.lagrangian = lag.value;
  out.stage2_risk = u2(model.x, model.inner.z_star, b2, data.form);
  return out;
}

}  // namespace mfldiv
