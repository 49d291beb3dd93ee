#include "mfldiv/objectives.hpp"

#include <cmath>
#include <map>
#include <vector>

#include "mfldiv/errors.hpp"
#include "mfldiv/npiv_data.hpp"

namespace mfldiv {

namespace {

void check_weight(const Eigen::VectorXd& weight, Eigen::Index rows) {
  if (weight.size() == 0) return;
  MFLDIV_REQUIRE(weight.size() == rows, "batch weights do not match the row count");
  MFLDIV_REQUIRE((weight.array() > 0.0).all() && weight.allFinite(), "batch weights must be positive");
}

void check_stage_one(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                     const StageOneBatch& b) {
  MFLDIV_REQUIRE(b.size() >= 1, "empty stage I batch");
  MFLDIV_REQUIRE(b.a.rows() == b.w.rows(), "stage I batch row counts differ");
  MFLDIV_REQUIRE(b.a.cols() == ens_x.spec().input_dim, "treatment dimension mismatch");
  MFLDIV_REQUIRE(b.w.cols() == ens_z.spec().input_dim, "instrument dimension mismatch");
  check_weight(b.weight, b.size());
}

void check_stage_two(const ParticleEnsemble* ens_x, const ParticleEnsemble& ens_z,
                     const StageTwoBatch& b, const StageTwoForm& form) {
  MFLDIV_REQUIRE(b.size() >= 1, "empty stage II batch");
  MFLDIV_REQUIRE(b.y.size() == b.w.rows(), "stage II batch row counts differ");
  MFLDIV_REQUIRE(b.w.cols() == ens_z.spec().input_dim, "instrument dimension mismatch");
  check_weight(b.weight, b.size());
  if (form.has_direct()) {
    MFLDIV_REQUIRE(ens_x != nullptr, "direct stage II form needs the treatment ensemble");
    MFLDIV_REQUIRE(b.v.rows() == b.w.rows(), "direct stage II inputs missing");
    MFLDIV_REQUIRE(b.v.cols() == ens_x->spec().input_dim, "direct input dimension mismatch");
  }
}

void check_param(const ParticleEnsemble& ens, std::span<const double> p) {
  MFLDIV_REQUIRE(static_cast<int>(p.size()) == ens.spec().param_dim(),
                 "parameter vector has wrong length");
}

// g_z(w) - h_x(a) per row.
Eigen::VectorXd stage_one_residual(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                                   const StageOneBatch& b) {
  return ensemble_eval_batch(ens_z, b.w) - ensemble_eval_batch(ens_x, b.a);
}

Eigen::VectorXd stage_two_residual(const ParticleEnsemble* ens_x, const ParticleEnsemble& ens_z,
                                   const StageTwoBatch& b, const StageTwoForm& form) {
  Eigen::VectorXd r = form.projected * ensemble_eval_batch(ens_z, b.w) - b.y;
  if (form.has_direct()) r += form.direct * ensemble_eval_batch(*ens_x, b.v);
  return r;
}

Eigen::VectorXd point_gradient(const NeuronSpec& spec, const RowMatrix& inputs,
                               const Eigen::VectorXd& weights, std::span<const double> p) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(spec.param_dim());
  for (Eigen::Index k = 0; k < inputs.rows(); ++k) g += weights[k] * neuron_grad(spec, p, row_span(inputs, k));
  return g;
}

double half_mean_square(const Eigen::VectorXd& r, const Eigen::VectorXd& weight) {
  return 0.5 * r.cwiseAbs2().dot(row_factors(weight, r.size()));
}

// Rows with identical bytes in every listed block share an index.
template <typename RowKey>
std::vector<Eigen::Index> first_occurrence(Eigen::Index rows, RowKey key,
                                           std::vector<Eigen::Index>& slot) {
  std::map<std::vector<double>, Eigen::Index> seen;
  std::vector<Eigen::Index> firsts;
  slot.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index i = 0; i < rows; ++i) {
    auto [it, fresh] = seen.emplace(key(i), static_cast<Eigen::Index>(firsts.size()));
    if (fresh) firsts.push_back(i);
    slot[static_cast<std::size_t>(i)] = it->second;
  }
  return firsts;
}

void append_row(std::vector<double>& out, const RowMatrix& m, Eigen::Index i) {
  for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(i, c));
}

}  // namespace

Eigen::VectorXd row_factors(const Eigen::VectorXd& weight, Eigen::Index rows) {
  if (weight.size() == 0) return Eigen::VectorXd::Constant(rows, 1.0 / static_cast<double>(rows));
  MFLDIV_REQUIRE(weight.size() == rows, "batch weights do not match the row count");
  return weight / weight.sum();
}

void RegParams::validate() const {
  for (double v : {zeta1, zeta2, sigma1, sigma2}) {
    MFLDIV_REQUIRE(std::isfinite(v) && v >= 0.0, "regularization levels must be non-negative");
  }
  MFLDIV_REQUIRE(std::isfinite(lambda) && lambda > 0.0, "lambda must be positive");
}

BilevelData BilevelData::from_npiv(const NpivDataset& ds) {
  ds.validate();
  BilevelData d;
  d.stage1_a = ds.stage1_a;
  d.stage1_w = ds.stage1_w;
  d.stage2_w = ds.stage2_w;
  d.stage2_y = ds.stage2_y;
  return d;
}

void BilevelData::validate() const {
  MFLDIV_REQUIRE(m() >= 1 && n() >= 1, "training data needs rows in both stages");
  MFLDIV_REQUIRE(stage1_w.rows() == m() && stage2_y.size() == n(), "row counts differ");
  MFLDIV_REQUIRE(stage2_w.cols() == stage1_w.cols(), "instrument dimension differs across stages");
  check_weight(stage1_weight, m());
  check_weight(stage2_weight, n());
  if (form.has_direct()) {
    MFLDIV_REQUIRE(stage2_v.rows() == n() && stage2_v.cols() == stage1_a.cols(),
                   "direct stage II inputs have the wrong shape");
  }
}

StageOneBatch BilevelData::stage_one(std::span<const Eigen::Index> rows) const {
  StageOneBatch b;
  b.a.resize(static_cast<Eigen::Index>(rows.size()), stage1_a.cols());
  b.w.resize(static_cast<Eigen::Index>(rows.size()), stage1_w.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    b.a.row(static_cast<Eigen::Index>(k)) = stage1_a.row(rows[k]);
    b.w.row(static_cast<Eigen::Index>(k)) = stage1_w.row(rows[k]);
  }
  if (stage1_weight.size() > 0) {
    b.weight.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) b.weight[static_cast<Eigen::Index>(k)] = stage1_weight[rows[k]];
  }
  return b;
}

StageTwoBatch BilevelData::stage_two(std::span<const Eigen::Index> rows) const {
  StageTwoBatch b;
  const auto count = static_cast<Eigen::Index>(rows.size());
  b.w.resize(count, stage2_w.cols());
  b.y.resize(count);
  if (form.has_direct()) b.v.resize(count, stage2_v.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto i = static_cast<Eigen::Index>(k);
    b.w.row(i) = stage2_w.row(rows[k]);
    b.y[i] = stage2_y[rows[k]];
    if (form.has_direct()) b.v.row(i) = stage2_v.row(rows[k]);
  }
  if (stage2_weight.size() > 0) {
    b.weight.resize(count);
    for (std::size_t k = 0; k < rows.size(); ++k) b.weight[static_cast<Eigen::Index>(k)] = stage2_weight[rows[k]];
  }
  return b;
}

StageOneBatch BilevelData::stage_one_head(Eigen::Index count) const {
  count = std::min(count, m());
  StageOneBatch b{stage1_a.topRows(count), stage1_w.topRows(count), {}};
  if (stage1_weight.size() > 0) b.weight = stage1_weight.head(count);
  return b;
}

StageTwoBatch BilevelData::stage_two_head(Eigen::Index count) const {
  count = std::min(count, n());
  StageTwoBatch b{stage2_w.topRows(count), stage2_y.head(count), {}, {}};
  if (form.has_direct()) b.v = stage2_v.topRows(count);
  if (stage2_weight.size() > 0) b.weight = stage2_weight.head(count);
  return b;
}

BilevelData merge_duplicate_rows(const BilevelData& data) {
  data.validate();
  BilevelData out;
  out.form = data.form;
  std::vector<Eigen::Index> slot;

  const auto firsts1 = first_occurrence(data.m(), [&](Eigen::Index i) {
    std::vector<double> k;
    append_row(k, data.stage1_a, i);
    append_row(k, data.stage1_w, i);
    return k;
  }, slot);
  out.stage1_a.resize(static_cast<Eigen::Index>(firsts1.size()), data.stage1_a.cols());
  out.stage1_w.resize(static_cast<Eigen::Index>(firsts1.size()), data.stage1_w.cols());
  out.stage1_weight = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(firsts1.size()));
  for (std::size_t u = 0; u < firsts1.size(); ++u) {
    out.stage1_a.row(static_cast<Eigen::Index>(u)) = data.stage1_a.row(firsts1[u]);
    out.stage1_w.row(static_cast<Eigen::Index>(u)) = data.stage1_w.row(firsts1[u]);
  }
  for (Eigen::Index i = 0; i < data.m(); ++i) {
    out.stage1_weight[slot[static_cast<std::size_t>(i)]] += data.stage1_weight.size() ? data.stage1_weight[i] : 1.0;
  }

  const bool direct = data.form.has_direct();
  const auto firsts2 = first_occurrence(data.n(), [&](Eigen::Index i) {
    std::vector<double> k;
    append_row(k, data.stage2_w, i);
    if (direct) append_row(k, data.stage2_v, i);
    k.push_back(data.stage2_y[i]);
    return k;
  }, slot);
  const auto n2 = static_cast<Eigen::Index>(firsts2.size());
  out.stage2_w.resize(n2, data.stage2_w.cols());
  out.stage2_y.resize(n2);
  if (direct) out.stage2_v.resize(n2, data.stage2_v.cols());
  out.stage2_weight = Eigen::VectorXd::Zero(n2);
  for (std::size_t u = 0; u < firsts2.size(); ++u) {
    const auto r = static_cast<Eigen::Index>(u);
    out.stage2_w.row(r) = data.stage2_w.row(firsts2[u]);
    out.stage2_y[r] = data.stage2_y[firsts2[u]];
    if (direct) out.stage2_v.row(r) = data.stage2_v.row(firsts2[u]);
  }
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    out.stage2_weight[slot[static_cast<std::size_t>(i)]] += data.stage2_weight.size() ? data.stage2_weight[i] : 1.0;
  }
  return out;
}

double u1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageOneBatch& b) {
  check_stage_one(ens_x, ens_z, b);
  return half_mean_square(stage_one_residual(ens_x, ens_z, b), b.weight);
}

double u2(const ParticleEnsemble& ens_z, const StageTwoBatch& b) {
  check_stage_two(nullptr, ens_z, b, {});
  return half_mean_square(stage_two_residual(nullptr, ens_z, b, {}), b.weight);
}

double u2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageTwoBatch& b,
          const StageTwoForm& form) {
  check_stage_two(&ens_x, ens_z, b, form);
  return half_mean_square(stage_two_residual(&ens_x, ens_z, b, form), b.weight);
}

double f1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageOneBatch& b,
          const RegParams& reg) {
  return u1(ens_x, ens_z, b) + 0.5 * reg.zeta1 * ens_z.mean_sq_norm();
}

double f2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageTwoBatch& b,
          const RegParams& reg, const StageTwoForm& form) {
  return u2(ens_x, ens_z, b, form) + 0.5 * reg.zeta2 * ens_x.mean_sq_norm();
}

Eigen::VectorXd grad1_u1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, std::span<const double> x) {
  check_stage_one(ens_x, ens_z, b);
  check_param(ens_x, x);
  const Eigen::VectorXd weights =
      -stage_one_residual(ens_x, ens_z, b).cwiseProduct(row_factors(b.weight, b.size()));
  return point_gradient(ens_x.spec(), b.a, weights, x);
}

Eigen::VectorXd grad2_f1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, const RegParams& reg, std::span<const double> z) {
  check_stage_one(ens_x, ens_z, b);
  check_param(ens_z, z);
  const Eigen::VectorXd weights =
      stage_one_residual(ens_x, ens_z, b).cwiseProduct(row_factors(b.weight, b.size()));
  Eigen::VectorXd g = point_gradient(ens_z.spec(), b.w, weights, z);
  for (Eigen::Index k = 0; k < g.size(); ++k) g[k] += reg.zeta1 * z[static_cast<std::size_t>(k)];
  return g;
}

Eigen::VectorXd grad_u2(const ParticleEnsemble& ens_z, const StageTwoBatch& b,
                        std::span<const double> z) {
  check_stage_two(nullptr, ens_z, b, {});
  check_param(ens_z, z);
  const Eigen::VectorXd weights =
      stage_two_residual(nullptr, ens_z, b, {}).cwiseProduct(row_factors(b.weight, b.size()));
  return point_gradient(ens_z.spec(), b.w, weights, z);
}

Eigen::VectorXd grad_u2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                        const StageTwoBatch& b, const StageTwoForm& form,
                        std::span<const double> z) {
  check_stage_two(&ens_x, ens_z, b, form);
  check_param(ens_z, z);
  const Eigen::VectorXd weights =
      form.projected * stage_two_residual(&ens_x, ens_z, b, form).cwiseProduct(row_factors(b.weight, b.size()));
  return point_gradient(ens_z.spec(), b.w, weights, z);
}

Eigen::VectorXd grad1_u2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageTwoBatch& b, const StageTwoForm& form,
                         std::span<const double> x) {
  check_stage_two(&ens_x, ens_z, b, form);
  check_param(ens_x, x);
  if (!form.has_direct()) return Eigen::VectorXd::Zero(ens_x.spec().param_dim());
  const Eigen::VectorXd weights =
      form.direct * stage_two_residual(&ens_x, ens_z, b, form).cwiseProduct(row_factors(b.weight, b.size()));
  return point_gradient(ens_x.spec(), b.v, weights, x);
}

RowMatrix grad1_u1_field(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, int threads) {
  check_stage_one(ens_x, ens_z, b);
  const Eigen::VectorXd weights =
      -stage_one_residual(ens_x, ens_z, b).cwiseProduct(row_factors(b.weight, b.size()));
  return weighted_feature_gradients(ens_x, b.a, weights, threads);
}

RowMatrix grad2_f1_field(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, const RegParams& reg, int threads) {
  check_stage_one(ens_x, ens_z, b);
  const Eigen::VectorXd weights =
      stage_one_residual(ens_x, ens_z, b).cwiseProduct(row_factors(b.weight, b.size()));
  RowMatrix g = weighted_feature_gradients(ens_z, b.w, weights, threads);
  g += reg.zeta1 * ens_z.particles();
  return g;
}

RowMatrix grad_u2_field(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                        const StageTwoBatch& b, const StageTwoForm& form, int threads) {
  check_stage_two(&ens_x, ens_z, b, form);
  const Eigen::VectorXd weights =
      form.projected * stage_two_residual(&ens_x, ens_z, b, form).cwiseProduct(row_factors(b.weight, b.size()));
  return weighted_feature_gradients(ens_z, b.w, weights, threads);
}

LagrangianValue lagrangian_monitor(const ParticleEnsemble& ens_x,
                                   const ParticleEnsemble& tilde_z,
                                   const ParticleEnsemble& z_star, const StageOneBatch& b1,
                                   const StageTwoBatch& b2, const RegParams& reg,
                                   const StageTwoForm& form) {
  MFLDIV_REQUIRE(tilde_z.spec() == z_star.spec(), "inner ensembles must share a neuron spec");
  const double f1_tilde = f1(ens_x, tilde_z, b1, reg);
  const double f1_star = f1(ens_x, z_star, b1, reg);
  const double gap = f1_tilde - f1_star;
  return {f2(ens_x, tilde_z, b2, reg, form) + reg.lambda * gap, gap};
}

}  // namespace mfldiv
