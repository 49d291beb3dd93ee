#include "mfldiv/baselines.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <cmath>

#include "mfldiv/errors.hpp"
#include "mfldiv/f2bmld.hpp"
#include "mfldiv/rng.hpp"

namespace mfldiv {

namespace {

std::string_view kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::kIdentity:
      return "identity";
    case FeatureKind::kPolynomial:
      return "polynomial";
    case FeatureKind::kRandomTanh:
      return "random_tanh";
    case FeatureKind::kNeural:
      return "neural";
  }
  return "?";
}

FeatureKind kind_from_name(std::string_view s) {
  if (s == "identity") return FeatureKind::kIdentity;
  if (s == "polynomial") return FeatureKind::kPolynomial;
  if (s == "random_tanh") return FeatureKind::kRandomTanh;
  if (s == "neural") return FeatureKind::kNeural;
  throw ParseError("unknown feature kind '" + std::string(s) + "'");
}

nlohmann::json matrix_json(const RowMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return rows;
}

RowMatrix matrix_from_json(const nlohmann::json& j, Eigen::Index cols) {
  RowMatrix m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto row = j[i].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != cols) throw ParseError("ragged matrix in feature map");
    for (Eigen::Index c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(i), c) = row[static_cast<std::size_t>(c)];
  }
  return m;
}

// Sum over rows of the bank-column gradients: one RowMatrix per bank.
std::vector<RowMatrix> bank_gradients(const FeatureMap& map, const RowMatrix& inputs,
                                      const Eigen::MatrixXd& dloss_dfeatures, int threads) {
  std::vector<RowMatrix> out;
  const auto& banks = map.banks();
  out.reserve(banks.size());
  for (std::size_t j = 0; j < banks.size(); ++j) {
    const Eigen::VectorXd weights = dloss_dfeatures.col(static_cast<Eigen::Index>(j));
    out.push_back(weighted_feature_gradients(banks[j], inputs, weights, threads));
  }
  return out;
}

void add_into(std::vector<RowMatrix>& acc, const std::vector<RowMatrix>& more) {
  for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += more[j];
}

}  // namespace

FeatureMap FeatureMap::identity(int input_dim) {
  MFLDIV_REQUIRE(input_dim >= 1, "input_dim must be positive");
  FeatureMap f;
  f.kind_ = FeatureKind::kIdentity;
  f.input_dim_ = input_dim;
  return f;
}

FeatureMap FeatureMap::polynomial(int degree) {
  MFLDIV_REQUIRE(degree >= 0, "degree must be non-negative");
  FeatureMap f;
  f.kind_ = FeatureKind::kPolynomial;
  f.degree_ = degree;
  return f;
}

FeatureMap FeatureMap::random_tanh(int input_dim, int count, std::uint64_t seed, double scale) {
  MFLDIV_REQUIRE(input_dim >= 1 && count >= 1, "random features need positive sizes");
  MFLDIV_REQUIRE(scale > 0.0, "feature scale must be positive");
  const CounterRng rng(seed);
  RngCursor cur(rng, rng.key(Phase::kFeatures, static_cast<std::uint64_t>(input_dim),
                             static_cast<std::uint64_t>(count)));
  FeatureMap f;
  f.kind_ = FeatureKind::kRandomTanh;
  f.input_dim_ = input_dim;
  f.scale_ = scale;
  f.omega_.resize(count, input_dim);
  f.offset_.resize(count);
  for (int j = 0; j < count; ++j) {
    for (int k = 0; k < input_dim; ++k) f.omega_(j, k) = cur.normal();
    f.offset_[j] = cur.normal();
  }
  return f;
}

FeatureMap FeatureMap::neural(std::vector<ParticleEnsemble> banks) {
  MFLDIV_REQUIRE(!banks.empty(), "neural feature map needs at least one bank");
  FeatureMap f;
  f.kind_ = FeatureKind::kNeural;
  f.input_dim_ = banks.front().spec().input_dim;
  for (const auto& b : banks) {
    MFLDIV_REQUIRE(b.spec().input_dim == f.input_dim_, "banks disagree on input dimension");
  }
  f.banks_ = std::move(banks);
  return f;
}

int FeatureMap::output_dim() const {
  switch (kind_) {
    case FeatureKind::kIdentity:
      return input_dim_;
    case FeatureKind::kPolynomial:
      return degree_ + 1;
    case FeatureKind::kRandomTanh:
      return static_cast<int>(omega_.rows()) + 1;
    case FeatureKind::kNeural:
      return static_cast<int>(banks_.size()) + 1;
  }
  return 0;
}

RowMatrix FeatureMap::evaluate(const RowMatrix& inputs) const {
  MFLDIV_REQUIRE(inputs.cols() == input_dim_, "feature map input dimension mismatch");
  const Eigen::Index rows = inputs.rows();
  RowMatrix out(rows, output_dim());
  switch (kind_) {
    case FeatureKind::kIdentity:
      out = inputs;
      break;
    case FeatureKind::kPolynomial:
      for (Eigen::Index i = 0; i < rows; ++i) {
        double p = 1.0;
        for (int d = 0; d <= degree_; ++d) {
          out(i, d) = p;
          p *= inputs(i, 0);
        }
      }
      break;
    case FeatureKind::kRandomTanh: {
      const Eigen::Index count = omega_.rows();
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < count; ++j) {
          out(i, j) = std::tanh(scale_ * (omega_.row(j).dot(inputs.row(i)) + offset_[j]));
        }
        out(i, count) = 1.0;
      }
      break;
    }
    case FeatureKind::kNeural: {
      for (std::size_t j = 0; j < banks_.size(); ++j) {
        out.col(static_cast<Eigen::Index>(j)) = ensemble_eval_batch(banks_[j], inputs);
      }
      out.col(out.cols() - 1).setOnes();
      break;
    }
  }
  return out;
}

nlohmann::json FeatureMap::to_json() const {
  nlohmann::json j{{"kind", std::string(kind_name(kind_))}, {"input_dim", input_dim_}};
  switch (kind_) {
    case FeatureKind::kIdentity:
      break;
    case FeatureKind::kPolynomial:
      j["degree"] = degree_;
      break;
    case FeatureKind::kRandomTanh:
      j["scale"] = scale_;
      j["omega"] = matrix_json(omega_);
      j["offset"] = std::vector<double>(offset_.data(), offset_.data() + offset_.size());
      break;
    case FeatureKind::kNeural: {
      nlohmann::json banks = nlohmann::json::array();
      for (const auto& b : banks_) {
        banks.push_back({{"clip_bound", b.spec().clip_bound},
                         {"activation", std::string(to_string(b.spec().activation))},
                         {"particles", matrix_json(b.particles())}});
      }
      j["banks"] = banks;
      break;
    }
  }
  return j;
}

FeatureMap FeatureMap::from_json(const nlohmann::json& j) {
  const FeatureKind kind = kind_from_name(j.at("kind").get<std::string>());
  const int input_dim = j.at("input_dim").get<int>();
  switch (kind) {
    case FeatureKind::kIdentity:
      return identity(input_dim);
    case FeatureKind::kPolynomial:
      return polynomial(j.at("degree").get<int>());
    case FeatureKind::kRandomTanh: {
      FeatureMap f;
      f.kind_ = kind;
      f.input_dim_ = input_dim;
      f.scale_ = j.at("scale").get<double>();
      f.omega_ = matrix_from_json(j.at("omega"), input_dim);
      const auto off = j.at("offset").get<std::vector<double>>();
      f.offset_ = Eigen::Map<const Eigen::VectorXd>(off.data(), static_cast<Eigen::Index>(off.size()));
      if (f.offset_.size() != f.omega_.rows()) throw ParseError("random feature offsets mismatch");
      return f;
    }
    case FeatureKind::kNeural: {
      std::vector<ParticleEnsemble> banks;
      for (const auto& b : j.at("banks")) {
        NeuronSpec spec{input_dim, b.at("clip_bound").get<double>(),
                        activation_from_string(b.at("activation").get<std::string>())};
        banks.emplace_back(spec, matrix_from_json(b.at("particles"), spec.param_dim()));
      }
      return neural(std::move(banks));
    }
  }
  throw ParseError("unreachable feature kind");
}

Eigen::MatrixXd spd_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  MFLDIV_REQUIRE(a.rows() == a.cols() && a.rows() == b.rows(), "spd_solve shape mismatch");
  if (!a.allFinite()) throw NumericalError("ridge system has non-finite entries");
  Eigen::LLT<Eigen::MatrixXd> llt(a);
  double jitter = 0.0;
  if (llt.info() != Eigen::Success) {
    jitter = 1e-10 * a.trace() / static_cast<double>(a.rows());
    Eigen::MatrixXd shifted = a;
    shifted.diagonal().array() += jitter;
    llt.compute(shifted);
    if (llt.info() != Eigen::Success) {
      const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a).eigenvalues();
      throw NumericalError("ridge system is not positive definite even with jitter " +
                           std::to_string(jitter) + " (eigenvalue condition " +
                           std::to_string(ev.minCoeff() / ev.cwiseAbs().maxCoeff()) + ")");
    }
  }
  const double rcond = llt.rcond();
  if (!(rcond > 1e-16)) {
    throw NumericalError("ridge system is numerically singular (reciprocal condition " +
                         std::to_string(rcond) + ")");
  }
  return llt.solve(b);
}

RidgeSolution solve_ridge_heads(const RowMatrix& psi_a, const RowMatrix& phi_w,
                                const RowMatrix& phi_w2, const RowMatrix& psi_v,
                                const Eigen::VectorXd& y, const StageTwoForm& form, double zeta1,
                                double zeta2) {
  MFLDIV_REQUIRE(zeta1 > 0.0 && zeta2 > 0.0, "ridge regularizers must be positive");
  MFLDIV_REQUIRE(psi_a.rows() == phi_w.rows() && psi_a.rows() >= 1, "stage I feature rows differ");
  MFLDIV_REQUIRE(phi_w2.rows() == y.size() && y.size() >= 1, "stage II feature rows differ");
  const auto m = static_cast<double>(psi_a.rows());
  const auto n = static_cast<double>(y.size());
  const Eigen::Index ka = psi_a.cols();

  Eigen::MatrixXd gram1 = phi_w.transpose() * phi_w;
  gram1.diagonal().array() += 2.0 * m * zeta1;
  // V^T = G1^-1 Phi^T Psi  (k_w x k_a)
  const Eigen::MatrixXd vt = spd_solve(gram1, phi_w.transpose() * psi_a);

  Eigen::MatrixXd x = form.projected * (phi_w2 * vt);
  if (form.has_direct()) {
    MFLDIV_REQUIRE(psi_v.rows() == y.size() && psi_v.cols() == ka, "direct features mismatch");
    x += form.direct * psi_v;
  }
  Eigen::MatrixXd gram2 = x.transpose() * x;
  gram2.diagonal().array() += 2.0 * n * zeta2;
  RidgeSolution sol;
  sol.v = vt.transpose();
  sol.u = spd_solve(gram2, x.transpose() * y);
  sol.zeta1 = zeta1;
  sol.zeta2 = zeta2;
  return sol;
}

double TwoStageModel::predict(std::span<const double> a) const {
  RowMatrix row(1, static_cast<Eigen::Index>(a.size()));
  for (std::size_t k = 0; k < a.size(); ++k) row(0, static_cast<Eigen::Index>(k)) = a[k];
  return predict_batch(row)[0];
}

Eigen::VectorXd TwoStageModel::predict_batch(const RowMatrix& a) const {
  return psi.evaluate(a) * heads.u;
}

TwoStageModel fixed_2sls(const FeatureMap& psi, const FeatureMap& phi, const BilevelData& data,
                         double zeta1, double zeta2) {
  data.validate();
  MFLDIV_REQUIRE(!data.weighted(), "two-stage baselines take unweighted rows");
  const RowMatrix psi_v = data.form.has_direct() ? psi.evaluate(data.stage2_v) : RowMatrix();
  RidgeSolution heads =
      solve_ridge_heads(psi.evaluate(data.stage1_a), phi.evaluate(data.stage1_w),
                        phi.evaluate(data.stage2_w), psi_v, data.stage2_y, data.form, zeta1, zeta2);
  return TwoStageModel{psi, phi, std::move(heads)};
}

void DfivConfig::validate() const {
  MFLDIV_REQUIRE(feature_dim >= 1 && bank_width >= 1, "feature network sizes must be positive");
  MFLDIV_REQUIRE(zeta1 > 0.0 && zeta2 > 0.0, "ridge regularizers must be positive");
  MFLDIV_REQUIRE(steps >= 0, "steps must be non-negative");
  MFLDIV_REQUIRE(lr >= 0.0 && std::isfinite(lr), "learning rate must be non-negative");
  MFLDIV_REQUIRE(batch_size >= 0, "batch size must be non-negative");
  MFLDIV_REQUIRE(clip_bound > 0.0, "clip bound must be positive");
}

double dfiv_stage1_loss(const FeatureMap& psi, const FeatureMap& phi, const StageOneBatch& b1,
                        double zeta1) {
  const RowMatrix psi_a = psi.evaluate(b1.a);
  const RowMatrix phi_w = phi.evaluate(b1.w);
  const auto m = static_cast<double>(b1.size());
  Eigen::MatrixXd gram1 = phi_w.transpose() * phi_w;
  gram1.diagonal().array() += 2.0 * m * zeta1;
  const Eigen::MatrixXd vt = spd_solve(gram1, phi_w.transpose() * psi_a);
  return 0.5 / m * (psi_a - phi_w * vt).squaredNorm() + zeta1 * vt.squaredNorm();
}

double dfiv_stage2_loss(const FeatureMap& psi, const FeatureMap& phi, const StageOneBatch& b1,
                        const StageTwoBatch& b2, const StageTwoForm& form, double zeta1,
                        double zeta2) {
  const RowMatrix psi_v = form.has_direct() ? psi.evaluate(b2.v) : RowMatrix();
  const RowMatrix phi_w2 = phi.evaluate(b2.w);
  const RidgeSolution sol = solve_ridge_heads(psi.evaluate(b1.a), phi.evaluate(b1.w), phi_w2,
                                              psi_v, b2.y, form, zeta1, zeta2);
  Eigen::MatrixXd x = form.projected * (phi_w2 * sol.v.transpose());
  if (form.has_direct()) x += form.direct * psi_v;
  const auto n = static_cast<double>(b2.size());
  return 0.5 / n * (b2.y - x * sol.u).squaredNorm() + zeta2 * sol.u.squaredNorm();
}

DfivGradients dfiv_gradients(const FeatureMap& psi, const FeatureMap& phi,
                             const StageOneBatch& b1, const StageTwoBatch& b2,
                             const StageTwoForm& form, double zeta1, double zeta2, int threads) {
  MFLDIV_REQUIRE(psi.kind() == FeatureKind::kNeural && phi.kind() == FeatureKind::kNeural,
                 "DFIV gradients need neural feature maps");
  const RowMatrix psi_a = psi.evaluate(b1.a);
  const RowMatrix phi_w = phi.evaluate(b1.w);
  const RowMatrix phi_w2 = phi.evaluate(b2.w);
  const RowMatrix psi_v = form.has_direct() ? psi.evaluate(b2.v) : RowMatrix();
  const auto m = static_cast<double>(b1.size());
  const auto n = static_cast<double>(b2.size());

  Eigen::MatrixXd gram1 = phi_w.transpose() * phi_w;
  gram1.diagonal().array() += 2.0 * m * zeta1;
  const Eigen::MatrixXd vt = spd_solve(gram1, phi_w.transpose() * psi_a);  // k_w x k_a
  const Eigen::MatrixXd resid1 = psi_a - phi_w * vt;                        // m x k_a

  DfivGradients out;
  out.stage1_loss = 0.5 / m * resid1.squaredNorm() + zeta1 * vt.squaredNorm();
  // V is stationary for the stage-I loss, so only the explicit Phi dependence remains.
  const Eigen::MatrixXd d1_dphi = -(1.0 / m) * resid1 * vt.transpose();
  out.phi_grads = bank_gradients(phi, b1.w, d1_dphi, threads);

  Eigen::MatrixXd x = form.projected * (phi_w2 * vt);
  if (form.has_direct()) x += form.direct * psi_v;
  Eigen::MatrixXd gram2 = x.transpose() * x;
  gram2.diagonal().array() += 2.0 * n * zeta2;
  const Eigen::VectorXd u = spd_solve(gram2, x.transpose() * b2.y);
  const Eigen::VectorXd resid2 = b2.y - x * u;
  out.stage2_loss = 0.5 / n * resid2.squaredNorm() + zeta2 * u.squaredNorm();

  // u is stationary for the stage-II loss; its adjoint vanishes.
  const Eigen::MatrixXd d2_dx = -(1.0 / n) * resid2 * u.transpose();        // n x k_a
  const Eigen::MatrixXd d2_dvt = form.projected * phi_w2.transpose() * d2_dx;  // k_w x k_a
  // Adjoint of V^T = G1^-1 Phi^T Psi with Phi fixed: one solve with G1.
  const Eigen::MatrixXd adjoint = spd_solve(gram1, d2_dvt);
  const Eigen::MatrixXd d2_dpsi_a = phi_w * adjoint;  // m x k_a
  out.psi_grads = bank_gradients(psi, b1.a, d2_dpsi_a, threads);
  if (form.has_direct()) {
    add_into(out.psi_grads, bank_gradients(psi, b2.v, form.direct * d2_dx, threads));
  }
  return out;
}

FeatureMap initial_feature_net(int input_dim, const DfivConfig& cfg, std::uint64_t stream) {
  const CounterRng rng(cfg.seed);
  const NeuronSpec spec{input_dim, cfg.clip_bound, cfg.activation};
  std::vector<ParticleEnsemble> banks;
  banks.reserve(static_cast<std::size_t>(cfg.feature_dim));
  for (int j = 0; j < cfg.feature_dim; ++j) {
    banks.push_back(gaussian_ensemble(spec, cfg.bank_width, rng, Phase::kFeatures,
                                      stream * 1000003ULL + static_cast<std::uint64_t>(j)));
  }
  return FeatureMap::neural(std::move(banks));
}

DfivModel dfiv_train(const DfivConfig& cfg, const BilevelData& data, const TwoStageProbe& probe) {
  cfg.validate();
  data.validate();
  FeatureMap psi = initial_feature_net(data.treatment_dim(), cfg, 1);
  FeatureMap phi = initial_feature_net(data.instrument_dim(), cfg, 2);
  return dfiv_train(cfg, std::move(psi), std::move(phi), data, probe);
}

DfivModel dfiv_train(const DfivConfig& cfg, FeatureMap psi, FeatureMap phi,
                     const BilevelData& data, const TwoStageProbe& probe) {
  cfg.validate();
  data.validate();
  MFLDIV_REQUIRE(!data.weighted(), "two-stage baselines take unweighted rows");
  const CounterRng rng(cfg.seed);
  DfivModel out;
  out.config = cfg;
  out.trace.reserve(static_cast<std::size_t>(cfg.steps));
  const bool full = cfg.batch_size == 0;
  const StageOneBatch all1 = data.stage_one_head(data.m());
  const StageTwoBatch all2 = data.stage_two_head(data.n());

  for (int s = 0; s < cfg.steps; ++s) {
    const auto ss = static_cast<std::uint64_t>(s);
    StageOneBatch b1;
    StageTwoBatch b2;
    if (!full) {
      b1 = data.stage_one(sample_rows(data.m(), cfg.batch_size, rng, rng.key(Phase::kBatchStage1, ss)));
      b2 = data.stage_two(sample_rows(data.n(), cfg.batch_size, rng, rng.key(Phase::kBatchStage2, ss)));
    }
    const StageOneBatch& u1b = full ? all1 : b1;
    const StageTwoBatch& u2b = full ? all2 : b2;
    const DfivGradients g =
        dfiv_gradients(psi, phi, u1b, u2b, data.form, cfg.zeta1, cfg.zeta2, cfg.threads);

    DfivTraceRecord rec{s, g.stage1_loss, g.stage2_loss, std::nullopt};
    if (probe) {
      const RowMatrix psi_v = data.form.has_direct() ? psi.evaluate(u2b.v) : RowMatrix();
      TwoStageModel current{psi, phi,
                            solve_ridge_heads(psi.evaluate(u1b.a), phi.evaluate(u1b.w),
                                              phi.evaluate(u2b.w), psi_v, u2b.y, data.form,
                                              cfg.zeta1, cfg.zeta2)};
      rec.value = probe(current);
    }
    out.trace.push_back(rec);

    auto& phi_banks = phi.mutable_banks();
    auto& psi_banks = psi.mutable_banks();
    for (std::size_t j = 0; j < phi_banks.size(); ++j) {
      phi_banks[j].mutable_particles() -= cfg.lr * g.phi_grads[j];
      phi_banks[j].check_finite("DFIV instrument features");
    }
    for (std::size_t j = 0; j < psi_banks.size(); ++j) {
      psi_banks[j].mutable_particles() -= cfg.lr * g.psi_grads[j];
      psi_banks[j].check_finite("DFIV treatment features");
    }
    for (const auto* banks : {&phi_banks, &psi_banks}) {
      for (const auto& b : *banks) {
        if (!(b.particles().rowwise().norm().mean() <= cfg.divergence_norm)) {
          throw NumericalError("DFIV feature network diverged at step " + std::to_string(s));
        }
      }
    }
  }
  out.model = fixed_2sls(psi, phi, data, cfg.zeta1, cfg.zeta2);
  return out;
}

}  // namespace mfldiv
