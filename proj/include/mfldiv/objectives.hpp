#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "mfldiv/features.hpp"

namespace mfldiv {

struct NpivDataset;

// Regularization levels: l2 scales zeta, entropic (noise) scales sigma, and the
// Lagrange multiplier of the penalty reformulation.
struct RegParams {
  double zeta1 = 1e-5;
  double zeta2 = 1e-5;
  double sigma1 = 1e-2;
  double sigma2 = 1e-2;
  double lambda = 0.3;

  void validate() const;
  bool operator==(const RegParams&) const = default;
};

// Stage-II residual is direct * h_x(v) + projected * g_z(w) - y.
// NPIV uses {0, 1}; the Bellman equation uses {1, -discount}.
struct StageTwoForm {
  double direct = 0.0;
  double projected = 1.0;

  bool has_direct() const { return direct != 0.0; }
  bool operator==(const StageTwoForm&) const = default;
};

// Stage-I rows: ens_x is read at a, ens_z at w. A non-empty `weight` replaces
// the plain batch mean by the weighted mean.
struct StageOneBatch {
  RowMatrix a;
  RowMatrix w;
  Eigen::VectorXd weight = {};
  Eigen::Index size() const { return w.rows(); }
};

// Stage-II rows: ens_z at w, outcome y, and (for direct forms) ens_x at v.
struct StageTwoBatch {
  RowMatrix w;
  Eigen::VectorXd y;
  RowMatrix v;
  Eigen::VectorXd weight = {};
  Eigen::Index size() const { return w.rows(); }
};

// Per-row factors of a batch mean: weight / sum(weight), or 1 / rows when unweighted.
Eigen::VectorXd row_factors(const Eigen::VectorXd& weight, Eigen::Index rows);

// Full training data for the bilevel problem.
struct BilevelData {
  RowMatrix stage1_a;
  RowMatrix stage1_w;
  RowMatrix stage2_w;
  RowMatrix stage2_v;
  Eigen::VectorXd stage2_y;
  // Row multiplicities; empty means every row counts once.
  Eigen::VectorXd stage1_weight;
  Eigen::VectorXd stage2_weight;
  StageTwoForm form;

  static BilevelData from_npiv(const NpivDataset& ds);

  bool weighted() const { return stage1_weight.size() > 0 || stage2_weight.size() > 0; }

  Eigen::Index m() const { return stage1_a.rows(); }
  Eigen::Index n() const { return stage2_w.rows(); }
  int treatment_dim() const { return static_cast<int>(stage1_a.cols()); }
  int instrument_dim() const { return static_cast<int>(stage1_w.cols()); }
  void validate() const;

  StageOneBatch stage_one(std::span<const Eigen::Index> rows) const;
  StageTwoBatch stage_two(std::span<const Eigen::Index> rows) const;
  StageOneBatch stage_one_head(Eigen::Index count) const;
  StageTwoBatch stage_two_head(Eigen::Index count) const;
};

// Collapses identical rows of each stage into one weighted row. Losses and
// full-data gradients are unchanged; minibatches are then drawn over distinct rows.
BilevelData merge_duplicate_rows(const BilevelData& data);

double u1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageOneBatch& b);
double u2(const ParticleEnsemble& ens_z, const StageTwoBatch& b);
double u2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageTwoBatch& b,
          const StageTwoForm& form);
double f1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageOneBatch& b,
          const RegParams& reg);
double f2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z, const StageTwoBatch& b,
          const RegParams& reg, const StageTwoForm& form = {});

// Single-particle Wasserstein gradients (gradient of the first variation at a
// point), in the 1/N output convention: no factor of N.
Eigen::VectorXd grad1_u1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, std::span<const double> x);
Eigen::VectorXd grad2_f1(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, const RegParams& reg, std::span<const double> z);
Eigen::VectorXd grad_u2(const ParticleEnsemble& ens_z, const StageTwoBatch& b,
                        std::span<const double> z);
// Gradient in z of the generalized stage-II loss.
Eigen::VectorXd grad_u2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                        const StageTwoBatch& b, const StageTwoForm& form,
                        std::span<const double> z);
// Gradient in x of the generalized stage-II loss through the direct term; zero for NPIV.
Eigen::VectorXd grad1_u2(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageTwoBatch& b, const StageTwoForm& form,
                         std::span<const double> x);

// Whole-ensemble versions: row i is the gradient at particle i of the ensemble
// being differentiated.
RowMatrix grad1_u1_field(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, int threads = 1);
RowMatrix grad2_f1_field(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                         const StageOneBatch& b, const RegParams& reg, int threads = 1);
RowMatrix grad_u2_field(const ParticleEnsemble& ens_x, const ParticleEnsemble& ens_z,
                        const StageTwoBatch& b, const StageTwoForm& form, int threads = 1);

struct LagrangianValue {
  double value = 0.0;  // F2(x, z~) + lambda * (F1(x, z~) - F1(x, z*)), entropy-free
  double gap = 0.0;    // F1(x, z~) - F1(x, z*)
};

LagrangianValue lagrangian_monitor(const ParticleEnsemble& ens_x,
                                   const ParticleEnsemble& tilde_z,
                                   const ParticleEnsemble& z_star, const StageOneBatch& b1,
                                   const StageTwoBatch& b2, const RegParams& reg,
                                   const StageTwoForm& form = {});

}  // namespace mfldiv
