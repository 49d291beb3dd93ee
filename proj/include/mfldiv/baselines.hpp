#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <json.hpp>
#include <vector>

#include "mfldiv/features.hpp"
#include "mfldiv/objectives.hpp"

namespace mfldiv {

enum class FeatureKind { kIdentity, kPolynomial, kRandomTanh, kNeural };

// Fixed or learned feature map psi: R^d -> R^k. Random-tanh and neural maps
// append a constant column so the ridge heads can fit an intercept.
class FeatureMap {
 public:
  static FeatureMap identity(int input_dim);
  // Scalar input; columns 1, a, ..., a^degree.
  static FeatureMap polynomial(int degree);
  // tanh(scale * (omega^T a + b)) with omega, b ~ N(0, I), plus a constant column.
  static FeatureMap random_tanh(int input_dim, int count, std::uint64_t seed, double scale = 1.0);
  // One mean-field neuron bank per output column, plus a constant column.
  static FeatureMap neural(std::vector<ParticleEnsemble> banks);

  FeatureKind kind() const { return kind_; }
  int input_dim() const { return input_dim_; }
  int output_dim() const;
  RowMatrix evaluate(const RowMatrix& inputs) const;

  const std::vector<ParticleEnsemble>& banks() const { return banks_; }
  std::vector<ParticleEnsemble>& mutable_banks() { return banks_; }

  nlohmann::json to_json() const;
  static FeatureMap from_json(const nlohmann::json& j);

 private:
  FeatureKind kind_ = FeatureKind::kIdentity;
  int input_dim_ = 1;
  int degree_ = 0;
  RowMatrix omega_;  // count x input_dim
  Eigen::VectorXd offset_;
  double scale_ = 1.0;
  std::vector<ParticleEnsemble> banks_;
};

// Stage-I operator V (k_a x k_w) and stage-II weights u (k_a).
struct RidgeSolution {
  Eigen::MatrixXd v;
  Eigen::VectorXd u;
  double zeta1 = 0.0;
  double zeta2 = 0.0;
};

// Solves (A + jitter) X = B for symmetric positive definite A. Retries once with
// a 1e-10 * trace / dim diagonal; throws NumericalError with a reciprocal
// condition estimate if that fails too.
Eigen::MatrixXd spd_solve(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);

// Closed-form ridge heads given feature matrices.
//   V = Psi^T Phi (Phi^T Phi + 2 m zeta1 I)^-1
//   u = (X^T X + 2 n zeta2 I)^-1 X^T y,  X = direct * Psi_v + projected * Phi_2 V^T
RidgeSolution solve_ridge_heads(const RowMatrix& psi_a, const RowMatrix& phi_w,
                                const RowMatrix& phi_w2, const RowMatrix& psi_v,
                                const Eigen::VectorXd& y, const StageTwoForm& form, double zeta1,
                                double zeta2);

struct TwoStageModel {
  FeatureMap psi;
  FeatureMap phi;
  RidgeSolution heads;

  // h(a) = u^T psi(a)
  double predict(std::span<const double> a) const;
  double predict(double a) const { return predict(std::span<const double>(&a, 1)); }
  Eigen::VectorXd predict_batch(const RowMatrix& a) const;
};

TwoStageModel fixed_2sls(const FeatureMap& psi, const FeatureMap& phi, const BilevelData& data,
                         double zeta1, double zeta2);

struct DfivConfig {
  int feature_dim = 8;   // neuron banks per network
  int bank_width = 16;   // neurons per bank
  double clip_bound = 10.0;
  Activation activation = Activation::kTanh;
  double zeta1 = 1e-3;
  double zeta2 = 1e-3;
  int steps = 1000;
  double lr = 1e-3;
  int batch_size = 0;  // rows per step for both stages; 0 = full data
  std::uint64_t seed = 0;
  int threads = 1;
  double divergence_norm = 1e6;

  void validate() const;
};

struct DfivTraceRecord {
  int iter = 0;
  double stage1_loss = 0.0;
  double stage2_loss = 0.0;
  std::optional<double> value;
};

struct DfivModel {
  TwoStageModel model;
  std::vector<DfivTraceRecord> trace;
  DfivConfig config;
};

// Loss values and mean-field gradients (no 1/width factor) of both DFIV
// losses w.r.t. every bank particle; stage I w.r.t. phi, stage II w.r.t. psi.
struct DfivGradients {
  double stage1_loss = 0.0;
  double stage2_loss = 0.0;
  std::vector<RowMatrix> phi_grads;
  std::vector<RowMatrix> psi_grads;
};

// Regularized DFIV losses at the closed-form heads for the given rows.
double dfiv_stage1_loss(const FeatureMap& psi, const FeatureMap& phi, const StageOneBatch& b1,
                        double zeta1);
double dfiv_stage2_loss(const FeatureMap& psi, const FeatureMap& phi, const StageOneBatch& b1,
                        const StageTwoBatch& b2, const StageTwoForm& form, double zeta1,
                        double zeta2);
// Gradients through the ridge solves by the adjoint method.
DfivGradients dfiv_gradients(const FeatureMap& psi, const FeatureMap& phi,
                             const StageOneBatch& b1, const StageTwoBatch& b2,
                             const StageTwoForm& form, double zeta1, double zeta2,
                             int threads = 1);

FeatureMap initial_feature_net(int input_dim, const DfivConfig& cfg, std::uint64_t stream);

using TwoStageProbe = std::function<double(const TwoStageModel&)>;

DfivModel dfiv_train(const DfivConfig& cfg, const BilevelData& data,
                     const TwoStageProbe& probe = nullptr);
// Same loop from caller-provided feature networks.
DfivModel dfiv_train(const DfivConfig& cfg, FeatureMap psi, FeatureMap phi,
                     const BilevelData& data, const TwoStageProbe& probe = nullptr);

}  // namespace mfldiv
