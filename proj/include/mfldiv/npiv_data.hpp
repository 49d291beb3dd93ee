#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mfldiv/features.hpp"

namespace mfldiv {

enum class StructuralFunction { kAbs, kSin, kLinear };

std::string_view to_string(StructuralFunction f);
StructuralFunction structural_function_from_string(std::string_view name);

// Generative design with a known structural function:
//   W ~ U[-r, r], U ~ N(0, confounder_var), V ~ N(0, treatment_noise_var),
//   A = W + U + V, Y = h(A) + U + eps, eps ~ N(0, outcome_noise_var).
// U is independent of W, so E[U | W] = 0 holds exactly. Variances may be zero.
struct StructuralSpec {
  StructuralFunction function = StructuralFunction::kAbs;
  double instrument_range = 3.0;
  double confounder_var = 0.25;
  double treatment_noise_var = 0.25;
  double outcome_noise_var = 0.01;

  double h(double a) const;
  // Variance of A - W = U + V.
  double first_stage_var() const { return confounder_var + treatment_noise_var; }
  void validate() const;
  bool operator==(const StructuralSpec&) const = default;
};

void to_json(nlohmann::json& j, const StructuralSpec& s);
void from_json(const nlohmann::json& j, StructuralSpec& s);

struct NpivMeta {
  std::string generator;  // "abs", "sin", "linear", or free text for external data
  std::uint64_t seed = 0;
  std::optional<StructuralSpec> spec;  // ground truth, when known
  double bound_m = 0.0;                // max |y| and max |h(a)| over the realized sample
};

// Stage I rows (a_i, w_i), i < m; stage II rows (w_j, y_j), j < n.
struct NpivDataset {
  RowMatrix stage1_a;
  RowMatrix stage1_w;
  RowMatrix stage2_w;
  Eigen::VectorXd stage2_y;
  NpivMeta meta;

  Eigen::Index m() const { return stage1_a.rows(); }
  Eigen::Index n() const { return stage2_w.rows(); }
  int treatment_dim() const { return static_cast<int>(stage1_a.cols()); }
  int instrument_dim() const { return static_cast<int>(stage1_w.cols()); }
  // Shapes, sizes and finiteness; throws ContractError.
  void validate() const;
};

// Samples with the latent confounder kept, for tests of the exclusion restriction.
struct NpivSample {
  NpivDataset data;
  Eigen::VectorXd stage1_u;
  Eigen::VectorXd stage2_u;
};

NpivSample generate_npiv_with_latents(const StructuralSpec& spec, Eigen::Index m, Eigen::Index n,
                                      std::uint64_t seed);
NpivDataset generate_npiv(const StructuralSpec& spec, Eigen::Index m, Eigen::Index n,
                          std::uint64_t seed);

// Gauss-Hermite rule for E[f(Z)], Z ~ N(0, 1): E ~= sum_k weights[k] f(nodes[k]).
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};
const GaussHermiteRule& gauss_hermite(int order);

// (T h)(w) = E[h(A) | W = w] = E[h(w + U + V)] by Gauss-Hermite quadrature.
double oracle_th(const StructuralSpec& spec, const std::function<double(double)>& h, double w,
                 int n_quad = 64);
// Closed form of (T h_true)(w) for the built-in structural functions. Gauss-Hermite
// converges only at rate 1/n_quad across the kink of abs, so risk metrics use this.
double structural_th(const StructuralSpec& spec, double w);
// Monte Carlo fallback with n_samples draws; also returns the standard error.
struct MonteCarloEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};
MonteCarloEstimate oracle_th_monte_carlo(const StructuralSpec& spec,
                                         const std::function<double(double)>& h, double w,
                                         std::int64_t n_samples, std::uint64_t seed);

inline constexpr int kDatasetSchemaVersion = 1;

void save_dataset(const std::filesystem::path& path, const NpivDataset& ds);
NpivDataset load_dataset(const std::filesystem::path& path);

}  // namespace mfldiv
