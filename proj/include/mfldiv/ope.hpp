#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <vector>

#include "mfldiv/baselines.hpp"
#include "mfldiv/f2bmld.hpp"
#include "mfldiv/objectives.hpp"

namespace mfldiv {

// Finite MDP. Tensors are flattened as [(s * actions + b) * states + s_next].
struct TabularMdp {
  int states = 0;
  int actions = 0;
  std::vector<double> transition;
  std::vector<double> reward;
  double discount = 0.9;
  std::vector<double> initial;
  double slip = 0.0;  // informational; already folded into `transition`

  double p(int s, int b, int s_next) const;
  double r(int s, int b, int s_next) const;
  // E[r | s, b].
  double expected_reward(int s, int b) const;
  int pairs() const { return states * actions; }
  void validate() const;
};

// Row s is the action distribution at state s.
using Policy = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void validate_policy(const Policy& pi, int states, int actions);
Policy uniform_policy(int states, int actions);
// Takes `action` with probability `prob`, the others uniformly otherwise.
Policy biased_policy(int states, int actions, int action, double prob);

// Chain of `states` cells with actions left (0) and right (1). With probability
// `slip` the chosen action is replaced by a uniformly drawn one. Arriving at the
// right end pays `reward_scale`; every other transition pays nothing.
TabularMdp chain_mdp(int states, double slip, double discount, double reward_scale = 0.1);

struct OpeDataset {
  int states = 0;
  int actions = 0;
  std::vector<int> s;
  std::vector<int> b;
  std::vector<double> r;
  std::vector<int> s_next;
  std::vector<int> b_next;  // drawn from the target policy at s_next
  Policy target;
  std::uint64_t seed = 0;
  int episode_length = 0;

  std::size_t size() const { return s.size(); }
  void validate() const;
};

// Behavior rollouts in episodes of `episode_length` steps started from the
// initial distribution.
OpeDataset build_ope_dataset(const TabularMdp& mdp, const Policy& behavior, const Policy& target,
                             std::size_t n_tuples, std::uint64_t seed, int episode_length = 20);

// One-hot(s) followed by one-hot(b).
void encode_pair(int states, int actions, int s, int b, std::span<double> out);
RowMatrix encode_pairs(int states, int actions, const std::vector<int>& s,
                       const std::vector<int>& b);

// Bellman equation as a bilevel problem: a = (s', b'), w = v = (s, b), y = r,
// residual Q(s, b) - discount * g(s, b) - r.
BilevelData ope_bilevel(const OpeDataset& ds, double discount);

// Q^pi from (I - discount P^pi) Q = rbar; indexed by s * actions + b.
Eigen::VectorXd exact_q(const TabularMdp& mdp, const Policy& pi);
double bellman_residual(const TabularMdp& mdp, const Policy& pi, const Eigen::VectorXd& q);

using QFunction = std::function<double(int s, int b)>;

double policy_value(const Eigen::VectorXd& q, const TabularMdp& mdp, const Policy& pi);
// Exact enumeration over the initial law and the policy.
double policy_value(const QFunction& q, const TabularMdp& mdp, const Policy& pi);
// Monte Carlo over s ~ initial, b ~ pi.
MonteCarloEstimate policy_value_mc(const QFunction& q, const TabularMdp& mdp, const Policy& pi,
                                   std::int64_t n_mc, std::uint64_t seed);

QFunction q_function(const ParticleEnsemble& ens_x, int states, int actions);
QFunction q_function(const TwoStageModel& model, int states, int actions);
Eigen::VectorXd q_table(const QFunction& q, int states, int actions);

// F2BMLD on the Bellman bilevel problem; the trace carries the value estimate.
// Identical tuples are merged into weighted rows, so a batch_size at least the
// number of distinct tuples gives exact full-data gradients.
TrainedModel f2bmld_ope_train(const TrainConfig& cfg, const OpeDataset& ds,
                              const TabularMdp& mdp);
DfivModel dfiv_ope_train(const DfivConfig& cfg, const OpeDataset& ds, const TabularMdp& mdp);

void to_json(nlohmann::json& j, const TabularMdp& mdp);
void from_json(const nlohmann::json& j, TabularMdp& mdp);
nlohmann::json policy_to_json(const Policy& pi);
Policy policy_from_json(const nlohmann::json& j);

TabularMdp load_mdp(const std::filesystem::path& path);
void save_mdp(const std::filesystem::path& path, const TabularMdp& mdp);

inline constexpr int kOpeSchemaVersion = 1;
void save_ope_dataset(const std::filesystem::path& path, const OpeDataset& ds);
OpeDataset load_ope_dataset(const std::filesystem::path& path);

}  // namespace mfldiv
