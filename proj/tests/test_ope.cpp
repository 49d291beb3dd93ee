#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "mfldiv/errors.hpp"
#include "mfldiv/ope.hpp"
#include "oracles.hpp"

using namespace mfldiv;

namespace {

TabularMdp single_state_mdp(double reward, double discount) {
  TabularMdp mdp;
  mdp.states = 1;
  mdp.actions = 1;
  mdp.transition = {1.0};
  mdp.reward = {reward};
  mdp.discount = discount;
  mdp.initial = {1.0};
  return mdp;
}

// Random dense MDP with Dirichlet-like rows.
TabularMdp random_mdp(int states, int actions, double discount, std::mt19937_64& gen) {
  TabularMdp mdp;
  mdp.states = states;
  mdp.actions = actions;
  mdp.discount = discount;
  std::exponential_distribution<double> ex(1.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int s = 0; s < states; ++s) {
    for (int b = 0; b < actions; ++b) {
      std::vector<double> row(states);
      for (double& v : row) v = ex(gen);
      const double total = std::accumulate(row.begin(), row.end(), 0.0);
      for (int k = 0; k < states; ++k) {
        mdp.transition.push_back(row[k] / total);
        mdp.reward.push_back(nd(gen));
      }
    }
  }
  // renormalize so each row sums to 1 within rounding
  for (int s = 0; s < states; ++s) {
    for (int b = 0; b < actions; ++b) {
      double sum = 0.0;
      for (int k = 0; k < states - 1; ++k) sum += mdp.transition[(s * actions + b) * states + k];
      mdp.transition[(s * actions + b) * states + states - 1] = 1.0 - sum;
    }
  }
  mdp.initial.assign(states, 1.0 / states);
  mdp.validate();
  return mdp;
}

Policy random_policy(int states, int actions, std::mt19937_64& gen) {
  std::exponential_distribution<double> ex(1.0);
  Policy pi(states, actions);
  for (int s = 0; s < states; ++s) {
    for (int b = 0; b < actions; ++b) pi(s, b) = ex(gen);
    pi.row(s) /= pi.row(s).sum();
    pi(s, actions - 1) = 1.0 - pi.row(s).head(actions - 1).sum();
  }
  return pi;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mfldiv_test_" + name);
}

}  // namespace

TEST_CASE("chain MDP structure") {
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
  CHECK(mdp.p(2, 1, 3) == doctest::Approx(0.9));
  CHECK(mdp.p(2, 1, 1) == doctest::Approx(0.1));
  CHECK(mdp.p(0, 0, 0) == doctest::Approx(0.9));
  CHECK(mdp.p(4, 1, 4) == doctest::Approx(0.9));
  CHECK(mdp.r(3, 1, 4) == 0.1);
  CHECK(mdp.r(3, 1, 2) == 0.0);
  CHECK(mdp.expected_reward(3, 1) == doctest::Approx(0.09));
  CHECK(mdp.initial == std::vector<double>(5, 0.2));
  CHECK_THROWS_AS(chain_mdp(1, 0.2, 0.9), ContractError);
  CHECK_THROWS_AS(chain_mdp(5, 0.2, 1.0), ContractError);

  TabularMdp broken = mdp;
  broken.transition[0] += 1e-9;
  CHECK_THROWS_AS(broken.validate(), ContractError);
}

TEST_CASE("policies") {
  const Policy u = uniform_policy(3, 4);
  CHECK(u(2, 3) == 0.25);
  const Policy b = biased_policy(2, 3, 1, 0.7);
  CHECK(b(0, 1) == 0.7);
  CHECK(b(1, 2) == doctest::Approx(0.15));
  CHECK_NOTHROW(validate_policy(b, 2, 3));
  Policy bad = b;
  bad(0, 0) = 0.5;
  CHECK_THROWS_AS(validate_policy(bad, 2, 3), ContractError);
  CHECK_THROWS_AS(biased_policy(2, 1, 0, 0.5), ContractError);
}

TEST_CASE("dataset collection") {
  SUBCASE("a deterministic single-state MDP yields identical tuples") {
    const TabularMdp mdp = single_state_mdp(1.0, 0.5);
    const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(1, 1), uniform_policy(1, 1), 50, 3);
    REQUIRE(ds.size() == 50);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      CHECK(ds.s[i] == 0);
      CHECK(ds.b[i] == 0);
      CHECK(ds.r[i] == 1.0);
      CHECK(ds.s_next[i] == 0);
      CHECK(ds.b_next[i] == 0);
    }
  }
  SUBCASE("without slip the successor is a function of the state-action pair") {
    const TabularMdp mdp = chain_mdp(5, 0.0, 0.9);
    const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), biased_policy(5, 2, 1, 0.9), 2000, 4);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const int want = ds.b[i] == 0 ? std::max(ds.s[i] - 1, 0) : std::min(ds.s[i] + 1, 4);
      CHECK(ds.s_next[i] == want);
    }
  }
  SUBCASE("episodes chain consecutive tuples") {
    const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
    const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), uniform_policy(5, 2), 95, 5, 20);
    CHECK(ds.size() == 95);
    for (std::size_t i = 0; i + 1 < ds.size(); ++i) {
      if ((i + 1) % 20 != 0) CHECK(ds.s[i + 1] == ds.s_next[i]);
    }
  }
  SUBCASE("identical seeds give identical datasets") {
    const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
    const OpeDataset a = build_ope_dataset(mdp, uniform_policy(5, 2), uniform_policy(5, 2), 300, 6);
    const OpeDataset b = build_ope_dataset(mdp, uniform_policy(5, 2), uniform_policy(5, 2), 300, 6);
    CHECK(a.s_next == b.s_next);
    CHECK(a.b_next == b.b_next);
  }
}

TEST_CASE("empirical transition frequencies match the kernel") {
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
  const Policy target = biased_policy(5, 2, 1, 0.9);
  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), target, 100000, 7);
  std::vector<double> visits(10, 0.0), moves(50, 0.0), picks(10, 0.0), right(10, 0.0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    visits[ds.s[i] * 2 + ds.b[i]] += 1.0;
    moves[(ds.s[i] * 2 + ds.b[i]) * 5 + ds.s_next[i]] += 1.0;
    picks[ds.s_next[i]] += 1.0;
    right[ds.s_next[i]] += ds.b_next[i] == 1 ? 1.0 : 0.0;
  }
  for (int s = 0; s < 5; ++s) {
    for (int b = 0; b < 2; ++b) {
      const double n = visits[s * 2 + b];
      REQUIRE(n > 1000);
      for (int k = 0; k < 5; ++k) {
        const double p = mdp.p(s, b, k);
        const double phat = moves[(s * 2 + b) * 5 + k] / n;
        const double se = std::sqrt(std::max(p * (1 - p), 1e-12) / n);
        CHECK(std::abs(phat - p) <= 3.0 * se);
      }
    }
    const double n = picks[s];
    CHECK(std::abs(right[s] / n - 0.9) <= 3.0 * std::sqrt(0.09 / n));
  }
}

TEST_CASE("exact Q by linear solve") {
  SUBCASE("zero discount gives the immediate reward") {
    const TabularMdp mdp = chain_mdp(5, 0.2, 0.0);
    const Eigen::VectorXd q = exact_q(mdp, uniform_policy(5, 2));
    for (int s = 0; s < 5; ++s)
      for (int b = 0; b < 2; ++b) CHECK(q[s * 2 + b] == doctest::Approx(mdp.expected_reward(s, b)).epsilon(1e-15));
  }
  SUBCASE("a constant reward sums to a geometric series") {
    TabularMdp mdp = chain_mdp(4, 0.3, 0.8);
    std::fill(mdp.reward.begin(), mdp.reward.end(), 2.0);
    const Eigen::VectorXd q = exact_q(mdp, biased_policy(4, 2, 0, 0.6));
    for (Eigen::Index k = 0; k < q.size(); ++k) CHECK(q[k] == doctest::Approx(10.0).epsilon(1e-13));
  }
  SUBCASE("Bellman residual is negligible") {
    std::mt19937_64 gen(8);
    for (int trial = 0; trial < 20; ++trial) {
      const TabularMdp mdp = random_mdp(2 + trial % 6, 1 + trial % 3, 0.95, gen);
      const Policy pi = random_policy(mdp.states, mdp.actions, gen);
      CHECK(bellman_residual(mdp, pi, exact_q(mdp, pi)) <= 1e-10);
    }
  }
  SUBCASE("Monte Carlo returns agree on the chain") {
    const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
    const Policy pi = biased_policy(5, 2, 1, 0.9);
    const Eigen::VectorXd q = exact_q(mdp, pi);
    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    const auto sample = [&](auto weight, int count) {
      const double u = ud(gen);
      double acc = 0.0;
      for (int k = 0; k < count; ++k) {
        acc += weight(k);
        if (u < acc) return k;
      }
      return count - 1;
    };
    // 10 pairs x 500 episodes x 200 steps = 1e6 simulated steps; 0.9^200 is below 1e-9
    for (int s0 = 0; s0 < 5; ++s0) {
      for (int b0 = 0; b0 < 2; ++b0) {
        double sum = 0.0, sq = 0.0;
        const int episodes = 500;
        for (int e = 0; e < episodes; ++e) {
          int s = s0, b = b0;
          double ret = 0.0, disc = 1.0;
          for (int t = 0; t < 200; ++t) {
            const int s2 = sample([&](int k) { return mdp.p(s, b, k); }, 5);
            ret += disc * mdp.r(s, b, s2);
            disc *= 0.9;
            s = s2;
            b = sample([&](int k) { return pi(s, k); }, 2);
          }
          sum += ret;
          sq += ret * ret;
        }
        const double mean = sum / episodes;
        const double se = std::sqrt((sq / episodes - mean * mean) / episodes);
        CHECK(std::abs(mean - q[s0 * 2 + b0]) <= 3.0 * se + 1e-9);
      }
    }
  }
}

TEST_CASE("policy value") {
  TabularMdp mdp = chain_mdp(2, 0.0, 0.5);
  Eigen::VectorXd q(4);
  q << 1.0, 2.0, 3.0, 4.0;
  mdp.initial = {0.0, 1.0};
  Policy det(2, 2);
  det << 1.0, 0.0, 0.0, 1.0;
  CHECK(policy_value(q, mdp, det) == 4.0);
  mdp.initial = {0.5, 0.5};
  CHECK(policy_value(q, mdp, uniform_policy(2, 2)) == doctest::Approx(2.5));

  SUBCASE("function and table forms agree on the exact plug-in") {
    const TabularMdp chain = chain_mdp(5, 0.2, 0.9);
    const Policy pi = biased_policy(5, 2, 1, 0.9);
    const Eigen::VectorXd qt = exact_q(chain, pi);
    const QFunction qf = [&](int s, int b) { return qt[s * 2 + b]; };
    CHECK(policy_value(qf, chain, pi) == doctest::Approx(policy_value(qt, chain, pi)).epsilon(1e-15));
    CHECK((q_table(qf, 5, 2) - qt).cwiseAbs().maxCoeff() == 0.0);
    const MonteCarloEstimate mc = policy_value_mc(qf, chain, pi, 200000, 3);
    CHECK(std::abs(mc.mean - policy_value(qt, chain, pi)) <= 3.0 * mc.std_error);
  }
}

TEST_CASE("state-action encoding and the Bellman adapter") {
  std::vector<double> code(7);
  encode_pair(5, 2, 3, 1, code);
  CHECK(code == std::vector<double>{0, 0, 0, 1, 0, 0, 1});
  CHECK_THROWS_AS(encode_pair(5, 2, 5, 0, code), ContractError);

  const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), biased_policy(5, 2, 1, 0.9), 40, 10);
  const BilevelData data = ope_bilevel(ds, 0.9);
  CHECK(data.form.direct == 1.0);
  CHECK(data.form.projected == -0.9);
  for (Eigen::Index i = 0; i < 40; ++i) {
    const auto k = static_cast<std::size_t>(i);
    CHECK(data.stage1_a(i, ds.s_next[k]) == 1.0);
    CHECK(data.stage1_a(i, 5 + ds.b_next[k]) == 1.0);
    CHECK(data.stage1_a.row(i).sum() == 2.0);
    CHECK(data.stage1_w(i, ds.s[k]) == 1.0);
    CHECK(data.stage1_w(i, 5 + ds.b[k]) == 1.0);
    CHECK((data.stage2_v.row(i).array() == data.stage1_w.row(i).array()).all());
    CHECK(data.stage2_y[i] == ds.r[k]);
  }
}

TEST_CASE("adapted stage-II gradients match finite differences") {
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), biased_policy(5, 2, 1, 0.9), 30, 11);
  const BilevelData data = ope_bilevel(ds, 0.9);
  const StageTwoBatch b2 = data.stage_two_head(30);
  std::mt19937_64 gen(12);
  const NeuronSpec spec{7, 2.0, Activation::kTanh};
  const ParticleEnsemble x(spec, oracle::gaussian_matrix(4, 9, gen));
  const ParticleEnsemble z(spec, oracle::gaussian_matrix(5, 9, gen));
  int probes = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const auto loss = [&](const Eigen::VectorXd& p) {
      RowMatrix q = x.particles();
      q.row(i) = p.transpose();
      return u2(ParticleEnsemble(spec, q), z, b2, data.form);
    };
    const Eigen::VectorXd fd = oracle::central_diff(loss, x.particles().row(i).transpose());
    CHECK(oracle::rel_err(grad1_u2(x, z, b2, data.form, x.particle(i)), 4.0 * fd) <= 1e-5);
    ++probes;
  }
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const auto loss = [&](const Eigen::VectorXd& p) {
      RowMatrix q = z.particles();
      q.row(i) = p.transpose();
      return u2(x, ParticleEnsemble(spec, q), b2, data.form);
    };
    const Eigen::VectorXd fd = oracle::central_diff(loss, z.particles().row(i).transpose());
    CHECK(oracle::rel_err(grad_u2(x, z, b2, data.form, z.particle(i)), 5.0 * fd) <= 1e-5);
    ++probes;
  }
  CHECK(probes == 9);
}

TEST_CASE("fixed-feature value estimates are equivariant under state relabeling") {
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.9);
  const Policy target = biased_policy(5, 2, 1, 0.9);
  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), target, 3000, 13);
  const std::vector<int> perm{3, 0, 4, 1, 2};

  TabularMdp pm = mdp;
  for (int s = 0; s < 5; ++s) {
    pm.initial[perm[s]] = mdp.initial[s];
    for (int b = 0; b < 2; ++b) {
      for (int k = 0; k < 5; ++k) {
        pm.transition[(perm[s] * 2 + b) * 5 + perm[k]] = mdp.p(s, b, k);
        pm.reward[(perm[s] * 2 + b) * 5 + perm[k]] = mdp.r(s, b, k);
      }
    }
  }
  OpeDataset pd = ds;
  pd.target = target;
  for (int s = 0; s < 5; ++s) pd.target.row(perm[s]) = target.row(s);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    pd.s[i] = perm[ds.s[i]];
    pd.s_next[i] = perm[ds.s_next[i]];
  }
  const FeatureMap id = FeatureMap::identity(7);
  const TwoStageModel a = fixed_2sls(id, id, ope_bilevel(ds, 0.9), 1e-4, 1e-4);
  const TwoStageModel b = fixed_2sls(id, id, ope_bilevel(pd, 0.9), 1e-4, 1e-4);
  const double va = policy_value(q_function(a, 5, 2), mdp, target);
  const double vb = policy_value(q_function(b, 5, 2), pm, pd.target);
  CHECK(va == doctest::Approx(vb).epsilon(1e-10));
  CHECK(policy_value(exact_q(mdp, target), mdp, target) ==
        doctest::Approx(policy_value(exact_q(pm, pd.target), pm, pd.target)).epsilon(1e-12));
}

TEST_CASE("MDP and dataset files round-trip") {
  const TabularMdp mdp = chain_mdp(4, 0.3, 0.85, 0.5);
  const auto mpath = temp_path("mdp.json");
  save_mdp(mpath, mdp);
  const TabularMdp back = load_mdp(mpath);
  CHECK(back.transition == mdp.transition);
  CHECK(back.reward == mdp.reward);
  CHECK(back.discount == mdp.discount);
  CHECK(back.initial == mdp.initial);
  std::filesystem::remove(mpath);

  const Policy pi = biased_policy(4, 2, 0, 0.3);
  CHECK((policy_from_json(policy_to_json(pi)).array() == pi.array()).all());

  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(4, 2), pi, 120, 14, 7);
  const auto dpath = temp_path("ope.csv");
  save_ope_dataset(dpath, ds);
  const OpeDataset dback = load_ope_dataset(dpath);
  CHECK(dback.s == ds.s);
  CHECK(dback.b == ds.b);
  CHECK(dback.r == ds.r);
  CHECK(dback.s_next == ds.s_next);
  CHECK(dback.b_next == ds.b_next);
  CHECK(dback.seed == 14);
  CHECK(dback.episode_length == 7);
  CHECK((dback.target.array() == pi.array()).all());

  std::stringstream buf;
  buf << std::ifstream(dpath).rdbuf();
  const std::string text = buf.str();
  std::ofstream(dpath) << text.substr(0, text.size() * 2 / 3);
  CHECK_THROWS_AS(load_ope_dataset(dpath), ParseError);
  std::filesystem::remove(dpath);

  const auto bad = temp_path("bad_mdp.json");
  std::ofstream(bad) << R"({"states": 1, "actions": 1, "transition": [[[0.5]]], "reward": [[[0]]], "discount": 0.9, "initial": [1]})";
  CHECK_THROWS(load_mdp(bad));
  std::filesystem::remove(bad);
}

namespace {

TrainConfig ope_config(int outer_steps) {
  TrainConfig cfg;
  cfg.alpha = cfg.beta = 1.0;
  cfg.gamma = 2.0;
  cfg.outer_steps = outer_steps;
  cfg.batch_size = 100000;
  cfg.reg = {1e-5, 1e-5, 1e-5, 1e-5, 1.0};
  return cfg;
}

}  // namespace

TEST_CASE("F2BMLD with zero discount regresses rewards on state-action pairs") {
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.0);
  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), biased_policy(5, 2, 1, 0.9), 10000, 21);
  // empirical mean reward per pair
  std::vector<double> sum(10, 0.0), cnt(10, 0.0);
  for (std::size_t k = 0; k < ds.size(); ++k) {
    sum[ds.s[k] * 2 + ds.b[k]] += ds.r[k];
    cnt[ds.s[k] * 2 + ds.b[k]] += 1.0;
  }
  double scale = 0.0;
  for (int i = 0; i < 10; ++i) {
    REQUIRE(cnt[i] > 0.0);
    sum[i] /= cnt[i];
    scale = std::max(scale, std::abs(sum[i]));
  }
  REQUIRE(scale > 0.0);
  const TrainedModel model = f2bmld_ope_train(ope_config(600), ds, mdp);
  const Eigen::VectorXd q = q_table(q_function(model.x, 5, 2), 5, 2);
  for (int i = 0; i < 10; ++i) {
    INFO("pair " << i << " fitted " << q[i] << " empirical " << sum[i]);
    CHECK(std::abs(q[i] - sum[i]) <= 0.05 * scale);
  }
}

TEST_CASE("F2BMLD with zero rewards estimates a zero Q-function") {
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.5, 0.0);
  const OpeDataset ds = build_ope_dataset(mdp, uniform_policy(5, 2), biased_policy(5, 2, 1, 0.9), 10000, 22);
  const TrainedModel model = f2bmld_ope_train(ope_config(600), ds, mdp);
  const Eigen::VectorXd q = q_table(q_function(model.x, 5, 2), 5, 2);
  const double start = std::abs(model.trace.front().value.value());
  INFO("initial value " << start << " q " << q.transpose());
  CHECK(q.cwiseAbs().maxCoeff() < 0.02);
  CHECK(std::abs(model.trace.back().value.value()) < 0.1 * start);
}
