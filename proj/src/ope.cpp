#include "mfldiv/ope.hpp"

#include <Eigen/LU>
#include <cmath>
#include <fstream>
#include <string>

#include "mfldiv/csv.hpp"
#include "mfldiv/errors.hpp"
#include "mfldiv/rng.hpp"

namespace mfldiv {

namespace {

std::size_t flat(int states, int actions, int s, int b, int s_next) {
  return (static_cast<std::size_t>(s) * static_cast<std::size_t>(actions) +
          static_cast<std::size_t>(b)) *
             static_cast<std::size_t>(states) +
         static_cast<std::size_t>(s_next);
}

// Inverse-CDF draw; the last positive-weight index absorbs rounding.
template <typename Weights>
int categorical(double u, const Weights& weights, int count) {
  double acc = 0.0;
  int last = 0;
  for (int k = 0; k < count; ++k) {
    if (weights(k) <= 0.0) continue;
    acc += weights(k);
    last = k;
    if (u < acc) return k;
  }
  return last;
}

int next_state(const TabularMdp& mdp, int s, int b, double u) {
  return categorical(u, [&](int k) { return mdp.p(s, b, k); }, mdp.states);
}

int draw_action(const Policy& pi, int s, double u) {
  return categorical(u, [&](int k) { return pi(s, k); }, static_cast<int>(pi.cols()));
}

}  // namespace

double TabularMdp::p(int s, int b, int s_next) const {
  return transition[flat(states, actions, s, b, s_next)];
}

double TabularMdp::r(int s, int b, int s_next) const {
  return reward[flat(states, actions, s, b, s_next)];
}

double TabularMdp::expected_reward(int s, int b) const {
  double acc = 0.0;
  for (int k = 0; k < states; ++k) acc += p(s, b, k) * r(s, b, k);
  return acc;
}

void TabularMdp::validate() const {
  MFLDIV_REQUIRE(states >= 1 && actions >= 1, "MDP needs at least one state and action");
  const std::size_t cells = static_cast<std::size_t>(states) * static_cast<std::size_t>(actions) *
                            static_cast<std::size_t>(states);
  MFLDIV_REQUIRE(transition.size() == cells, "transition tensor has the wrong size");
  MFLDIV_REQUIRE(reward.size() == cells, "reward tensor has the wrong size");
  MFLDIV_REQUIRE(discount >= 0.0 && discount < 1.0, "discount must lie in [0, 1)");
  MFLDIV_REQUIRE(slip >= 0.0 && slip <= 1.0, "slip must lie in [0, 1]");
  MFLDIV_REQUIRE(initial.size() == static_cast<std::size_t>(states),
                 "initial distribution has the wrong size");
  for (int s = 0; s < states; ++s) {
    for (int b = 0; b < actions; ++b) {
      double sum = 0.0;
      for (int k = 0; k < states; ++k) {
        const double v = p(s, b, k);
        MFLDIV_REQUIRE(v >= 0.0 && std::isfinite(v), "transition probabilities must be >= 0");
        MFLDIV_REQUIRE(std::isfinite(r(s, b, k)), "rewards must be finite");
        sum += v;
      }
      MFLDIV_REQUIRE(std::abs(sum - 1.0) <= 1e-12,
                     "transition row (" + std::to_string(s) + ", " + std::to_string(b) +
                         ") sums to " + format_double(sum));
    }
  }
  double sum = 0.0;
  for (double v : initial) {
    MFLDIV_REQUIRE(v >= 0.0 && std::isfinite(v), "initial probabilities must be >= 0");
    sum += v;
  }
  MFLDIV_REQUIRE(std::abs(sum - 1.0) <= 1e-12, "initial distribution must sum to 1");
}

void validate_policy(const Policy& pi, int states, int actions) {
  MFLDIV_REQUIRE(pi.rows() == states && pi.cols() == actions, "policy has the wrong shape");
  for (int s = 0; s < states; ++s) {
    MFLDIV_REQUIRE((pi.row(s).array() >= 0.0).all() && pi.row(s).allFinite(),
                   "policy probabilities must be >= 0");
    MFLDIV_REQUIRE(std::abs(pi.row(s).sum() - 1.0) <= 1e-12, "policy rows must sum to 1");
  }
}

Policy uniform_policy(int states, int actions) {
  MFLDIV_REQUIRE(states >= 1 && actions >= 1, "policy needs positive sizes");
  return Policy::Constant(states, actions, 1.0 / actions);
}

Policy biased_policy(int states, int actions, int action, double prob) {
  MFLDIV_REQUIRE(actions >= 2, "a biased policy needs two or more actions");
  MFLDIV_REQUIRE(action >= 0 && action < actions, "action out of range");
  MFLDIV_REQUIRE(prob >= 0.0 && prob <= 1.0, "probability out of range");
  Policy pi = Policy::Constant(states, actions, (1.0 - prob) / (actions - 1));
  pi.col(action).setConstant(prob);
  return pi;
}

TabularMdp chain_mdp(int states, double slip, double discount, double reward_scale) {
  MFLDIV_REQUIRE(states >= 2, "chain needs two or more states");
  TabularMdp mdp;
  mdp.states = states;
  mdp.actions = 2;
  mdp.discount = discount;
  mdp.slip = slip;
  const std::size_t cells = static_cast<std::size_t>(states) * 2 * static_cast<std::size_t>(states);
  mdp.transition.assign(cells, 0.0);
  mdp.reward.assign(cells, 0.0);
  mdp.initial.assign(static_cast<std::size_t>(states), 1.0 / states);
  auto target = [&](int s, int b) { return b == 0 ? std::max(s - 1, 0) : std::min(s + 1, states - 1); };
  for (int s = 0; s < states; ++s) {
    for (int b = 0; b < 2; ++b) {
      // Executed action: intended with 1 - slip/2, the other with slip/2.
      for (int e = 0; e < 2; ++e) {
        const double prob = e == b ? 1.0 - slip / 2.0 : slip / 2.0;
        mdp.transition[flat(states, 2, s, b, target(s, e))] += prob;
      }
      mdp.reward[flat(states, 2, s, b, states - 1)] = reward_scale;
    }
  }
  mdp.validate();
  return mdp;
}

void OpeDataset::validate() const {
  MFLDIV_REQUIRE(states >= 1 && actions >= 1, "dataset needs positive sizes");
  const std::size_t n = s.size();
  MFLDIV_REQUIRE(n >= 1, "dataset is empty");
  MFLDIV_REQUIRE(b.size() == n && r.size() == n && s_next.size() == n && b_next.size() == n,
                 "dataset columns differ in length");
  for (std::size_t i = 0; i < n; ++i) {
    MFLDIV_REQUIRE(s[i] >= 0 && s[i] < states && s_next[i] >= 0 && s_next[i] < states,
                   "state index out of range in tuple " + std::to_string(i));
    MFLDIV_REQUIRE(b[i] >= 0 && b[i] < actions && b_next[i] >= 0 && b_next[i] < actions,
                   "action index out of range in tuple " + std::to_string(i));
    MFLDIV_REQUIRE(std::isfinite(r[i]), "non-finite reward in tuple " + std::to_string(i));
  }
  validate_policy(target, states, actions);
}

OpeDataset build_ope_dataset(const TabularMdp& mdp, const Policy& behavior, const Policy& target,
                             std::size_t n_tuples, std::uint64_t seed, int episode_length) {
  mdp.validate();
  validate_policy(behavior, mdp.states, mdp.actions);
  validate_policy(target, mdp.states, mdp.actions);
  MFLDIV_REQUIRE(n_tuples >= 1, "need at least one tuple");
  MFLDIV_REQUIRE(episode_length >= 1, "episode length must be positive");
  const CounterRng rng(seed);
  OpeDataset ds;
  ds.states = mdp.states;
  ds.actions = mdp.actions;
  ds.target = target;
  ds.seed = seed;
  ds.episode_length = episode_length;
  ds.s.reserve(n_tuples);
  ds.b.reserve(n_tuples);
  ds.r.reserve(n_tuples);
  ds.s_next.reserve(n_tuples);
  ds.b_next.reserve(n_tuples);

  const Eigen::Map<const Eigen::VectorXd> nu0(mdp.initial.data(), mdp.states);
  std::uint64_t episode = 0;
  while (ds.size() < n_tuples) {
    RngCursor cur(rng, rng.key(Phase::kData, episode++));
    int s = categorical(cur.uniform(), nu0, mdp.states);
    for (int t = 0; t < episode_length && ds.size() < n_tuples; ++t) {
      const int b = draw_action(behavior, s, cur.uniform());
      const int s2 = next_state(mdp, s, b, cur.uniform());
      const int b2 = draw_action(target, s2, cur.uniform());
      ds.s.push_back(s);
      ds.b.push_back(b);
      ds.r.push_back(mdp.r(s, b, s2));
      ds.s_next.push_back(s2);
      ds.b_next.push_back(b2);
      s = s2;
    }
  }
  return ds;
}

void encode_pair(int states, int actions, int s, int b, std::span<double> out) {
  MFLDIV_REQUIRE(out.size() == static_cast<std::size_t>(states + actions), "encoding width mismatch");
  MFLDIV_REQUIRE(s >= 0 && s < states && b >= 0 && b < actions, "index out of range");
  std::fill(out.begin(), out.end(), 0.0);
  out[static_cast<std::size_t>(s)] = 1.0;
  out[static_cast<std::size_t>(states + b)] = 1.0;
}

RowMatrix encode_pairs(int states, int actions, const std::vector<int>& s,
                       const std::vector<int>& b) {
  MFLDIV_REQUIRE(s.size() == b.size(), "state and action columns differ in length");
  RowMatrix out(static_cast<Eigen::Index>(s.size()), states + actions);
  for (std::size_t i = 0; i < s.size(); ++i) {
    encode_pair(states, actions, s[i], b[i], std::span<double>(out.row(static_cast<Eigen::Index>(i)).data(), static_cast<std::size_t>(out.cols())));
  }
  return out;
}

BilevelData ope_bilevel(const OpeDataset& ds, double discount) {
  ds.validate();
  MFLDIV_REQUIRE(discount >= 0.0 && discount < 1.0, "discount must lie in [0, 1)");
  BilevelData data;
  data.stage1_a = encode_pairs(ds.states, ds.actions, ds.s_next, ds.b_next);
  data.stage1_w = encode_pairs(ds.states, ds.actions, ds.s, ds.b);
  data.stage2_w = data.stage1_w;
  data.stage2_v = data.stage1_w;
  data.stage2_y = Eigen::Map<const Eigen::VectorXd>(ds.r.data(), static_cast<Eigen::Index>(ds.size()));
  data.form = StageTwoForm{1.0, -discount};
  return data;
}

Eigen::VectorXd exact_q(const TabularMdp& mdp, const Policy& pi) {
  mdp.validate();
  validate_policy(pi, mdp.states, mdp.actions);
  const int k = mdp.pairs();
  Eigen::MatrixXd system = Eigen::MatrixXd::Identity(k, k);
  Eigen::VectorXd rbar(k);
  for (int s = 0; s < mdp.states; ++s) {
    for (int b = 0; b < mdp.actions; ++b) {
      const int row = s * mdp.actions + b;
      rbar[row] = mdp.expected_reward(s, b);
      for (int s2 = 0; s2 < mdp.states; ++s2) {
        for (int b2 = 0; b2 < mdp.actions; ++b2) {
          system(row, s2 * mdp.actions + b2) -= mdp.discount * mdp.p(s, b, s2) * pi(s2, b2);
        }
      }
    }
  }
  return system.partialPivLu().solve(rbar);
}

double bellman_residual(const TabularMdp& mdp, const Policy& pi, const Eigen::VectorXd& q) {
  MFLDIV_REQUIRE(q.size() == mdp.pairs(), "Q table has the wrong size");
  double worst = 0.0;
  for (int s = 0; s < mdp.states; ++s) {
    for (int b = 0; b < mdp.actions; ++b) {
      double next = 0.0;
      for (int s2 = 0; s2 < mdp.states; ++s2) {
        double v = 0.0;
        for (int b2 = 0; b2 < mdp.actions; ++b2) v += pi(s2, b2) * q[s2 * mdp.actions + b2];
        next += mdp.p(s, b, s2) * v;
      }
      const double res = q[s * mdp.actions + b] - mdp.expected_reward(s, b) - mdp.discount * next;
      worst = std::max(worst, std::abs(res));
    }
  }
  return worst;
}

double policy_value(const Eigen::VectorXd& q, const TabularMdp& mdp, const Policy& pi) {
  MFLDIV_REQUIRE(q.size() == mdp.pairs(), "Q table has the wrong size");
  return policy_value([&](int s, int b) { return q[s * mdp.actions + b]; }, mdp, pi);
}

double policy_value(const QFunction& q, const TabularMdp& mdp, const Policy& pi) {
  validate_policy(pi, mdp.states, mdp.actions);
  MFLDIV_REQUIRE(mdp.initial.size() == static_cast<std::size_t>(mdp.states),
                 "initial distribution has the wrong size");
  double v = 0.0;
  for (int s = 0; s < mdp.states; ++s) {
    const double w = mdp.initial[static_cast<std::size_t>(s)];
    if (w == 0.0) continue;
    for (int b = 0; b < mdp.actions; ++b) {
      if (pi(s, b) != 0.0) v += w * pi(s, b) * q(s, b);
    }
  }
  return v;
}

MonteCarloEstimate policy_value_mc(const QFunction& q, const TabularMdp& mdp, const Policy& pi,
                                   std::int64_t n_mc, std::uint64_t seed) {
  validate_policy(pi, mdp.states, mdp.actions);
  MFLDIV_REQUIRE(n_mc >= 2, "need at least two Monte Carlo draws");
  const CounterRng rng(seed);
  RngCursor cur(rng, rng.key(Phase::kPolicy));
  const Eigen::Map<const Eigen::VectorXd> nu0(mdp.initial.data(), mdp.states);
  // Accumulate values per (s, b) cell; the model is evaluated once per cell.
  std::vector<std::int64_t> counts(static_cast<std::size_t>(mdp.pairs()), 0);
  for (std::int64_t i = 0; i < n_mc; ++i) {
    const int s = categorical(cur.uniform(), nu0, mdp.states);
    const int b = draw_action(pi, s, cur.uniform());
    ++counts[static_cast<std::size_t>(s * mdp.actions + b)];
  }
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int s = 0; s < mdp.states; ++s) {
    for (int b = 0; b < mdp.actions; ++b) {
      const auto c = counts[static_cast<std::size_t>(s * mdp.actions + b)];
      if (c == 0) continue;
      const double v = q(s, b);
      sum += static_cast<double>(c) * v;
      sum_sq += static_cast<double>(c) * v * v;
    }
  }
  const auto n = static_cast<double>(n_mc);
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return {mean, std::sqrt(var / n)};
}

QFunction q_function(const ParticleEnsemble& ens_x, int states, int actions) {
  MFLDIV_REQUIRE(ens_x.spec().input_dim == states + actions, "model width does not match the MDP");
  return [&ens_x, states, actions](int s, int b) {
    std::vector<double> code(static_cast<std::size_t>(states + actions));
    encode_pair(states, actions, s, b, code);
    return ensemble_eval(ens_x, code);
  };
}

QFunction q_function(const TwoStageModel& model, int states, int actions) {
  return [&model, states, actions](int s, int b) {
    std::vector<double> code(static_cast<std::size_t>(states + actions));
    encode_pair(states, actions, s, b, code);
    return model.predict(code);
  };
}

Eigen::VectorXd q_table(const QFunction& q, int states, int actions) {
  Eigen::VectorXd out(states * actions);
  for (int s = 0; s < states; ++s) {
    for (int b = 0; b < actions; ++b) out[s * actions + b] = q(s, b);
  }
  return out;
}

namespace {

void check_match(const OpeDataset& ds, const TabularMdp& mdp) {
  MFLDIV_REQUIRE(ds.states == mdp.states && ds.actions == mdp.actions,
                 "dataset and MDP disagree on state or action counts");
}

}  // namespace

TrainedModel f2bmld_ope_train(const TrainConfig& cfg, const OpeDataset& ds,
                              const TabularMdp& mdp) {
  check_match(ds, mdp);
  // One-hot rows repeat heavily; merging keeps the objective and shrinks each pass.
  const BilevelData data = merge_duplicate_rows(ope_bilevel(ds, mdp.discount));
  const ValueProbe probe = [&](const ParticleEnsemble& ens_x) {
    return policy_value(q_function(ens_x, ds.states, ds.actions), mdp, ds.target);
  };
  return train(cfg, data, probe);
}

DfivModel dfiv_ope_train(const DfivConfig& cfg, const OpeDataset& ds, const TabularMdp& mdp) {
  check_match(ds, mdp);
  const BilevelData data = ope_bilevel(ds, mdp.discount);
  const TwoStageProbe probe = [&](const TwoStageModel& model) {
    return policy_value(q_function(model, ds.states, ds.actions), mdp, ds.target);
  };
  return dfiv_train(cfg, data, probe);
}

void to_json(nlohmann::json& j, const TabularMdp& mdp) {
  nlohmann::json p = nlohmann::json::array();
  nlohmann::json r = nlohmann::json::array();
  for (int s = 0; s < mdp.states; ++s) {
    nlohmann::json ps = nlohmann::json::array();
    nlohmann::json rs = nlohmann::json::array();
    for (int b = 0; b < mdp.actions; ++b) {
      std::vector<double> prow, rrow;
      for (int k = 0; k < mdp.states; ++k) {
        prow.push_back(mdp.p(s, b, k));
        rrow.push_back(mdp.r(s, b, k));
      }
      ps.push_back(prow);
      rs.push_back(rrow);
    }
    p.push_back(ps);
    r.push_back(rs);
  }
  j = nlohmann::json{{"states", mdp.states},   {"actions", mdp.actions}, {"transition", p},
                     {"reward", r},            {"discount", mdp.discount},
                     {"initial", mdp.initial}, {"slip", mdp.slip}};
}

void from_json(const nlohmann::json& j, TabularMdp& mdp) {
  mdp = TabularMdp{};
  mdp.states = j.at("states").get<int>();
  mdp.actions = j.at("actions").get<int>();
  if (mdp.states < 1 || mdp.actions < 1) throw ParseError("MDP sizes must be positive");
  mdp.discount = j.at("discount").get<double>();
  mdp.initial = j.at("initial").get<std::vector<double>>();
  mdp.slip = j.value("slip", 0.0);
  auto read = [&](const nlohmann::json& t, std::vector<double>& out, const char* name) {
    if (!t.is_array() || t.size() != static_cast<std::size_t>(mdp.states)) {
      throw ParseError(std::string("MDP ") + name + " must have one entry per state");
    }
    for (const auto& ts : t) {
      if (!ts.is_array() || ts.size() != static_cast<std::size_t>(mdp.actions)) {
        throw ParseError(std::string("MDP ") + name + " must have one row per action");
      }
      for (const auto& row : ts) {
        const auto v = row.get<std::vector<double>>();
        if (v.size() != static_cast<std::size_t>(mdp.states)) {
          throw ParseError(std::string("MDP ") + name + " rows must have one entry per state");
        }
        out.insert(out.end(), v.begin(), v.end());
      }
    }
  };
  read(j.at("transition"), mdp.transition, "transition");
  read(j.at("reward"), mdp.reward, "reward");
  mdp.validate();
}

nlohmann::json policy_to_json(const Policy& pi) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index s = 0; s < pi.rows(); ++s) {
    rows.push_back(std::vector<double>(pi.row(s).data(), pi.row(s).data() + pi.cols()));
  }
  return rows;
}

Policy policy_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw ParseError("policy must be a non-empty array of rows");
  const auto cols = j.front().size();
  Policy pi(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t s = 0; s < j.size(); ++s) {
    const auto row = j[s].get<std::vector<double>>();
    if (row.size() != cols) throw ParseError("policy rows differ in length");
    for (std::size_t b = 0; b < cols; ++b) {
      pi(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(b)) = row[b];
    }
  }
  return pi;
}

TabularMdp load_mdp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open MDP file '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in).get<TabularMdp>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("invalid MDP file '" + path.string() + "': " + e.what());
  }
}

void save_mdp(const std::filesystem::path& path, const TabularMdp& mdp) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
  out << nlohmann::json(mdp).dump(2) << "\n";
}

void save_ope_dataset(const std::filesystem::path& path, const OpeDataset& ds) {
  ds.validate();
  const nlohmann::json meta{{"schema", "mfldiv-ope"},
                            {"version", kOpeSchemaVersion},
                            {"states", ds.states},
                            {"actions", ds.actions},
                            {"seed", ds.seed},
                            {"episode_length", ds.episode_length},
                            {"tuples", ds.size()},
                            {"target", policy_to_json(ds.target)}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
  out << "#meta:" << meta.dump() << "\r\n";
  write_csv_row(out, std::vector<std::string>{"s", "b", "r", "s_next", "b_next"});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_csv_row(out, std::vector<std::string>{std::to_string(ds.s[i]), std::to_string(ds.b[i]),
                                                format_double(ds.r[i]),
                                                std::to_string(ds.s_next[i]),
                                                std::to_string(ds.b_next[i])});
  }
  if (!out) throw ParseError("write failed for '" + path.string() + "'");
}

OpeDataset load_ope_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open OPE dataset '" + path.string() + "'");
  std::string first;
  std::getline(in, first);
  if (!first.empty() && first.back() == '\r') first.pop_back();
  const std::string prefix = "#meta:";
  if (first.rfind(prefix, 0) != 0) throw ParseError("OPE dataset is missing its #meta header line");
  OpeDataset ds;
  std::size_t tuples = 0;
  try {
    const auto meta = nlohmann::json::parse(first.substr(prefix.size()));
    if (meta.value("schema", "") != "mfldiv-ope") throw ParseError("not an OPE dataset file");
    if (meta.value("version", -1) != kOpeSchemaVersion) throw ParseError("unsupported OPE dataset version");
    ds.states = meta.at("states").get<int>();
    ds.actions = meta.at("actions").get<int>();
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.episode_length = meta.at("episode_length").get<int>();
    ds.target = policy_from_json(meta.at("target"));
    tuples = meta.at("tuples").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("OPE dataset meta header is invalid: ") + e.what());
  }
  const auto rows = parse_csv(in);
  if (rows.empty() || rows.front() != std::vector<std::string>{"s", "b", "r", "s_next", "b_next"}) {
    throw ParseError("OPE dataset has an unexpected column header");
  }
  auto to_int = [](const std::string& text) {
    const double v = parse_double(text);
    if (v != std::floor(v)) throw ParseError("expected an integer index, got '" + text + "'");
    return static_cast<int>(v);
  };
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& row = rows[i];
    if (row.size() != 5) throw ParseError("OPE dataset row " + std::to_string(i) + " has " +
                                          std::to_string(row.size()) + " fields");
    ds.s.push_back(to_int(row[0]));
    ds.b.push_back(to_int(row[1]));
    ds.r.push_back(parse_double(row[2]));
    ds.s_next.push_back(to_int(row[3]));
    ds.b_next.push_back(to_int(row[4]));
  }
  if (ds.size() != tuples) {
    throw ParseError("OPE dataset is truncated: expected " + std::to_string(tuples) + " tuples, found " +
                     std::to_string(ds.size()));
  }
  ds.validate();
  return ds;
}

}  // namespace mfldiv
