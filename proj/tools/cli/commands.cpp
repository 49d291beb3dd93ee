#include "commands.hpp"

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "manifest.hpp"
#include "mfldiv/baselines.hpp"
#include "mfldiv/checkpoint.hpp"
#include "mfldiv/csv.hpp"
#include "mfldiv/errors.hpp"
#include "mfldiv/f2bmld.hpp"
#include "mfldiv/npiv_data.hpp"
#include "mfldiv/ope.hpp"
#include "toml_lite.hpp"

namespace mfldiv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view exit_code_name(ExitCode code) {
  switch (code) {
    case ExitCode::kOk:
      return "ok";
    case ExitCode::kUsage:
      return "usage";
    case ExitCode::kInvalidConfig:
      return "invalid_config";
    case ExitCode::kMissingFile:
      return "missing_file";
    case ExitCode::kInvalidInput:
      return "invalid_input";
    case ExitCode::kNumerical:
      return "numerical_failure";
    case ExitCode::kIo:
      return "io_error";
    case ExitCode::kInternal:
      return "internal";
  }
  return "internal";
}

namespace {

struct CliError : std::runtime_error {
  CliError(ExitCode c, const std::string& msg) : std::runtime_error(msg), code(c) {}
  ExitCode code;
};

// Runs `fn`, reclassifying library exceptions under `code`.
template <typename Fn>
auto classified(ExitCode code, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const CliError&) {
    throw;
  } catch (const NumericalError& e) {
    throw CliError(ExitCode::kNumerical, e.what());
  } catch (const ParseError& e) {
    throw CliError(code, e.what());
  } catch (const ContractError& e) {
    throw CliError(code, e.what());
  } catch (const nlohmann::json::exception& e) {
    throw CliError(code, e.what());
  }
}

void require_file(const std::string& path, std::string_view what) {
  if (path.empty()) throw CliError(ExitCode::kUsage, std::string(what) + " path is required");
  if (!fs::exists(path)) {
    throw CliError(ExitCode::kMissingFile, std::string(what) + " '" + path + "' does not exist");
  }
}

fs::path prepare_out_dir(const std::string& out) {
  if (out.empty()) throw CliError(ExitCode::kUsage, "--out is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw CliError(ExitCode::kIo, "cannot create '" + out + "': " + ec.message());
  return fs::path(out);
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream f(path);
  if (!f) throw CliError(ExitCode::kIo, "cannot write '" + path.string() + "'");
  f << doc.dump(2) << "\n";
  if (!f) throw CliError(ExitCode::kIo, "write failed for '" + path.string() + "'");
}

template <typename Fn>
void io(Fn&& fn) {
  classified(ExitCode::kIo, std::forward<Fn>(fn));
}

std::vector<double> parse_list(const std::string& text, std::string_view flag) {
  std::vector<double> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(parse_double(item));
    } catch (const ParseError&) {
      throw CliError(ExitCode::kUsage, "--" + std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  return out;
}

// ---- configuration ----------------------------------------------------------

const std::set<std::string> kSections{"train", "data", "fixed2sls", "dfiv", "ope"};

struct FixedFeatures {
  int features = 64;
  double scale = 1.0;
  double zeta1 = 1e-3;
  double zeta2 = 1e-3;
  std::uint64_t feature_seed = 0;
};

struct OpeSettings {
  int states = 5;
  double slip = 0.2;
  double discount = 0.9;
  double reward_scale = 0.1;
  int tuples = 10000;
  int episode_length = 20;
  int target_action = 1;
  double target_prob = 0.9;
  std::uint64_t data_seed = 0;
};

struct DataSettings {
  StructuralSpec spec;
  Eigen::Index m = 2000;
  Eigen::Index n = 2000;
  std::uint64_t seed = 0;
};

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("key '") + key + "' has the wrong type");
  }
}

void only_keys(const json& j, const std::set<std::string>& keys, std::string_view section) {
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw ParseError("unknown key '" + k + "' in [" + std::string(section) + "]");
  }
}

struct Config {
  std::string path;
  json raw = json::object();
  TrainConfig train;
  DfivConfig dfiv;
  FixedFeatures fixed;
  OpeSettings ope;
  DataSettings data;

  json section(const char* name) const { return raw.contains(name) ? raw.at(name) : json::object(); }
};

Config load_config(const std::string& path) {
  Config cfg;
  cfg.path = path;
  if (!path.empty()) {
    require_file(path, "config");
    std::ifstream f(path);
    std::stringstream buf;
    buf << f.rdbuf();
    cfg.raw = classified(ExitCode::kInvalidConfig, [&] {
      return path.ends_with(".json") ? json::parse(buf.str()) : parse_toml(buf.str());
    });
  }
  classified(ExitCode::kInvalidConfig, [&] {
    for (const auto& [k, v] : cfg.raw.items()) {
      if (!kSections.contains(k)) throw ParseError("unknown config section [" + k + "]");
      if (!v.is_object()) throw ParseError("[" + k + "] must be a table");
    }
    cfg.train = train_config_from_json(cfg.section("train"));
    cfg.dfiv = dfiv_config_from_json(cfg.section("dfiv"));

    const json fx = cfg.section("fixed2sls");
    only_keys(fx, {"features", "scale", "zeta1", "zeta2", "feature_seed"}, "fixed2sls");
    take(fx, "features", cfg.fixed.features);
    take(fx, "scale", cfg.fixed.scale);
    take(fx, "zeta1", cfg.fixed.zeta1);
    take(fx, "zeta2", cfg.fixed.zeta2);
    take(fx, "feature_seed", cfg.fixed.feature_seed);

    const json op = cfg.section("ope");
    only_keys(op,
              {"states", "slip", "discount", "reward_scale", "tuples", "episode_length",
               "target_action", "target_prob", "data_seed"},
              "ope");
    take(op, "states", cfg.ope.states);
    take(op, "slip", cfg.ope.slip);
    take(op, "discount", cfg.ope.discount);
    take(op, "reward_scale", cfg.ope.reward_scale);
    take(op, "tuples", cfg.ope.tuples);
    take(op, "episode_length", cfg.ope.episode_length);
    take(op, "target_action", cfg.ope.target_action);
    take(op, "target_prob", cfg.ope.target_prob);
    take(op, "data_seed", cfg.ope.data_seed);

    json dt = cfg.section("data");
    only_keys(dt,
              {"function", "m", "n", "seed", "instrument_range", "confounder_var",
               "treatment_noise_var", "outcome_noise_var"},
              "data");
    take(dt, "m", cfg.data.m);
    take(dt, "n", cfg.data.n);
    take(dt, "seed", cfg.data.seed);
    json spec_json = cfg.data.spec;
    for (const char* k : {"function", "instrument_range", "confounder_var", "treatment_noise_var",
                          "outcome_noise_var"}) {
      if (dt.contains(k)) spec_json[k] = dt.at(k);
    }
    cfg.data.spec = spec_json.get<StructuralSpec>();
    return 0;
  });
  return cfg;
}

json data_json(const DataSettings& d) {
  json j = d.spec;
  j["m"] = d.m;
  j["n"] = d.n;
  j["seed"] = d.seed;
  return j;
}

json ope_json(const OpeSettings& o) {
  return {{"states", o.states},       {"slip", o.slip},
          {"discount", o.discount},   {"reward_scale", o.reward_scale},
          {"tuples", o.tuples},       {"episode_length", o.episode_length},
          {"target_action", o.target_action}, {"target_prob", o.target_prob},
          {"data_seed", o.data_seed}};
}

json fixed_json(const FixedFeatures& f) {
  return {{"features", f.features}, {"scale", f.scale}, {"zeta1", f.zeta1},
          {"zeta2", f.zeta2}, {"feature_seed", f.feature_seed}};
}

// ---- shared command plumbing ------------------------------------------------

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
  bool cold_start = false;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "TOML (or .json) config file");
  cmd->add_option("--seed", c.seed, "Master seed; overrides the config");
  cmd->add_option("--out", c.out, "Output path");
  cmd->add_option("--jobs", c.jobs, "Worker threads (sweep: concurrent cells)")->check(CLI::PositiveNumber);
  cmd->add_flag("--cold-start", c.cold_start, "Re-initialize inner ensembles every outer step");
  cmd->add_flag("--dry-run", c.dry_run, "Validate inputs and config, write nothing");
}

void apply_common(Config& cfg, const Common& c) {
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.dfiv.seed = *c.seed;
  }
  if (c.cold_start) cfg.train.warm_start = false;
  cfg.train.threads = c.jobs;
  cfg.dfiv.threads = c.jobs;
}

struct LoadedData {
  NpivDataset ds;
  json source;
};

LoadedData npiv_input(const std::string& data_path, const Config& cfg, bool generate_ok) {
  if (!data_path.empty()) {
    require_file(data_path, "dataset");
    LoadedData out{classified(ExitCode::kInvalidInput, [&] { return load_dataset(data_path); }),
                   {{"data", data_path}}};
    return out;
  }
  if (!generate_ok) throw CliError(ExitCode::kUsage, "--data is required");
  LoadedData out{classified(ExitCode::kInvalidConfig,
                            [&] {
                              return generate_npiv(cfg.data.spec, cfg.data.m, cfg.data.n,
                                                   cfg.data.seed);
                            }),
                 {{"generated", data_json(cfg.data)}}};
  return out;
}

json npiv_model_metrics(const std::function<double(double)>& h_hat, const NpivDataset& ds) {
  json m = json::object();
  if (ds.meta.spec && ds.treatment_dim() == 1) {
    const StructuralSpec& spec = *ds.meta.spec;
    const auto grid = instrument_grid(spec);
    m["projected_risk"] = projected_risk(h_hat, spec, grid);
    m["l2_risk"] = treatment_l2_risk(h_hat, spec);
  }
  return m;
}

json terminal_json(const TerminalMetrics& t) {
  return {{"f1", t.f1}, {"f2", t.f2}, {"gap", t.gap}, {"lagrangian", t.lagrangian},
          {"stage2_risk", t.stage2_risk}};
}

RunManifest start_manifest(std::string command, const std::vector<std::string>& args,
                           const Config& cfg, const json& resolved, std::string hash,
                           const std::string& out) {
  RunManifest m;
  m.command = std::move(command);
  m.argv = args;
  m.config_path = cfg.path;
  m.config = resolved;
  m.config_hash = std::move(hash);
  m.out_dir = out;
  m.started_at = utc_timestamp();
  return m;
}

void finish_manifest(RunManifest& m, const fs::path& dir) {
  m.finished_at = utc_timestamp();
  io([&] {
    m.write(dir);
    return 0;
  });
}

void validate_train(const TrainConfig& t) {
  classified(ExitCode::kInvalidConfig, [&] {
    t.validate();
    return 0;
  });
}

// ---- generate ---------------------------------------------------------------

struct GenerateArgs {
  Common common;
  std::string kind = "npiv";
  std::string function;
  std::optional<Eigen::Index> m, n;
  std::string mdp;
};

OpeSettings checked_ope(const OpeSettings& o) {
  if (o.tuples < 1) throw ParseError("ope.tuples must be positive");
  if (o.episode_length < 1) throw ParseError("ope.episode_length must be positive");
  return o;
}

TabularMdp mdp_input(const std::string& path, const OpeSettings& o) {
  if (!path.empty()) {
    require_file(path, "MDP");
    return classified(ExitCode::kInvalidInput, [&] { return load_mdp(path); });
  }
  return classified(ExitCode::kInvalidConfig,
                    [&] { return chain_mdp(o.states, o.slip, o.discount, o.reward_scale); });
}

Policy target_policy(const OpeSettings& o, const TabularMdp& mdp) {
  return classified(ExitCode::kInvalidConfig, [&] {
    return biased_policy(mdp.states, mdp.actions, o.target_action, o.target_prob);
  });
}

OpeDataset ope_data(const OpeSettings& o, const TabularMdp& mdp) {
  const Policy target = target_policy(o, mdp);
  return classified(ExitCode::kInvalidConfig, [&] {
    checked_ope(o);
    return build_ope_dataset(mdp, uniform_policy(mdp.states, mdp.actions), target,
                             static_cast<std::size_t>(o.tuples), o.data_seed, o.episode_length);
  });
}

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  Config cfg = load_config(a.common.config);
  if (a.common.seed) {
    cfg.data.seed = *a.common.seed;
    cfg.ope.data_seed = *a.common.seed;
  }
  if (!a.function.empty()) {
    cfg.data.spec.function = classified(ExitCode::kUsage, [&] {
      return structural_function_from_string(a.function);
    });
  }
  if (a.m) cfg.data.m = *a.m;
  if (a.n) cfg.data.n = *a.n;

  if (a.kind == "npiv") {
    classified(ExitCode::kInvalidConfig, [&] {
      cfg.data.spec.validate();
      if (cfg.data.m < 1 || cfg.data.n < 1) throw ParseError("data.m and data.n must be positive");
      return 0;
    });
    if (a.common.dry_run) {
      out << json{{"ok", true}, {"kind", "npiv"}, {"data", data_json(cfg.data)}}.dump() << "\n";
      return 0;
    }
    if (a.common.out.empty()) throw CliError(ExitCode::kUsage, "--out is required");
    const auto ds = npiv_input("", cfg, true).ds;
    io([&] {
      save_dataset(a.common.out, ds);
      return 0;
    });
    spdlog::info("wrote NPIV dataset ({} + {} rows) to {}", ds.m(), ds.n(), a.common.out);
    return 0;
  }
  if (a.kind == "mdp") {
    const TabularMdp mdp = mdp_input("", cfg.ope);
    if (a.common.dry_run) {
      out << json{{"ok", true}, {"kind", "mdp"}}.dump() << "\n";
      return 0;
    }
    if (a.common.out.empty()) throw CliError(ExitCode::kUsage, "--out is required");
    io([&] {
      save_mdp(a.common.out, mdp);
      return 0;
    });
    return 0;
  }
  if (a.kind == "ope") {
    const TabularMdp mdp = mdp_input(a.mdp, cfg.ope);
    if (a.common.dry_run) {
      target_policy(cfg.ope, mdp);
      classified(ExitCode::kInvalidConfig, [&] { return checked_ope(cfg.ope); });
      out << json{{"ok", true}, {"kind", "ope"}}.dump() << "\n";
      return 0;
    }
    if (a.common.out.empty()) throw CliError(ExitCode::kUsage, "--out is required");
    const OpeDataset ds = ope_data(cfg.ope, mdp);
    io([&] {
      save_ope_dataset(a.common.out, ds);
      return 0;
    });
    return 0;
  }
  throw CliError(ExitCode::kUsage, "--kind must be npiv, mdp or ope");
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string data;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  Config cfg = load_config(a.common.config);
  apply_common(cfg, a.common);
  validate_train(cfg.train);
  const json resolved = to_json(cfg.train);
  const std::string hash = config_hash(resolved);
  if (a.common.dry_run) {
    if (!a.data.empty()) require_file(a.data, "dataset");
    classified(ExitCode::kInvalidConfig, [&] {
      cfg.data.spec.validate();
      return 0;
    });
    out << json{{"ok", true}, {"config_hash", hash}, {"config", resolved}}.dump() << "\n";
    return 0;
  }
  const fs::path dir = prepare_out_dir(a.common.out);
  RunManifest manifest = start_manifest("train", args, cfg, resolved, hash, a.common.out);
  const LoadedData input = npiv_input(a.data, cfg, true);
  manifest.inputs = input.source;
  spdlog::info("training F2BMLD: S={} T={} N_x={} N_z={} seed={}", cfg.train.outer_steps,
               cfg.train.inner_steps, cfg.train.n_x, cfg.train.n_z, cfg.train.seed);

  const BilevelData data = BilevelData::from_npiv(input.ds);
  const TrainedModel model = classified(ExitCode::kInvalidInput, [&] { return train(cfg.train, data); });

  json metrics = npiv_model_metrics([&](double x) { return predict(model, x); }, input.ds);
  metrics["terminal"] = terminal_json(terminal_metrics(model, data));
  metrics["config_hash"] = hash;
  io([&] {
    save_checkpoint(dir / "checkpoint.json", f2bmld_checkpoint(model, {{"type", "npiv"}}));
    write_trace_csv(dir / "trace.csv", model.trace);
    return 0;
  });
  write_json(dir / "metrics.json", metrics);
  manifest.artifacts = {{"checkpoint", "checkpoint.json"}, {"trace", "trace.csv"},
                        {"metrics", "metrics.json"}};
  finish_manifest(manifest, dir);
  out << metrics.dump() << "\n";
  return 0;
}

// ---- baseline ---------------------------------------------------------------

struct BaselineArgs {
  Common common;
  std::string kind;
  std::string data;
};

int cmd_baseline(const BaselineArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  Config cfg = load_config(a.common.config);
  apply_common(cfg, a.common);
  if (a.common.seed) cfg.fixed.feature_seed = *a.common.seed;
  json resolved;
  if (a.kind == "fixed2sls") {
    classified(ExitCode::kInvalidConfig, [&] {
      if (cfg.fixed.features < 1) throw ParseError("fixed2sls.features must be positive");
      if (!(cfg.fixed.scale > 0.0)) throw ParseError("fixed2sls.scale must be positive");
      if (!(cfg.fixed.zeta1 > 0.0 && cfg.fixed.zeta2 > 0.0)) {
        throw ParseError("fixed2sls regularizers must be positive");
      }
      return 0;
    });
    resolved = fixed_json(cfg.fixed);
  } else {
    classified(ExitCode::kInvalidConfig, [&] {
      cfg.dfiv.validate();
      return 0;
    });
    resolved = to_json(cfg.dfiv);
  }
  const std::string hash = config_hash(resolved);
  if (a.common.dry_run) {
    if (!a.data.empty()) require_file(a.data, "dataset");
    out << json{{"ok", true}, {"kind", a.kind}, {"config_hash", hash}}.dump() << "\n";
    return 0;
  }
  const fs::path dir = prepare_out_dir(a.common.out);
  RunManifest manifest = start_manifest("baseline " + a.kind, args, cfg, resolved, hash, a.common.out);
  const LoadedData input = npiv_input(a.data, cfg, true);
  manifest.inputs = input.source;
  const BilevelData data = BilevelData::from_npiv(input.ds);

  TwoStageModel model;
  std::vector<DfivTraceRecord> trace;
  if (a.kind == "fixed2sls") {
    model = classified(ExitCode::kInvalidInput, [&] {
      const auto psi = FeatureMap::random_tanh(data.treatment_dim(), cfg.fixed.features,
                                               cfg.fixed.feature_seed, cfg.fixed.scale);
      const auto phi = FeatureMap::random_tanh(data.instrument_dim(), cfg.fixed.features,
                                               cfg.fixed.feature_seed + 1, cfg.fixed.scale);
      return fixed_2sls(psi, phi, data, cfg.fixed.zeta1, cfg.fixed.zeta2);
    });
  } else {
    DfivModel trained = classified(ExitCode::kInvalidInput, [&] { return dfiv_train(cfg.dfiv, data); });
    model = std::move(trained.model);
    trace = std::move(trained.trace);
  }
  json metrics = npiv_model_metrics([&](double x) { return model.predict(x); }, input.ds);
  metrics["config_hash"] = hash;
  io([&] {
    save_checkpoint(dir / "checkpoint.json", two_stage_checkpoint(a.kind, model, resolved, {{"type", "npiv"}}));
    if (a.kind == "dfiv") write_dfiv_trace_csv(dir / "trace.csv", trace);
    return 0;
  });
  write_json(dir / "metrics.json", metrics);
  manifest.artifacts = {{"checkpoint", "checkpoint.json"}, {"metrics", "metrics.json"}};
  if (a.kind == "dfiv") manifest.artifacts["trace"] = "trace.csv";
  finish_manifest(manifest, dir);
  out << metrics.dump() << "\n";
  return 0;
}

// ---- ope --------------------------------------------------------------------

struct OpeArgs {
  Common common;
  std::string mdp;
  std::string data;
  std::string method = "f2bmld";
};

json ope_task(const TabularMdp& mdp, const Policy& target) {
  return {{"type", "ope"}, {"mdp", mdp}, {"target", policy_to_json(target)}};
}

int cmd_ope(const OpeArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  Config cfg = load_config(a.common.config);
  apply_common(cfg, a.common);
  if (a.common.seed) cfg.ope.data_seed = *a.common.seed;
  json resolved;
  if (a.method == "f2bmld") {
    validate_train(cfg.train);
    resolved = to_json(cfg.train);
  } else if (a.method == "dfiv") {
    classified(ExitCode::kInvalidConfig, [&] {
      cfg.dfiv.validate();
      return 0;
    });
    resolved = to_json(cfg.dfiv);
  } else if (a.method != "exact") {
    throw CliError(ExitCode::kUsage, "--method must be f2bmld, dfiv or exact");
  }
  const TabularMdp mdp = mdp_input(a.mdp, cfg.ope);
  classified(ExitCode::kInvalidConfig, [&] { return checked_ope(cfg.ope); });
  OpeDataset ds;
  if (!a.data.empty()) {
    require_file(a.data, "OPE dataset");
    ds = classified(ExitCode::kInvalidInput, [&] { return load_ope_dataset(a.data); });
  }
  const Policy target = a.data.empty() ? target_policy(cfg.ope, mdp) : ds.target;
  if (a.method == "exact") resolved = json{{"states", mdp.states}, {"actions", mdp.actions}};
  const std::string hash = config_hash(resolved);
  if (a.common.dry_run) {
    out << json{{"ok", true}, {"method", a.method}, {"config_hash", hash}}.dump() << "\n";
    return 0;
  }
  const fs::path dir = prepare_out_dir(a.common.out);
  json full = {{"method", resolved}, {"ope", ope_json(cfg.ope)}};
  RunManifest manifest = start_manifest("ope " + a.method, args, cfg, full, hash, a.common.out);
  manifest.inputs = {{"mdp", a.mdp.empty() ? json(mdp) : json(a.mdp)}};
  if (a.data.empty() && a.method != "exact") ds = ope_data(cfg.ope, mdp);
  if (!a.data.empty()) manifest.inputs["data"] = a.data;

  const Eigen::VectorXd q_exact = classified(ExitCode::kInvalidInput, [&] { return exact_q(mdp, target); });
  const double oracle = policy_value(q_exact, mdp, target);
  const json task = ope_task(mdp, target);
  json metrics{{"oracle_value", oracle}, {"config_hash", hash}};
  json checkpoint;
  if (a.method == "exact") {
    metrics["value"] = oracle;
    checkpoint = q_table_checkpoint(q_exact, mdp.states, mdp.actions, task);
  } else if (a.method == "f2bmld") {
    const TrainedModel model =
        classified(ExitCode::kInvalidInput, [&] { return f2bmld_ope_train(cfg.train, ds, mdp); });
    metrics["value"] = policy_value(q_function(model.x, mdp.states, mdp.actions), mdp, target);
    checkpoint = f2bmld_checkpoint(model, task);
    io([&] {
      write_trace_csv(dir / "trace.csv", model.trace);
      return 0;
    });
    manifest.artifacts["trace"] = "trace.csv";
  } else {
    const DfivModel model = classified(ExitCode::kInvalidInput, [&] { return dfiv_ope_train(cfg.dfiv, ds, mdp); });
    metrics["value"] = policy_value(q_function(model.model, mdp.states, mdp.actions), mdp, target);
    checkpoint = two_stage_checkpoint("dfiv", model.model, resolved, task);
    io([&] {
      write_dfiv_trace_csv(dir / "trace.csv", model.trace);
      return 0;
    });
    manifest.artifacts["trace"] = "trace.csv";
  }
  const double value = metrics["value"].get<double>();
  metrics["abs_error"] = std::abs(value - oracle);
  metrics["rel_error"] = oracle != 0.0 ? std::abs(value - oracle) / std::abs(oracle) : 0.0;
  io([&] {
    save_checkpoint(dir / "checkpoint.json", checkpoint);
    return 0;
  });
  write_json(dir / "metrics.json", metrics);
  manifest.artifacts["checkpoint"] = "checkpoint.json";
  manifest.artifacts["metrics"] = "metrics.json";
  finish_manifest(manifest, dir);
  out << metrics.dump() << "\n";
  return 0;
}

// ---- evaluate ---------------------------------------------------------------

struct EvaluateArgs {
  Common common;
  std::string checkpoint;
  std::string data;
  std::string function;
  std::string mdp;
};

int cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  const json doc = classified(ExitCode::kInvalidInput, [&] { return load_checkpoint(a.checkpoint); });
  const std::string kind = doc.at("kind").get<std::string>();
  const json task = doc.value("task", json::object());
  json metrics{{"kind", kind}, {"config_hash", doc.at("config_hash")}};

  if (task.value("type", "") == "ope") {
    TabularMdp mdp = !a.mdp.empty() ? mdp_input(a.mdp, {})
                                    : classified(ExitCode::kInvalidInput,
                                                 [&] { return task.at("mdp").get<TabularMdp>(); });
    const Policy target = classified(ExitCode::kInvalidInput, [&] { return policy_from_json(task.at("target")); });
    double value = 0.0;
    classified(ExitCode::kInvalidInput, [&] {
      if (kind == "q_table") {
        value = policy_value(q_table_from_checkpoint(doc), mdp, target);
      } else if (kind == "f2bmld") {
        const TrainedModel model = f2bmld_from_checkpoint(doc);
        value = policy_value(q_function(model.x, mdp.states, mdp.actions), mdp, target);
      } else {
        const TwoStageModel model = two_stage_from_checkpoint(doc);
        value = policy_value(q_function(model, mdp.states, mdp.actions), mdp, target);
      }
      return 0;
    });
    const double oracle = policy_value(exact_q(mdp, target), mdp, target);
    metrics["policy_value"] = value;
    metrics["oracle_value"] = oracle;
    metrics["abs_error"] = std::abs(value - oracle);
  } else {
    if (kind == "q_table") throw CliError(ExitCode::kInvalidInput, "Q-table checkpoints need an OPE task");
    std::optional<NpivDataset> ds;
    std::optional<StructuralSpec> spec;
    if (!a.data.empty()) {
      require_file(a.data, "dataset");
      ds = classified(ExitCode::kInvalidInput, [&] { return load_dataset(a.data); });
      spec = ds->meta.spec;
    }
    if (!a.function.empty()) {
      spec = StructuralSpec{};
      spec->function = classified(ExitCode::kUsage, [&] { return structural_function_from_string(a.function); });
    }
    std::function<double(double)> h_hat;
    std::optional<TrainedModel> f2;
    std::optional<TwoStageModel> ts;
    classified(ExitCode::kInvalidInput, [&] {
      if (kind == "f2bmld") {
        f2 = f2bmld_from_checkpoint(doc);
        h_hat = [&](double x) { return predict(*f2, x); };
      } else {
        ts = two_stage_from_checkpoint(doc);
        h_hat = [&](double x) { return ts->predict(x); };
      }
      return 0;
    });
    if (spec) {
      NpivDataset holder;
      holder.meta.spec = spec;
      holder.stage1_a.resize(0, 1);
      const json m = npiv_model_metrics(h_hat, holder);
      metrics.update(m);
    }
    if (ds && f2) {
      metrics["terminal"] = terminal_json(
          classified(ExitCode::kInvalidInput, [&] { return terminal_metrics(*f2, BilevelData::from_npiv(*ds)); }));
    }
  }
  if (!a.common.out.empty()) write_json(a.common.out, metrics);
  out << metrics.dump() << "\n";
  return 0;
}

// ---- sweep ------------------------------------------------------------------

struct SweepArgs {
  Common common;
  std::string data;
  std::string lambdas;
  std::string sigmas;
  int seeds = 1;
};

struct SweepCell {
  double lambda = 0.0;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  int seed_index = 0;
  TrainConfig cfg;
};

struct CellResult {
  std::vector<std::string> row;
  std::optional<CliError> error;
};

int cmd_sweep(const SweepArgs& a, const std::vector<std::string>& args, std::ostream& out) {
  Config cfg = load_config(a.common.config);
  apply_common(cfg, a.common);
  if (a.seeds < 1) throw CliError(ExitCode::kUsage, "--seeds must be positive");
  std::vector<double> lambdas = parse_list(a.lambdas, "lambda");
  std::vector<double> sigmas = parse_list(a.sigmas, "sigma");
  if (lambdas.empty()) lambdas.push_back(cfg.train.reg.lambda);
  const bool sweep_sigma = !sigmas.empty();
  if (!sweep_sigma) sigmas.push_back(cfg.train.reg.sigma1);

  std::vector<SweepCell> cells;
  for (double lam : lambdas) {
    for (double sig : sigmas) {
      for (int k = 0; k < a.seeds; ++k) {
        SweepCell c{lam, sig, cfg.train.seed + static_cast<std::uint64_t>(k), k, cfg.train};
        c.cfg.reg.lambda = lam;
        if (sweep_sigma) {
          c.cfg.reg.sigma1 = sig;
          c.cfg.reg.sigma2 = sig;
        }
        c.cfg.seed = c.seed;
        c.cfg.threads = 1;
        validate_train(c.cfg);
        cells.push_back(c);
      }
    }
  }
  if (a.common.dry_run) {
    out << json{{"ok", true}, {"cells", cells.size()}}.dump() << "\n";
    return 0;
  }
  const fs::path dir = prepare_out_dir(a.common.out);
  json resolved{{"train", to_json(cfg.train)}, {"lambda", lambdas}, {"sigma", sigmas}, {"seeds", a.seeds}};
  if (a.data.empty()) resolved["data"] = data_json(cfg.data);
  RunManifest manifest = start_manifest("sweep", args, cfg, resolved, config_hash(resolved), a.common.out);

  // One dataset per seed index, shared by every cell with that index.
  std::vector<NpivDataset> datasets;
  if (!a.data.empty()) {
    datasets.push_back(npiv_input(a.data, cfg, false).ds);
    manifest.inputs = {{"data", a.data}};
  } else {
    for (int k = 0; k < a.seeds; ++k) {
      Config per = cfg;
      per.data.seed = cfg.data.seed + static_cast<std::uint64_t>(k);
      datasets.push_back(npiv_input("", per, true).ds);
    }
    manifest.inputs = {{"generated", data_json(cfg.data)}, {"data_seed_stride", 1}};
  }

  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const SweepCell& c = cells[i];
      try {
        const NpivDataset& ds = datasets[a.data.empty() ? static_cast<std::size_t>(c.seed_index) : 0];
        const BilevelData data = BilevelData::from_npiv(ds);
        const TrainedModel model = classified(ExitCode::kInvalidInput, [&] { return train(c.cfg, data); });
        const TerminalMetrics t = terminal_metrics(model, data);
        const json m = npiv_model_metrics([&](double x) { return predict(model, x); }, ds);
        char name[32];
        std::snprintf(name, sizeof name, "cell_%04zu", i);
        const fs::path cell_dir = dir / name;
        const json cell_config = to_json(c.cfg);
        io([&] {
          fs::create_directories(cell_dir);
          save_checkpoint(cell_dir / "checkpoint.json", f2bmld_checkpoint(model, {{"type", "npiv"}}));
          write_trace_csv(cell_dir / "trace.csv", model.trace);
          return 0;
        });
        auto num = [&](const char* key) {
          return m.contains(key) ? format_double(m.at(key).get<double>()) : std::string();
        };
        results[i].row = {std::to_string(i),           format_double(c.lambda),
                          format_double(c.cfg.reg.sigma1), std::to_string(c.seed),
                          config_hash(cell_config),    num("projected_risk"),
                          num("l2_risk"),              format_double(t.gap),
                          format_double(t.stage2_risk), format_double(t.f1),
                          format_double(t.f2),         format_double(t.lagrangian)};
        spdlog::info("sweep cell {} done (lambda={}, sigma={}, seed={})", i, c.lambda,
                     c.cfg.reg.sigma1, c.seed);
      } catch (const CliError& e) {
        results[i].error = e;
      } catch (const std::exception& e) {
        results[i].error = CliError(ExitCode::kInternal, e.what());
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const int jobs = std::max(1, std::min<int>(a.common.jobs, static_cast<int>(cells.size())));
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  for (const auto& r : results) {
    if (r.error) throw *r.error;
  }
  io([&] {
    std::ofstream csv(dir / "sweep.csv", std::ios::binary);
    if (!csv) throw ParseError("cannot write sweep.csv");
    write_csv_row(csv, {"cell", "lambda", "sigma", "seed", "config_hash", "projected_risk", "l2_risk",
                        "gap", "stage2_risk", "f1", "f2", "lagrangian"});
    for (const auto& r : results) write_csv_row(csv, r.row);
    if (!csv) throw ParseError("write failed for sweep.csv");
    return 0;
  });
  manifest.artifacts = {{"table", "sweep.csv"}, {"cells", cells.size()}};
  finish_manifest(manifest, dir);
  out << json{{"ok", true}, {"cells", cells.size()}, {"table", (dir / "sweep.csv").string()}}.dump() << "\n";
  return 0;
}

void configure_logging(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto logger = std::make_shared<spdlog::logger>("mfldiv", sink);
  logger->set_pattern("[%Y-%m-%d %H:%M:%S] [%l] %v");
  spdlog::level::level_enum level = spdlog::level::info;
  if (const char* env = std::getenv("MFLDIV_LOG")) {
    level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; keep that but say so once.
    if (level == spdlog::level::off && std::string_view(env) != "off") {
      err << "MFLDIV_LOG='" << env << "' is not a level; logging disabled\n";
    }
  }
  logger->set_level(level);
  spdlog::set_default_logger(logger);
}

void report(std::ostream& err, ExitCode code, const std::string& message) {
  err << json{{"error", {{"code", exit_code_name(code)}, {"exit_code", static_cast<int>(code)},
                         {"message", message}}}}
             .dump()
      << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  configure_logging(err);
  CLI::App app{"Mean-field Langevin bilevel IV regression"};
  app.set_help_all_flag("--help-all");
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write an NPIV dataset, a chain MDP, or an OPE dataset");
  add_common(g, gen.common);
  g->add_option("--kind", gen.kind, "npiv | mdp | ope")->check(CLI::IsMember({"npiv", "mdp", "ope"}));
  g->add_option("--function", gen.function, "Structural function: abs | sin | linear");
  g->add_option("--m", gen.m, "Stage-I rows");
  g->add_option("--n", gen.n, "Stage-II rows");
  g->add_option("--mdp", gen.mdp, "MDP JSON (for --kind ope)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train F2BMLD on an NPIV dataset");
  add_common(t, tr.common);
  t->add_option("--data", tr.data, "Dataset CSV; generated from [data] when omitted");

  BaselineArgs bl;
  auto* b = app.add_subcommand("baseline", "Fit a fixed-feature 2SLS or DFIV baseline");
  add_common(b, bl.common);
  b->add_option("kind", bl.kind, "fixed2sls | dfiv")->required()->check(CLI::IsMember({"fixed2sls", "dfiv"}));
  b->add_option("--data", bl.data, "Dataset CSV; generated from [data] when omitted");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Metrics for a checkpoint");
  add_common(e, ev.common);
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint JSON")->required();
  e->add_option("--data", ev.data, "NPIV dataset CSV (ground truth and terminal objectives)");
  e->add_option("--function", ev.function, "Structural function for the default design");
  e->add_option("--mdp", ev.mdp, "MDP JSON overriding the one stored in the checkpoint");

  OpeArgs op;
  auto* o = app.add_subcommand("ope", "Off-policy evaluation on a tabular MDP");
  add_common(o, op.common);
  o->add_option("--mdp", op.mdp, "MDP JSON; a chain from [ope] when omitted");
  o->add_option("--data", op.data, "OPE dataset CSV; built from [ope] when omitted");
  o->add_option("--method", op.method, "f2bmld | dfiv | exact")->check(CLI::IsMember({"f2bmld", "dfiv", "exact"}));

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Grid over lambda, sigma and seeds");
  add_common(s, sw.common);
  s->add_option("--data", sw.data, "Shared dataset CSV; per-seed data from [data] when omitted");
  s->add_option("--lambda", sw.lambdas, "Comma-separated lambda values");
  s->add_option("--sigma", sw.sigmas, "Comma-separated sigma1 = sigma2 values");
  s->add_option("--seeds", sw.seeds, "Number of seeds (base seed from --seed or the config)");

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    report(err, ExitCode::kUsage, ex.what());
    return static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (g->parsed()) return cmd_generate(gen, out);
    if (t->parsed()) return cmd_train(tr, args, out);
    if (b->parsed()) return cmd_baseline(bl, args, out);
    if (e->parsed()) return cmd_evaluate(ev, out);
    if (o->parsed()) return cmd_ope(op, args, out);
    if (s->parsed()) return cmd_sweep(sw, args, out);
  } catch (const CliError& ex) {
    report(err, ex.code, ex.what());
    return static_cast<int>(ex.code);
  } catch (const NumericalError& ex) {
    report(err, ExitCode::kNumerical, ex.what());
    return static_cast<int>(ExitCode::kNumerical);
  } catch (const std::exception& ex) {
    report(err, ExitCode::kInternal, ex.what());
    return static_cast<int>(ExitCode::kInternal);
  }
  report(err, ExitCode::kUsage, "no subcommand");
  return static_cast<int>(ExitCode::kUsage);
}

}  // namespace mfldiv::cli
