#include "mfldiv/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mfldiv/csv.hpp"
#include "mfldiv/errors.hpp"

namespace mfldiv {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known,
                    std::string_view where) {
  if (!j.is_object()) throw ParseError(std::string(where) + " must be a table");
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) {
      throw ParseError("unknown key '" + key + "' in " + std::string(where));
    }
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(std::string("key '") + key + "' has the wrong type");
  }
}

void read_activation(const nlohmann::json& j, Activation& out) {
  if (!j.contains("activation")) return;
  try {
    out = activation_from_string(j.at("activation").get<std::string>());
  } catch (const ContractError& e) {
    throw ParseError(e.what());
  }
}

nlohmann::json matrix_json(const RowMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return rows;
}

Eigen::MatrixXd dense_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParseError("expected a matrix");
  const std::size_t cols = j.empty() ? 0 : j.front().size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto row = j[i].get<std::vector<double>>();
    if (row.size() != cols) throw ParseError("ragged matrix in checkpoint");
    for (std::size_t c = 0; c < cols; ++c) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
    }
  }
  return m;
}

nlohmann::json container(std::string_view kind, const nlohmann::json& config,
                         const nlohmann::json& task, nlohmann::json model) {
  return nlohmann::json{{"schema", "mfldiv-checkpoint"},
                        {"version", kCheckpointVersion},
                        {"kind", std::string(kind)},
                        {"config", config},
                        {"config_hash", config_hash(config)},
                        {"task", task},
                        {"model", std::move(model)}};
}

void expect_kind(const nlohmann::json& doc, std::initializer_list<std::string_view> kinds) {
  const auto kind = doc.at("kind").get<std::string>();
  for (auto k : kinds) {
    if (kind == k) return;
  }
  throw ParseError("checkpoint kind '" + kind + "' does not hold the requested model");
}

}  // namespace

nlohmann::json to_json(const RegParams& reg) {
  return {{"zeta1", reg.zeta1}, {"zeta2", reg.zeta2}, {"sigma1", reg.sigma1},
          {"sigma2", reg.sigma2}, {"lambda", reg.lambda}};
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"reg", to_json(cfg.reg)},
          {"alpha", cfg.alpha},
          {"beta", cfg.beta},
          {"gamma", cfg.gamma},
          {"inner_steps", cfg.inner_steps},
          {"outer_steps", cfg.outer_steps},
          {"n_x", cfg.n_x},
          {"n_z", cfg.n_z},
          {"batch_size", cfg.batch_size},
          {"warm_start", cfg.warm_start},
          {"seed", cfg.seed},
          {"clip_bound", cfg.clip_bound},
          {"activation", std::string(to_string(cfg.activation))},
          {"monitor_rows", cfg.monitor_rows},
          {"divergence_norm", cfg.divergence_norm}};
}

nlohmann::json to_json(const DfivConfig& cfg) {
  return {{"feature_dim", cfg.feature_dim},
          {"bank_width", cfg.bank_width},
          {"clip_bound", cfg.clip_bound},
          {"activation", std::string(to_string(cfg.activation))},
          {"zeta1", cfg.zeta1},
          {"zeta2", cfg.zeta2},
          {"steps", cfg.steps},
          {"lr", cfg.lr},
          {"batch_size", cfg.batch_size},
          {"seed", cfg.seed},
          {"divergence_norm", cfg.divergence_norm}};
}

RegParams reg_params_from_json(const nlohmann::json& j, RegParams base) {
  reject_unknown(j, {"zeta1", "zeta2", "sigma1", "sigma2", "lambda"}, "reg");
  read_opt(j, "zeta1", base.zeta1);
  read_opt(j, "zeta2", base.zeta2);
  read_opt(j, "sigma1", base.sigma1);
  read_opt(j, "sigma2", base.sigma2);
  read_opt(j, "lambda", base.lambda);
  return base;
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base) {
  reject_unknown(j,
                 {"reg", "alpha", "beta", "gamma", "inner_steps", "outer_steps", "n_x", "n_z",
                  "batch_size", "warm_start", "seed", "clip_bound", "activation", "monitor_rows",
                  "divergence_norm"},
                 "train config");
  if (j.contains("reg")) base.reg = reg_params_from_json(j.at("reg"), base.reg);
  read_opt(j, "alpha", base.alpha);
  read_opt(j, "beta", base.beta);
  read_opt(j, "gamma", base.gamma);
  read_opt(j, "inner_steps", base.inner_steps);
  read_opt(j, "outer_steps", base.outer_steps);
  read_opt(j, "n_x", base.n_x);
  read_opt(j, "n_z", base.n_z);
  read_opt(j, "batch_size", base.batch_size);
  read_opt(j, "warm_start", base.warm_start);
  read_opt(j, "seed", base.seed);
  read_opt(j, "clip_bound", base.clip_bound);
  read_activation(j, base.activation);
  read_opt(j, "monitor_rows", base.monitor_rows);
  read_opt(j, "divergence_norm", base.divergence_norm);
  return base;
}

DfivConfig dfiv_config_from_json(const nlohmann::json& j, DfivConfig base) {
  reject_unknown(j,
                 {"feature_dim", "bank_width", "clip_bound", "activation", "zeta1", "zeta2",
                  "steps", "lr", "batch_size", "seed", "divergence_norm"},
                 "dfiv config");
  read_opt(j, "feature_dim", base.feature_dim);
  read_opt(j, "bank_width", base.bank_width);
  read_opt(j, "clip_bound", base.clip_bound);
  read_activation(j, base.activation);
  read_opt(j, "zeta1", base.zeta1);
  read_opt(j, "zeta2", base.zeta2);
  read_opt(j, "steps", base.steps);
  read_opt(j, "lr", base.lr);
  read_opt(j, "batch_size", base.batch_size);
  read_opt(j, "seed", base.seed);
  read_opt(j, "divergence_norm", base.divergence_norm);
  return base;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json ensemble_to_json(const ParticleEnsemble& ens) {
  const NeuronSpec& spec = ens.spec();
  return {{"input_dim", spec.input_dim},
          {"clip_bound", spec.clip_bound},
          {"activation", std::string(to_string(spec.activation))},
          {"particles", matrix_json(ens.particles())}};
}

ParticleEnsemble ensemble_from_json(const nlohmann::json& j) {
  try {
    const NeuronSpec spec{j.at("input_dim").get<int>(), j.at("clip_bound").get<double>(),
                          activation_from_string(j.at("activation").get<std::string>())};
    const Eigen::MatrixXd p = dense_from_json(j.at("particles"));
    if (p.cols() != spec.param_dim()) throw ParseError("particle width does not match the neuron spec");
    return ParticleEnsemble(spec, RowMatrix(p));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid ensemble in checkpoint: ") + e.what());
  } catch (const ContractError& e) {
    throw ParseError(std::string("invalid ensemble in checkpoint: ") + e.what());
  }
}

nlohmann::json f2bmld_checkpoint(const TrainedModel& model, const nlohmann::json& task) {
  nlohmann::json body{{"x", ensemble_to_json(model.x)},
                      {"z_star", ensemble_to_json(model.inner.z_star)},
                      {"tilde_z", ensemble_to_json(model.inner.tilde_z)},
                      {"form", {{"direct", model.form.direct}, {"projected", model.form.projected}}}};
  return container("f2bmld", to_json(model.config), task, std::move(body));
}

nlohmann::json two_stage_checkpoint(std::string_view kind, const TwoStageModel& model,
                                    const nlohmann::json& config, const nlohmann::json& task) {
  MFLDIV_REQUIRE(kind == "fixed2sls" || kind == "dfiv", "two-stage kind must be fixed2sls or dfiv");
  const Eigen::VectorXd& u = model.heads.u;
  nlohmann::json body{{"psi", model.psi.to_json()},
                      {"phi", model.phi.to_json()},
                      {"v", matrix_json(RowMatrix(model.heads.v))},
                      {"u", std::vector<double>(u.data(), u.data() + u.size())},
                      {"zeta1", model.heads.zeta1},
                      {"zeta2", model.heads.zeta2}};
  return container(kind, config, task, std::move(body));
}

nlohmann::json q_table_checkpoint(const Eigen::VectorXd& q, int states, int actions,
                                  const nlohmann::json& task) {
  MFLDIV_REQUIRE(q.size() == states * actions, "Q table has the wrong size");
  const nlohmann::json config{{"states", states}, {"actions", actions}};
  nlohmann::json body{{"states", states},
                      {"actions", actions},
                      {"q", std::vector<double>(q.data(), q.data() + q.size())}};
  return container("q_table", config, task, std::move(body));
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
  out << doc.dump(1) << "\n";
  if (!out) throw ParseError("write failed for '" + path.string() + "'");
}

nlohmann::json parse_checkpoint(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || doc.value("schema", "") != "mfldiv-checkpoint") {
    throw ParseError("not a checkpoint file");
  }
  if (doc.value("version", -1) != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + doc.value("version", nlohmann::json()).dump());
  }
  const auto kind = doc.value("kind", "");
  if (kind != "f2bmld" && kind != "fixed2sls" && kind != "dfiv" && kind != "q_table") {
    throw ParseError("unknown checkpoint kind '" + kind + "'");
  }
  if (!doc.contains("model") || !doc.contains("config")) throw ParseError("checkpoint is incomplete");
  if (doc.value("config_hash", "") != config_hash(doc.at("config"))) {
    throw ParseError("checkpoint config hash does not match its config");
  }
  return doc;
}

nlohmann::json load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str());
}

TrainedModel f2bmld_from_checkpoint(const nlohmann::json& doc) {
  expect_kind(doc, {"f2bmld"});
  const auto& m = doc.at("model");
  try {
    TrainedModel out{ensemble_from_json(m.at("x")),
                     {ensemble_from_json(m.at("z_star")), ensemble_from_json(m.at("tilde_z"))},
                     {},
                     train_config_from_json(doc.at("config")),
                     StageTwoForm{m.at("form").at("direct").get<double>(),
                                  m.at("form").at("projected").get<double>()}};
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid f2bmld checkpoint: ") + e.what());
  }
}

TwoStageModel two_stage_from_checkpoint(const nlohmann::json& doc) {
  expect_kind(doc, {"fixed2sls", "dfiv"});
  const auto& m = doc.at("model");
  try {
    TwoStageModel out{FeatureMap::from_json(m.at("psi")), FeatureMap::from_json(m.at("phi")), {}};
    out.heads.v = dense_from_json(m.at("v"));
    const auto u = m.at("u").get<std::vector<double>>();
    out.heads.u = Eigen::Map<const Eigen::VectorXd>(u.data(), static_cast<Eigen::Index>(u.size()));
    out.heads.zeta1 = m.at("zeta1").get<double>();
    out.heads.zeta2 = m.at("zeta2").get<double>();
    if (out.heads.u.size() != out.psi.output_dim()) throw ParseError("stage-II weights do not match psi");
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid two-stage checkpoint: ") + e.what());
  }
}

Eigen::VectorXd q_table_from_checkpoint(const nlohmann::json& doc) {
  expect_kind(doc, {"q_table"});
  const auto& m = doc.at("model");
  const auto q = m.at("q").get<std::vector<double>>();
  if (static_cast<int>(q.size()) != m.at("states").get<int>() * m.at("actions").get<int>()) {
    throw ParseError("Q table size does not match states x actions");
  }
  return Eigen::Map<const Eigen::VectorXd>(q.data(), static_cast<Eigen::Index>(q.size()));
}

void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& trace) {
  const bool has_value = !trace.empty() && trace.front().value.has_value();
  std::vector<std::string> header{"iter", "f1", "f2", "gap", "lagrangian", "mean_norm_x", "wall_ms"};
  if (has_value) header.push_back("value");
  write_csv_row(out, header);
  for (const auto& r : trace) {
    std::vector<std::string> row{std::to_string(r.iter), format_double(r.f1),
                                 format_double(r.f2),     format_double(r.gap),
                                 format_double(r.lagrangian), format_double(r.mean_norm_x),
                                 format_double(r.wall_ms)};
    if (has_value) row.push_back(r.value ? format_double(*r.value) : "");
    write_csv_row(out, row);
  }
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRecord>& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
  write_trace_csv(out, trace);
  if (!out) throw ParseError("write failed for '" + path.string() + "'");
}

std::vector<TraceRecord> read_trace_csv(std::istream& in) {
  const auto rows = parse_csv(in);
  if (rows.empty()) throw ParseError("trace CSV is empty");
  const auto& header = rows.front();
  const bool has_value = header.size() == 8;
  if (header.size() != 7 && !has_value) throw ParseError("trace CSV has an unexpected header");
  std::vector<TraceRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != header.size()) throw ParseError("trace row " + std::to_string(i) + " is ragged");
    TraceRecord rec;
    rec.iter = static_cast<int>(parse_double(r[0]));
    rec.f1 = parse_double(r[1]);
    rec.f2 = parse_double(r[2]);
    rec.gap = parse_double(r[3]);
    rec.lagrangian = parse_double(r[4]);
    rec.mean_norm_x = parse_double(r[5]);
    rec.wall_ms = parse_double(r[6]);
    if (has_value && !r[7].empty()) rec.value = parse_double(r[7]);
    out.push_back(rec);
  }
  return out;
}

void write_dfiv_trace_csv(const std::filesystem::path& path,
                          const std::vector<DfivTraceRecord>& trace) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
  const bool has_value = !trace.empty() && trace.front().value.has_value();
  std::vector<std::string> header{"iter", "stage1_loss", "stage2_loss"};
  if (has_value) header.push_back("value");
  write_csv_row(out, header);
  for (const auto& r : trace) {
    std::vector<std::string> row{std::to_string(r.iter), format_double(r.stage1_loss),
                                 format_double(r.stage2_loss)};
    if (has_value) row.push_back(r.value ? format_double(*r.value) : "");
    write_csv_row(out, row);
  }
  if (!out) throw ParseError("write failed for '" + path.string() + "'");
}

}  // namespace mfldiv
