#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "mfldiv/baselines.hpp"
#include "mfldiv/f2bmld.hpp"

namespace mfldiv {

inline constexpr int kCheckpointVersion = 1;

// Config <-> JSON. Parsing rejects unknown keys; `threads` is a runtime knob and
// is never serialized, so it cannot change a config hash.
nlohmann::json to_json(const RegParams& reg);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const DfivConfig& cfg);
RegParams reg_params_from_json(const nlohmann::json& j, RegParams base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
DfivConfig dfiv_config_from_json(const nlohmann::json& j, DfivConfig base = {});

// 64-bit FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

nlohmann::json ensemble_to_json(const ParticleEnsemble& ens);
ParticleEnsemble ensemble_from_json(const nlohmann::json& j);

// Checkpoint documents share one container:
//   {schema, version, kind, config, config_hash, task, model}
// with kind one of "f2bmld", "fixed2sls", "dfiv", "q_table". `task` describes
// the problem ({"type": "npiv"} or {"type": "ope", "states", "actions", ...}).
nlohmann::json f2bmld_checkpoint(const TrainedModel& model, const nlohmann::json& task);
nlohmann::json two_stage_checkpoint(std::string_view kind, const TwoStageModel& model,
                                    const nlohmann::json& config, const nlohmann::json& task);
nlohmann::json q_table_checkpoint(const Eigen::VectorXd& q, int states, int actions,
                                  const nlohmann::json& task);

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& doc);
// Checks schema, version and kind; throws ParseError.
nlohmann::json load_checkpoint(const std::filesystem::path& path);
nlohmann::json parse_checkpoint(std::string_view text);

// Restored models carry no trace.
TrainedModel f2bmld_from_checkpoint(const nlohmann::json& doc);
TwoStageModel two_stage_from_checkpoint(const nlohmann::json& doc);
Eigen::VectorXd q_table_from_checkpoint(const nlohmann::json& doc);

// Trace CSV: iter,f1,f2,gap,lagrangian,mean_norm_x,wall_ms[,value].
void write_trace_csv(std::ostream& out, const std::vector<TraceRecord>& trace);
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRecord>& trace);
std::vector<TraceRecord> read_trace_csv(std::istream& in);
// DFIV trace CSV: iter,stage1_loss,stage2_loss[,value].
void write_dfiv_trace_csv(const std::filesystem::path& path,
                          const std::vector<DfivTraceRecord>& trace);

}  // namespace mfldiv
