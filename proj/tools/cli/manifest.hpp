#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

namespace mfldiv::cli {

std::string utc_timestamp();
std::string git_describe();

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_path;
  std::string config_hash;
  nlohmann::json config;  // resolved, after defaults and flag overrides
  std::string out_dir;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json artifacts = nlohmann::json::object();
  std::string started_at;
  std::string finished_at;

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& dir) const;
};

}  // namespace mfldiv::cli
