#include "manifest.hpp"

#include <chrono>
#include <ctime>
#include <fstream>

#include "mfldiv/errors.hpp"

#ifndef MFLDIV_GIT_DESCRIBE
#define MFLDIV_GIT_DESCRIBE "unknown"
#endif

namespace mfldiv::cli {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string git_describe() { return MFLDIV_GIT_DESCRIBE; }

nlohmann::json RunManifest::to_json() const {
  return {{"schema", "mfldiv-manifest"},
          {"version", 1},
          {"command", command},
          {"argv", argv},
          {"config_path", config_path},
          {"config_hash", config_hash},
          {"config", config},
          {"out_dir", out_dir},
          {"git_describe", git_describe()},
          {"inputs", inputs},
          {"artifacts", artifacts},
          {"started_at", started_at},
          {"finished_at", finished_at}};
}

void RunManifest::write(const std::filesystem::path& dir) const {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ParseError("cannot write manifest in '" + dir.string() + "'");
  out << to_json().dump(2) << "\n";
}

}  // namespace mfldiv::cli
