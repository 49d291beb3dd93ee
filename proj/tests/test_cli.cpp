#include <doctest.h>

#include <Eigen/LU>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "commands.hpp"
#include "toml_lite.hpp"
#include "mfldiv/checkpoint.hpp"
#include "mfldiv/errors.hpp"
#include "mfldiv/ope.hpp"

using namespace mfldiv;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "mfldiv");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mfldiv_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream buf;
  buf << f.rdbuf();
  return buf.str();
}

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

// Small, fast run for plumbing checks.
const char* kSmallConfig = R"(# plumbing config
[train]
alpha = 0.05
beta = 0.05
gamma = 0.05
inner_steps = 2
outer_steps = 4
n_x = 8
n_z = 8
batch_size = 16
seed = 3

[train.reg]
lambda = 0.3
sigma1 = 1e-3
sigma2 = 1e-3

[data]
function = "sin"
m = 120
n = 120
seed = 9
)";

fs::path small_config() {
  const fs::path p = fs::temp_directory_path() / "mfldiv_cli_small.toml";
  write_file(p, kSmallConfig);
  return p;
}

// Splits an RFC-4180 file without quoted fields into rows of cells.
std::vector<std::vector<std::string>> read_plain_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    REQUIRE(line.find('"') == std::string::npos);
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

// Trace text with the wall-clock column blanked.
std::string without_wall_clock(const std::string& trace) {
  auto rows = read_plain_csv(trace);
  REQUIRE_FALSE(rows.empty());
  std::size_t col = 0;
  while (col < rows[0].size() && rows[0][col] != "wall_ms") ++col;
  REQUIRE(col < rows[0].size());
  std::string out;
  for (auto& r : rows) {
    r[col].clear();
    for (const auto& c : r) out += c + ",";
    out += "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("TOML subset") {
  const json j = cli::parse_toml(R"(
top = 1  # trailing comment
[a]
x = 1.5
s = "q\"uoted\t"
lit = 'C:\path'
flags = [true, false]
nested = { k = -3, name = "n" }
"quoted key" = 2
b.c = 7
[a.deep]
inf = inf
neg = -inf
big = 1_000
arr = [
  1,
  2,  # inside
]
)");
  CHECK(j.at("top") == 1);
  CHECK(j.at("a").at("x") == 1.5);
  CHECK(j.at("a").at("s") == "q\"uoted\t");
  CHECK(j.at("a").at("lit") == "C:\\path");
  CHECK(j.at("a").at("flags") == json::array({true, false}));
  CHECK(j.at("a").at("nested").at("k") == -3);
  CHECK(j.at("a").at("quoted key") == 2);
  CHECK(j.at("a").at("b").at("c") == 7);
  CHECK(std::isinf(j.at("a").at("deep").at("inf").get<double>()));
  CHECK(j.at("a").at("deep").at("neg").get<double>() < 0.0);
  CHECK(j.at("a").at("deep").at("big") == 1000);
  CHECK(j.at("a").at("deep").at("arr") == json::array({1, 2}));
  CHECK(j.at("a").at("x").is_number_float());
  CHECK(j.at("top").is_number_integer());

  SUBCASE("errors carry line numbers") {
    try {
      cli::parse_toml("a = 1\nb = \n");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    CHECK_THROWS_AS(cli::parse_toml("a = 1\na = 2\n"), ParseError);
    CHECK_THROWS_AS(cli::parse_toml("d = 1979-05-27\n"), ParseError);
    CHECK_THROWS_AS(cli::parse_toml("s = \"\"\"multi\"\"\"\n"), ParseError);
    CHECK_THROWS_AS(cli::parse_toml("[t]\n[t]\n"), ParseError);
    CHECK_THROWS_AS(cli::parse_toml("s = \"open\n"), ParseError);
    CHECK_THROWS_AS(cli::parse_toml("x = [1, 2\n"), ParseError);
  }
}

TEST_CASE("dry runs validate and write nothing") {
  const fs::path cfg = small_config();
  const fs::path out = scratch("dry");
  Result r = invoke({"train", "--config", cfg.string(), "--out", out.string(), "--dry-run"});
  CHECK(r.code == 0);
  CHECK_FALSE(fs::exists(out));
  const json reply = json::parse(r.out);
  CHECK(reply.at("ok") == true);
  CHECK(reply.at("config_hash") == config_hash(reply.at("config")));

  r = invoke({"sweep", "--config", cfg.string(), "--out", out.string(), "--lambda", "0.1,0.3", "--seeds", "2", "--dry-run"});
  CHECK(r.code == 0);
  CHECK(json::parse(r.out).at("cells") == 4);
  CHECK_FALSE(fs::exists(out));

  SUBCASE("step-size rules are enforced") {
    const fs::path bad = fs::temp_directory_path() / "mfldiv_cli_bad_step.toml";
    write_file(bad, "[train]\ngamma = 1e6\n[train.reg]\nzeta2 = 1e-3\n");
    r = invoke({"train", "--config", bad.string(), "--dry-run"});
    CHECK(r.code == static_cast<int>(cli::ExitCode::kInvalidConfig));
    CHECK(r.err.find("gamma") != std::string::npos);
  }
}

TEST_CASE("failures map to distinct exit codes") {
  using cli::ExitCode;
  const fs::path cfg = small_config();
  std::set<int> seen;
  auto expect = [&](ExitCode code, std::vector<std::string> args) {
    const Result r = invoke(std::move(args));
    CHECK(r.code == static_cast<int>(code));
    const json e = json::parse(r.err.substr(r.err.find("{\"error\"")));
    CHECK(e.at("error").at("exit_code") == static_cast<int>(code));
    CHECK(e.at("error").at("code") == std::string(cli::exit_code_name(code)));
    seen.insert(r.code);
  };
  expect(ExitCode::kUsage, {"train", "--bogus"});
  expect(ExitCode::kUsage, {"frobnicate"});
  expect(ExitCode::kMissingFile, {"train", "--config", "/nonexistent/cfg.toml", "--dry-run"});
  const fs::path typo = fs::temp_directory_path() / "mfldiv_cli_typo.toml";
  write_file(typo, "[train]\nalpah = 0.1\n");
  expect(ExitCode::kInvalidConfig, {"train", "--config", typo.string(), "--dry-run"});
  write_file(typo, "[train\n");
  expect(ExitCode::kInvalidConfig, {"train", "--config", typo.string(), "--dry-run"});
  const fs::path junk = fs::temp_directory_path() / "mfldiv_cli_junk.csv";
  write_file(junk, "not,a,dataset\n1,2\n");
  expect(ExitCode::kInvalidInput, {"train", "--config", cfg.string(), "--data", junk.string(), "--out", scratch("junk").string()});
  const fs::path diverge = fs::temp_directory_path() / "mfldiv_cli_diverge.toml";
  std::string text = kSmallConfig;
  text.replace(text.find("seed = 3"), 8, "seed = 3\ndivergence_norm = 1e-3");
  write_file(diverge, text);
  expect(ExitCode::kNumerical, {"train", "--config", diverge.string(), "--out", scratch("diverge").string()});
  const fs::path blocker = fs::temp_directory_path() / "mfldiv_cli_blocker";
  fs::remove_all(blocker);
  write_file(blocker, "x");
  expect(ExitCode::kIo, {"train", "--config", cfg.string(), "--out", (blocker / "sub").string()});
  CHECK(seen.size() == 6);
  CHECK_FALSE(seen.contains(0));
}

TEST_CASE("the installed binary reports the same exit codes") {
  const std::string bin = MFLDIV_CLI_PATH;
  REQUIRE(fs::exists(bin));
  auto status = [](const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status(bin + " --help") == 0);
  CHECK(status(bin + " train --bogus") == 2);
  CHECK(status(bin + " evaluate --checkpoint /nonexistent.json") == 4);
}

TEST_CASE("sweep grid produces one row per cell") {
  const fs::path cfg = small_config();
  const fs::path out = scratch("sweep");
  const Result r = invoke({"sweep", "--config", cfg.string(), "--out", out.string(), "--lambda", "0.1,0.3,1,3", "--seeds", "3", "--jobs", "2"});
  REQUIRE(r.code == 0);
  const auto rows = read_plain_csv(slurp(out / "sweep.csv"));
  REQUIRE(rows.size() == 13);
  CHECK(rows[0][0] == "cell");
  std::set<std::pair<std::string, std::string>> combos;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].size() == rows[0].size());
    CHECK(rows[i][0] == std::to_string(i - 1));
    combos.insert({rows[i][1], rows[i][3]});
  }
  CHECK(combos.size() == 12);
  const json manifest = json::parse(slurp(out / "manifest.json"));
  CHECK(manifest.at("artifacts").at("cells") == 12);
  CHECK(fs::exists(out / "cell_0011" / "checkpoint.json"));

  SUBCASE("cells do not depend on --jobs") {
    const fs::path serial = scratch("sweep_serial");
    REQUIRE(invoke({"sweep", "--config", cfg.string(), "--out", serial.string(), "--lambda", "0.1,0.3,1,3", "--seeds", "3", "--jobs", "1"}).code == 0);
    CHECK(slurp(serial / "sweep.csv") == slurp(out / "sweep.csv"));
    for (const char* cell : {"cell_0000", "cell_0007", "cell_0011"}) {
      CHECK(slurp(serial / cell / "checkpoint.json") == slurp(out / cell / "checkpoint.json"));
      CHECK(without_wall_clock(slurp(serial / cell / "trace.csv")) == without_wall_clock(slurp(out / cell / "trace.csv")));
    }
  }
  CHECK(invoke({"sweep", "--config", cfg.string(), "--out", out.string(), "--lambda", "0.1,x"}).code == 2);
}

TEST_CASE("train artifacts are reproducible across --jobs") {
  const fs::path cfg = small_config();
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  REQUIRE(invoke({"train", "--config", cfg.string(), "--out", a.string(), "--jobs", "1"}).code == 0);
  REQUIRE(invoke({"train", "--config", cfg.string(), "--out", b.string(), "--jobs", "3"}).code == 0);
  CHECK(slurp(a / "checkpoint.json") == slurp(b / "checkpoint.json"));
  CHECK(without_wall_clock(slurp(a / "trace.csv")) == without_wall_clock(slurp(b / "trace.csv")));
  CHECK(slurp(a / "metrics.json") == slurp(b / "metrics.json"));

  const json manifest = json::parse(slurp(a / "manifest.json"));
  const json metrics = json::parse(slurp(a / "metrics.json"));
  const json ckpt = json::parse(slurp(a / "checkpoint.json"));
  CHECK(manifest.at("config_hash") == metrics.at("config_hash"));
  CHECK(manifest.at("config_hash") == ckpt.at("config_hash"));
  CHECK(metrics.contains("projected_risk"));
  CHECK(read_plain_csv(slurp(a / "trace.csv")).size() == 6);

  SUBCASE("the checkpoint evaluates to the training metrics") {
    const Result r = invoke({"evaluate", "--checkpoint", (a / "checkpoint.json").string(), "--function", "sin"});
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out).at("projected_risk") == metrics.at("projected_risk"));
  }
  SUBCASE("a different seed changes the run") {
    const fs::path c = scratch("train_c");
    REQUIRE(invoke({"train", "--config", cfg.string(), "--out", c.string(), "--seed", "4"}).code == 0);
    CHECK(slurp(a / "checkpoint.json") != slurp(c / "checkpoint.json"));
  }
}

TEST_CASE("evaluate reproduces the exact plug-in value") {
  const fs::path out = scratch("exact");
  const Result r = invoke({"ope", "--method", "exact", "--out", out.string()});
  REQUIRE(r.code == 0);
  const Result e = invoke({"evaluate", "--checkpoint", (out / "checkpoint.json").string()});
  REQUIRE(e.code == 0);
  const json m = json::parse(e.out);
  // default chain from the [ope] defaults, solved here independently
  const TabularMdp mdp = chain_mdp(5, 0.2, 0.9, 0.1);
  const Policy pi = biased_policy(5, 2, 1, 0.9);
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(10, 10);
  Eigen::VectorXd rbar(10);
  for (int s = 0; s < 5; ++s) {
    for (int b = 0; b < 2; ++b) {
      rbar[s * 2 + b] = 0.0;
      for (int t = 0; t < 5; ++t) {
        rbar[s * 2 + b] += mdp.p(s, b, t) * mdp.r(s, b, t);
        for (int c = 0; c < 2; ++c) A(s * 2 + b, t * 2 + c) -= 0.9 * mdp.p(s, b, t) * pi(t, c);
      }
    }
  }
  const Eigen::VectorXd q = A.fullPivLu().solve(rbar);
  double v = 0.0;
  for (int s = 0; s < 5; ++s) {
    for (int b = 0; b < 2; ++b) v += mdp.initial[s] * pi(s, b) * q[s * 2 + b];
  }
  CHECK(std::abs(m.at("policy_value").get<double>() - v) <= 1e-10);
  CHECK(std::abs(m.at("oracle_value").get<double>() - v) <= 1e-10);
  CHECK(m.at("abs_error").get<double>() <= 1e-10);
}

TEST_CASE("generate writes loadable files") {
  const fs::path dir = scratch("gen");
  fs::create_directories(dir);
  REQUIRE(invoke({"generate", "--kind", "npiv", "--function", "abs", "--m", "50", "--n", "40", "--seed", "2", "--out", (dir / "d.csv").string()}).code == 0);
  const NpivDataset ds = load_dataset(dir / "d.csv");
  CHECK(ds.m() == 50);
  CHECK(ds.n() == 40);
  CHECK(ds.meta.spec->function == StructuralFunction::kAbs);
  REQUIRE(invoke({"generate", "--kind", "mdp", "--out", (dir / "m.json").string()}).code == 0);
  CHECK(load_mdp(dir / "m.json").states == 5);
  REQUIRE(invoke({"generate", "--kind", "ope", "--mdp", (dir / "m.json").string(), "--out", (dir / "o.csv").string()}).code == 0);
  CHECK(load_ope_dataset(dir / "o.csv").size() == 10000);
  CHECK(invoke({"generate", "--kind", "npiv", "--function", "cubic", "--out", (dir / "x.csv").string()}).code == 2);
}

TEST_CASE("shipped configs pass a dry run") {
  for (const char* name : {"npiv.toml", "ope.toml"}) {
    const std::string cfg = (fs::path(MFLDIV_CONFIG_DIR) / name).string();
    CAPTURE(cfg);
    CHECK(invoke({"train", "--config", cfg, "--dry-run"}).code == 0);
    CHECK(invoke({"ope", "--method", "dfiv", "--config", cfg, "--dry-run"}).code == 0);
  }
}
