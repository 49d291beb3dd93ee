#include "mfldiv/npiv_data.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numbers>
#include <sstream>

#include "mfldiv/csv.hpp"
#include "mfldiv/errors.hpp"
#include "mfldiv/rng.hpp"

namespace mfldiv {

std::string_view to_string(StructuralFunction f) {
  switch (f) {
    case StructuralFunction::kAbs:
      return "abs";
    case StructuralFunction::kSin:
      return "sin";
    case StructuralFunction::kLinear:
      return "linear";
  }
  return "?";
}

StructuralFunction structural_function_from_string(std::string_view name) {
  if (name == "abs") return StructuralFunction::kAbs;
  if (name == "sin") return StructuralFunction::kSin;
  if (name == "linear") return StructuralFunction::kLinear;
  throw ContractError("unknown structural function '" + std::string(name) + "'");
}

double StructuralSpec::h(double a) const {
  switch (function) {
    case StructuralFunction::kAbs:
      return std::abs(a);
    case StructuralFunction::kSin:
      return std::sin(a);
    case StructuralFunction::kLinear:
      return a;
  }
  return 0.0;
}

void StructuralSpec::validate() const {
  MFLDIV_REQUIRE(std::isfinite(instrument_range) && instrument_range > 0.0,
                 "instrument range must be positive");
  for (double v : {confounder_var, treatment_noise_var, outcome_noise_var}) {
    MFLDIV_REQUIRE(std::isfinite(v) && v >= 0.0, "noise variances must be non-negative");
  }
}

void to_json(nlohmann::json& j, const StructuralSpec& s) {
  j = nlohmann::json{{"function", std::string(to_string(s.function))},
                     {"instrument_range", s.instrument_range},
                     {"confounder_var", s.confounder_var},
                     {"treatment_noise_var", s.treatment_noise_var},
                     {"outcome_noise_var", s.outcome_noise_var}};
}

void from_json(const nlohmann::json& j, StructuralSpec& s) {
  s = StructuralSpec{};
  if (j.contains("function"))
    s.function = structural_function_from_string(j.at("function").get<std::string>());
  s.instrument_range = j.value("instrument_range", s.instrument_range);
  s.confounder_var = j.value("confounder_var", s.confounder_var);
  s.treatment_noise_var = j.value("treatment_noise_var", s.treatment_noise_var);
  s.outcome_noise_var = j.value("outcome_noise_var", s.outcome_noise_var);
}

void NpivDataset::validate() const {
  MFLDIV_REQUIRE(m() >= 1 && n() >= 1, "dataset needs at least one row per stage");
  MFLDIV_REQUIRE(stage1_w.rows() == m(), "stage I treatment/instrument row counts differ");
  MFLDIV_REQUIRE(stage2_y.size() == n(), "stage II instrument/outcome row counts differ");
  MFLDIV_REQUIRE(stage1_a.cols() >= 1 && stage1_w.cols() >= 1, "empty feature columns");
  MFLDIV_REQUIRE(stage2_w.cols() == stage1_w.cols(), "instrument dimension differs across stages");
  MFLDIV_REQUIRE(stage1_a.allFinite() && stage1_w.allFinite() && stage2_w.allFinite() &&
                     stage2_y.allFinite(),
                 "dataset contains non-finite entries");
}

NpivSample generate_npiv_with_latents(const StructuralSpec& spec, Eigen::Index m, Eigen::Index n,
                                      std::uint64_t seed) {
  spec.validate();
  MFLDIV_REQUIRE(m >= 1 && n >= 1, "m and n must be at least 1");
  const CounterRng rng(seed);
  const double su = std::sqrt(spec.confounder_var);
  const double sv = std::sqrt(spec.treatment_noise_var);
  const double se = std::sqrt(spec.outcome_noise_var);
  const double r = spec.instrument_range;

  struct Row {
    double w, a, y, u;
  };
  auto draw = [&](std::uint64_t stage, Eigen::Index i) {
    RngCursor cur(rng, rng.key(Phase::kData, stage, static_cast<std::uint64_t>(i)));
    Row row{};
    row.w = -r + 2.0 * r * cur.uniform();
    row.u = su * cur.normal();
    const double v = sv * cur.normal();
    const double eps = se * cur.normal();
    row.a = row.w + row.u + v;
    row.y = spec.h(row.a) + row.u + eps;
    return row;
  };

  NpivSample out;
  NpivDataset& ds = out.data;
  ds.stage1_a.resize(m, 1);
  ds.stage1_w.resize(m, 1);
  ds.stage2_w.resize(n, 1);
  ds.stage2_y.resize(n);
  out.stage1_u.resize(m);
  out.stage2_u.resize(n);
  double bound = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Row row = draw(1, i);
    ds.stage1_a(i, 0) = row.a;
    ds.stage1_w(i, 0) = row.w;
    out.stage1_u[i] = row.u;
    bound = std::max(bound, std::abs(spec.h(row.a)));
  }
  for (Eigen::Index j = 0; j < n; ++j) {
    const Row row = draw(2, j);
    ds.stage2_w(j, 0) = row.w;
    ds.stage2_y[j] = row.y;
    out.stage2_u[j] = row.u;
    bound = std::max({bound, std::abs(row.y), std::abs(spec.h(row.a))});
  }
  ds.meta.generator = std::string(to_string(spec.function));
  ds.meta.seed = seed;
  ds.meta.spec = spec;
  ds.meta.bound_m = bound;
  return out;
}

NpivDataset generate_npiv(const StructuralSpec& spec, Eigen::Index m, Eigen::Index n,
                          std::uint64_t seed) {
  return generate_npiv_with_latents(spec, m, n, seed).data;
}

const GaussHermiteRule& gauss_hermite(int order) {
  MFLDIV_REQUIRE(order >= 2, "quadrature order must be at least 2");
  static std::mutex mu;
  static std::map<int, GaussHermiteRule> cache;
  std::lock_guard lock(mu);
  if (auto it = cache.find(order); it != cache.end()) return it->second;

  // Golub-Welsch on the probabilists' Hermite recurrence: off-diagonal sqrt(k).
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) {
    jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  GaussHermiteRule rule;
  rule.nodes.resize(order);
  rule.weights.resize(order);
  double total = 0.0;
  for (int k = 0; k < order; ++k) {
    rule.nodes[k] = eig.eigenvalues()[k];
    const double v0 = eig.eigenvectors()(0, k);
    rule.weights[k] = v0 * v0;
    total += rule.weights[k];
  }
  for (double& w : rule.weights) w /= total;
  return cache.emplace(order, std::move(rule)).first->second;
}

double oracle_th(const StructuralSpec& spec, const std::function<double(double)>& h, double w,
                 int n_quad) {
  const GaussHermiteRule& rule = gauss_hermite(n_quad);
  const double s = std::sqrt(spec.first_stage_var());
  double sum = 0.0;
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) sum += rule.weights[k] * h(w + s * rule.nodes[k]);
  return sum;
}

double structural_th(const StructuralSpec& spec, double w) {
  const double s = std::sqrt(spec.first_stage_var());
  switch (spec.function) {
    case StructuralFunction::kLinear:
      return w;
    case StructuralFunction::kSin:
      return std::sin(w) * std::exp(-0.5 * s * s);
    case StructuralFunction::kAbs:
      if (s == 0.0) return std::abs(w);
      // folded normal mean
      return s * std::sqrt(2.0 / std::numbers::pi) * std::exp(-0.5 * w * w / (s * s)) +
             w * std::erf(w / (s * std::sqrt(2.0)));
  }
  throw ContractError("unknown structural function");
}

MonteCarloEstimate oracle_th_monte_carlo(const StructuralSpec& spec,
                                         const std::function<double(double)>& h, double w,
                                         std::int64_t n_samples, std::uint64_t seed) {
  MFLDIV_REQUIRE(n_samples >= 2, "need at least two Monte Carlo samples");
  const CounterRng rng(seed);
  RngCursor cur(rng, rng.key(Phase::kGeneric, 0xC0DE));
  const double su = std::sqrt(spec.confounder_var);
  const double sv = std::sqrt(spec.treatment_noise_var);
  double mean = 0.0;
  double m2 = 0.0;
  for (std::int64_t i = 0; i < n_samples; ++i) {
    const double v = h(w + su * cur.normal() + sv * cur.normal());
    const double delta = v - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (v - mean);
  }
  const double var = m2 / static_cast<double>(n_samples - 1);
  return {mean, std::sqrt(var / static_cast<double>(n_samples))};
}

void save_dataset(const std::filesystem::path& path, const NpivDataset& ds) {
  ds.validate();
  nlohmann::json meta{{"schema", "mfldiv-npiv"},
                      {"version", kDatasetSchemaVersion},
                      {"generator", ds.meta.generator},
                      {"seed", ds.meta.seed},
                      {"m", ds.m()},
                      {"n", ds.n()},
                      {"d_a", ds.treatment_dim()},
                      {"d_w", ds.instrument_dim()},
                      {"bound_m", ds.meta.bound_m}};
  if (ds.meta.spec) meta["spec"] = *ds.meta.spec;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot open '" + path.string() + "' for writing");
  out << "#meta:" << meta.dump() << "\r\n";
  std::vector<std::string> header{"split"};
  for (int k = 0; k < ds.treatment_dim(); ++k) header.push_back("a" + std::to_string(k));
  for (int k = 0; k < ds.instrument_dim(); ++k) header.push_back("w" + std::to_string(k));
  header.push_back("y");
  write_csv_row(out, header);

  std::vector<std::string> row(header.size());
  for (Eigen::Index i = 0; i < ds.m(); ++i) {
    std::size_t c = 0;
    row[c++] = "stage1";
    for (int k = 0; k < ds.treatment_dim(); ++k) row[c++] = format_double(ds.stage1_a(i, k));
    for (int k = 0; k < ds.instrument_dim(); ++k) row[c++] = format_double(ds.stage1_w(i, k));
    row[c++] = "";
    write_csv_row(out, row);
  }
  for (Eigen::Index j = 0; j < ds.n(); ++j) {
    std::size_t c = 0;
    row[c++] = "stage2";
    for (int k = 0; k < ds.treatment_dim(); ++k) row[c++] = "";
    for (int k = 0; k < ds.instrument_dim(); ++k) row[c++] = format_double(ds.stage2_w(j, k));
    row[c++] = format_double(ds.stage2_y[j]);
    write_csv_row(out, row);
  }
  if (!out) throw ParseError("write failed for '" + path.string() + "'");
}

NpivDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open dataset '" + path.string() + "'");
  std::string first;
  std::getline(in, first);
  if (!first.empty() && first.back() == '\r') first.pop_back();
  const std::string prefix = "#meta:";
  if (first.rfind(prefix, 0) != 0) throw ParseError("dataset is missing its #meta header line");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(first.substr(prefix.size()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset meta header is not valid JSON: ") + e.what());
  }
  if (meta.value("schema", "") != "mfldiv-npiv") throw ParseError("not an NPIV dataset file");
  if (meta.value("version", -1) != kDatasetSchemaVersion) {
    throw ParseError("unsupported dataset version " + meta.value("version", nlohmann::json()).dump());
  }
  const auto m = meta.at("m").get<Eigen::Index>();
  const auto n = meta.at("n").get<Eigen::Index>();
  const int da = meta.at("d_a").get<int>();
  const int dw = meta.at("d_w").get<int>();

  const auto rows = parse_csv(in);
  if (rows.empty()) throw ParseError("dataset has no column header");
  const std::size_t width = static_cast<std::size_t>(1 + da + dw + 1);
  if (rows.front().size() != width) throw ParseError("column header does not match meta dimensions");

  NpivDataset ds;
  ds.stage1_a.resize(m, da);
  ds.stage1_w.resize(m, dw);
  ds.stage2_w.resize(n, dw);
  ds.stage2_y.resize(n);
  Eigen::Index i1 = 0;
  Eigen::Index i2 = 0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != width) {
      throw ParseError("line " + std::to_string(r + 2) + ": expected " + std::to_string(width) +
                       " fields, found " + std::to_string(row.size()));
    }
    try {
      if (row[0] == "stage1") {
        if (i1 >= m) throw ParseError("more stage1 rows than declared");
        for (int k = 0; k < da; ++k) ds.stage1_a(i1, k) = parse_double(row[1 + k]);
        for (int k = 0; k < dw; ++k) ds.stage1_w(i1, k) = parse_double(row[1 + da + k]);
        ++i1;
      } else if (row[0] == "stage2") {
        if (i2 >= n) throw ParseError("more stage2 rows than declared");
        for (int k = 0; k < dw; ++k) ds.stage2_w(i2, k) = parse_double(row[1 + da + k]);
        ds.stage2_y[i2] = parse_double(row[width - 1]);
        ++i2;
      } else {
        throw ParseError("unknown split '" + row[0] + "'");
      }
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(r + 2) + ": " + e.what());
    }
  }
  if (i1 != m || i2 != n) {
    throw ParseError("truncated dataset: expected " + std::to_string(m) + "+" + std::to_string(n) +
                     " rows, found " + std::to_string(i1) + "+" + std::to_string(i2));
  }
  ds.meta.generator = meta.value("generator", "");
  ds.meta.seed = meta.value("seed", std::uint64_t{0});
  ds.meta.bound_m = meta.value("bound_m", 0.0);
  if (meta.contains("spec")) ds.meta.spec = meta.at("spec").get<StructuralSpec>();
  ds.validate();
  return ds;
}

}  // namespace mfldiv
