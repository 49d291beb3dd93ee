#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "mfldiv/errors.hpp"
#include "mfldiv/npiv_data.hpp"

using namespace mfldiv;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mfldiv_test_" + name);
}

}  // namespace

TEST_CASE("empty sample sizes are rejected") {
  CHECK_THROWS_AS(generate_npiv(StructuralSpec{}, 0, 0, 1), ContractError);
  CHECK_THROWS_AS(generate_npiv(StructuralSpec{}, 5, 0, 1), ContractError);
}

TEST_CASE("negative noise variances are rejected") {
  StructuralSpec spec;
  spec.confounder_var = -0.1;
  CHECK_THROWS_AS(generate_npiv(spec, 5, 5, 1), ContractError);
  spec = StructuralSpec{};
  spec.instrument_range = 0.0;
  CHECK_THROWS_AS(spec.validate(), ContractError);
}

TEST_CASE("zero noise with a linear structural function is noiseless") {
  StructuralSpec spec;
  spec.function = StructuralFunction::kLinear;
  spec.confounder_var = spec.treatment_noise_var = spec.outcome_noise_var = 0.0;
  const NpivDataset ds = generate_npiv(spec, 50, 60, 3);
  CHECK((ds.stage1_a.array() == ds.stage1_w.array()).all());
  for (Eigen::Index j = 0; j < ds.n(); ++j) CHECK(ds.stage2_y[j] == ds.stage2_w(j, 0));
}

TEST_CASE("instruments lie in the declared range and metadata is recorded") {
  const StructuralSpec spec;
  const NpivDataset ds = generate_npiv(spec, 500, 400, 11);
  CHECK(ds.m() == 500);
  CHECK(ds.n() == 400);
  CHECK(ds.stage1_w.cwiseAbs().maxCoeff() <= 3.0);
  CHECK(ds.stage2_w.cwiseAbs().maxCoeff() <= 3.0);
  CHECK(ds.meta.seed == 11);
  REQUIRE(ds.meta.spec.has_value());
  CHECK(*ds.meta.spec == spec);
  CHECK(ds.meta.bound_m >= ds.stage2_y.cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < ds.m(); ++i) CHECK(ds.meta.bound_m >= spec.h(ds.stage1_a(i, 0)));
}

TEST_CASE("treatment noise is confounded with the outcome") {
  const StructuralSpec spec;
  const NpivSample s = generate_npiv_with_latents(spec, 100000, 1, 5);
  // corr(A - W, Y - h(A)) on stage-I rows, rebuilding Y from the latent U.
  const Eigen::Index m = s.data.m();
  Eigen::VectorXd d(m), e(m);
  std::mt19937_64 gen(17);
  std::normal_distribution<double> eps(0.0, std::sqrt(spec.outcome_noise_var));
  for (Eigen::Index i = 0; i < m; ++i) {
    d[i] = s.data.stage1_a(i, 0) - s.data.stage1_w(i, 0);
    e[i] = s.stage1_u[i] + eps(gen);
  }
  const double cd = (d.array() - d.mean()).matrix().norm();
  const double ce = (e.array() - e.mean()).matrix().norm();
  const double corr = (d.array() - d.mean()).matrix().dot((e.array() - e.mean()).matrix()) / (cd * ce);
  CHECK(corr > 0.5);
}

TEST_CASE("stage-II outcomes carry the confounder") {
  const StructuralSpec spec;
  const NpivSample s = generate_npiv_with_latents(spec, 1, 20000, 6);
  // Y - U is h(A) + eps, uncorrelated with U.
  const Eigen::VectorXd y = s.data.stage2_y;
  const double cov = ((y.array() - y.mean()) * (s.stage2_u.array() - s.stage2_u.mean())).mean();
  CHECK(cov == doctest::Approx(spec.confounder_var).epsilon(0.1));
}

TEST_CASE("the confounder has mean zero within instrument bins") {
  const StructuralSpec spec;
  const NpivSample s = generate_npiv_with_latents(spec, 100000, 1, 8);
  const int bins = 20;
  std::vector<double> sum(bins, 0.0), sq(bins, 0.0);
  std::vector<int> count(bins, 0);
  for (Eigen::Index i = 0; i < s.data.m(); ++i) {
    const double w = s.data.stage1_w(i, 0);
    const int b = std::min(bins - 1, static_cast<int>((w + 3.0) / 6.0 * bins));
    sum[b] += s.stage1_u[i];
    sq[b] += s.stage1_u[i] * s.stage1_u[i];
    ++count[b];
  }
  for (int b = 0; b < bins; ++b) {
    REQUIRE(count[b] > 100);
    const double mean = sum[b] / count[b];
    const double se = std::sqrt((sq[b] / count[b] - mean * mean) / count[b]);
    CHECK(std::abs(mean) <= 4.0 * se);
  }
}

TEST_CASE("identical seeds give bit-identical datasets") {
  const StructuralSpec spec;
  const NpivDataset a = generate_npiv(spec, 300, 200, 42);
  const NpivDataset b = generate_npiv(spec, 300, 200, 42);
  const NpivDataset c = generate_npiv(spec, 300, 200, 43);
  CHECK((a.stage1_a.array() == b.stage1_a.array()).all());
  CHECK((a.stage2_y.array() == b.stage2_y.array()).all());
  CHECK_FALSE((a.stage1_a.array() == c.stage1_a.array()).all());
}

TEST_CASE("Gauss-Hermite rule integrates low-order moments exactly") {
  const GaussHermiteRule& rule = gauss_hermite(16);
  double m0 = 0, m2 = 0, m4 = 0;
  for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
    m0 += rule.weights[k];
    m2 += rule.weights[k] * std::pow(rule.nodes[k], 2);
    m4 += rule.weights[k] * std::pow(rule.nodes[k], 4);
  }
  CHECK(m0 == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(m2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m4 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK_THROWS_AS(gauss_hermite(1), ContractError);
}

TEST_CASE("conditional expectation oracle") {
  const StructuralSpec spec;
  SUBCASE("constants are preserved") {
    for (double w : {-2.5, 0.0, 1.7}) CHECK(oracle_th(spec, [](double) { return 4.2; }, w) == doctest::Approx(4.2).epsilon(1e-13));
  }
  SUBCASE("identity maps to the instrument") {
    for (double w : {-2.5, 0.0, 1.7}) CHECK(oracle_th(spec, [](double a) { return a; }, w) == doctest::Approx(w).scale(1.0).epsilon(1e-12));
  }
  SUBCASE("absolute value at zero is the half-normal mean") {
    const double want = std::sqrt(0.5 * 2.0 / std::numbers::pi);
    CHECK(want == doctest::Approx(0.5642).epsilon(1e-4));
    CHECK(structural_th(spec, 0.0) == doctest::Approx(want).epsilon(1e-14));
    // Gauss-Hermite error across a kink shrinks like 1/order
    const double q64 = oracle_th(spec, [](double a) { return std::abs(a); }, 0.0, 64);
    const double q256 = oracle_th(spec, [](double a) { return std::abs(a); }, 0.0, 256);
    CHECK(std::abs(q64 - want) < 5e-3);
    CHECK(std::abs(q256 - want) < 0.3 * std::abs(q64 - want));
    const MonteCarloEstimate mc = oracle_th_monte_carlo(spec, [](double a) { return std::abs(a); }, 0.0, 1000000, 3);
    CHECK(std::abs(mc.mean - want) <= 3.0 * mc.std_error);
  }
  SUBCASE("order below two is an error") {
    CHECK_THROWS_AS(oracle_th(spec, [](double a) { return a; }, 0.0, 1), ContractError);
  }
}

TEST_CASE("closed-form T h agrees with quadrature and Monte Carlo") {
  for (auto f : {StructuralFunction::kAbs, StructuralFunction::kSin, StructuralFunction::kLinear}) {
    StructuralSpec spec;
    spec.function = f;
    for (double w : {-2.9, -1.0, 0.0, 0.4, 2.2}) {
      const double closed = structural_th(spec, w);
      const auto h = [&](double a) { return spec.h(a); };
      const double tol = f == StructuralFunction::kAbs ? 5e-3 : 1e-12;
      CHECK(std::abs(oracle_th(spec, h, w) - closed) <= tol);
      const MonteCarloEstimate mc = oracle_th_monte_carlo(spec, h, w, 200000, 21);
      CHECK(std::abs(mc.mean - closed) <= 4.0 * mc.std_error + 1e-12);
    }
  }
}

TEST_CASE("quadrature agrees with Monte Carlo estimates of E[Y | W]") {
  StructuralSpec spec;
  spec.function = StructuralFunction::kSin;
  std::mt19937_64 gen(99);
  std::normal_distribution<double> u(0.0, std::sqrt(spec.confounder_var));
  std::normal_distribution<double> v(0.0, std::sqrt(spec.treatment_noise_var));
  std::normal_distribution<double> e(0.0, std::sqrt(spec.outcome_noise_var));
  for (double w = -3.0; w <= 3.0; w += 0.75) {
    const int n = 200000;
    double sum = 0, sq = 0;
    for (int k = 0; k < n; ++k) {
      const double uu = u(gen);
      const double y = spec.h(w + uu + v(gen)) + uu + e(gen);
      sum += y;
      sq += y * y;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    CHECK(std::abs(oracle_th(spec, [&](double a) { return spec.h(a); }, w) - mean) <= 3.0 * se);
  }
}

TEST_CASE("datasets round-trip through the CSV container") {
  const NpivDataset ds = generate_npiv(StructuralSpec{}, 40, 30, 9);
  const auto path = temp_path("roundtrip.csv");
  save_dataset(path, ds);
  const NpivDataset back = load_dataset(path);
  CHECK((back.stage1_a.array() == ds.stage1_a.array()).all());
  CHECK((back.stage1_w.array() == ds.stage1_w.array()).all());
  CHECK((back.stage2_w.array() == ds.stage2_w.array()).all());
  CHECK((back.stage2_y.array() == ds.stage2_y.array()).all());
  CHECK(back.meta.seed == 9);
  CHECK(back.meta.generator == ds.meta.generator);
  REQUIRE(back.meta.spec.has_value());
  CHECK(*back.meta.spec == *ds.meta.spec);
  CHECK(back.meta.bound_m == ds.meta.bound_m);
  std::filesystem::remove(path);
}

TEST_CASE("malformed dataset files are reported") {
  const NpivDataset ds = generate_npiv(StructuralSpec{}, 10, 10, 2);
  const auto path = temp_path("malformed.csv");
  save_dataset(path, ds);
  std::stringstream buf;
  buf << std::ifstream(path).rdbuf();
  const std::string text = buf.str();

  SUBCASE("truncated") {
    std::ofstream(path) << text.substr(0, text.size() / 2);
    CHECK_THROWS_AS(load_dataset(path), ParseError);
  }
  SUBCASE("NaN entry") {
    std::string bad = text;
    const auto pos = bad.find("stage2,");
    const auto comma = bad.find(',', pos + 8);
    bad.replace(pos + 8, comma - pos - 8, "nan");
    std::ofstream(path) << bad;
    CHECK_THROWS_AS(load_dataset(path), ContractError);
  }
  SUBCASE("version mismatch") {
    std::string bad = text;
    bad.replace(bad.find("\"version\":1"), 11, "\"version\":9");
    std::ofstream(path) << bad;
    CHECK_THROWS_AS(load_dataset(path), ParseError);
  }
  SUBCASE("missing header") {
    std::ofstream(path) << "split,a0,w0,y\r\n";
    CHECK_THROWS_AS(load_dataset(path), ParseError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("structural spec JSON round-trip") {
  StructuralSpec spec;
  spec.function = StructuralFunction::kSin;
  spec.outcome_noise_var = 0.3;
  const nlohmann::json j = spec;
  CHECK(j.get<StructuralSpec>() == spec);
  CHECK_THROWS(structural_function_from_string("cube"));
}
