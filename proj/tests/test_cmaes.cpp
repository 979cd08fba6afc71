#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include "essa/binary_io.hpp"
#include "essa/cmaes.hpp"
#include "essa/error.hpp"
#include "essa/fitness.hpp"
#include "test_util.hpp"

using namespace essa;

namespace {

void score(Generation& g, FitnessKind kind) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& x = g.candidates[i];
    g.rewards[i] = evaluate_benchmark(kind, std::span(x.data(), static_cast<std::size_t>(x.size())));
  }
}

double best_of(const Generation& g) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : g.rewards) best = std::max(best, *r);
  return best;
}

// Runs until `target` is reached, checking symmetry each generation. A
// covariance that loses definiteness makes tell() throw.
std::size_t generations_to(CmaState& s, FitnessKind kind, double target, std::size_t budget) {
  double best_so_far = -std::numeric_limits<double>::infinity();
  for (std::size_t g = 1; g <= budget; ++g) {
    Generation gen = ask(s);
    score(gen, kind);
    const double previous = best_so_far;
    best_so_far = std::max(best_so_far, best_of(gen));
    CHECK(best_so_far >= previous);
    tell(s, gen);
    REQUIRE(((s.covariance - s.covariance.transpose()).cwiseAbs().maxCoeff() <= 1e-10));
    if (best_so_far >= target) return g;
  }
  return budget + 1;
}

CmaState fixture_trajectory() {
  CmaState s = cma_init(3, 0.5, 8, 2024, Vector::Ones(3));
  for (int g = 0; g < 5; ++g) {
    Generation gen = ask(s);
    score(gen, FitnessKind::kSphere);
    tell(s, gen);
  }
  return s;
}

}  // namespace

TEST_CASE("init: dim 56 with 192 candidates") {
  const auto s = cma_init(56, 0.32, 192, 1);
  CHECK(s.hyper.mu == 96);
  CHECK(s.weights.size() == 96);
  for (Eigen::Index i = 1; i < s.weights.size(); ++i) CHECK(s.weights(i - 1) > s.weights(i));
  CHECK(std::abs(s.weights.sum() - 1.0) <= 1e-12);
  CHECK(s.hyper.mu_eff >= 1.0);
  CHECK(s.hyper.mu_eff <= 96.0);
  CHECK(s.mean.isZero());
  CHECK(s.covariance.isIdentity());
  CHECK(s.step_size == 0.32);
}

TEST_CASE("init: smallest instance") {
  const auto s = cma_init(1, 1.0, 2, 0);
  CHECK(s.hyper.mu == 1);
  REQUIRE(s.weights.size() == 1);
  CHECK(s.weights(0) == 1.0);
}

TEST_CASE("init: learning rates from the closed-form defaults") {
  const auto s = cma_init(10, 0.5, 10, 0);
  const auto& h = s.hyper;
  // Independent evaluation of the default formulas.
  const double n = 10.0;
  double w[5], sum = 0.0;
  for (int i = 0; i < 5; ++i) sum += (w[i] = std::log(5.5) - std::log(i + 1.0));
  double sq = 0.0;
  for (double& v : w) sq += (v / sum) * (v / sum);
  const double mu_eff = 1.0 / sq;
  CHECK(h.mu_eff == doctest::Approx(mu_eff).epsilon(1e-12));
  CHECK(h.c_sigma == doctest::Approx((mu_eff + 2) / (n + mu_eff + 5)).epsilon(1e-12));
  CHECK(h.c_c == doctest::Approx((4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)).epsilon(1e-12));
  CHECK(h.c_1 == doctest::Approx(2 / ((n + 1.3) * (n + 1.3) + mu_eff)).epsilon(1e-12));
  CHECK(h.c_mu == doctest::Approx(std::min(1 - h.c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) * (n + 2) + mu_eff)))
                      .epsilon(1e-12));
  CHECK(h.c_1 + h.c_mu <= 1.0);
  for (double rate : {h.c_sigma, h.c_c, h.c_1, h.c_mu}) {
    CHECK(rate > 0.0);
    CHECK(rate < 1.0);
  }
  CHECK(h.c_m == 1.0);
}

TEST_CASE("init: invalid arguments") {
  CHECK(test::error_code([] { cma_init(0, 1.0, 4, 0); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { cma_init(3, 0.0, 4, 0); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { cma_init(3, -1.0, 4, 0); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { cma_init(3, 1.0, 1, 0); }) == ErrorCode::kInvalidConfig);
  CHECK(default_population(10) == 10);
}

TEST_CASE("ask/tell protocol") {
  auto s = cma_init(4, 0.5, 6, 3);
  Generation g = ask(s);
  CHECK(test::error_code([&] { ask(s); }) == ErrorCode::kProtocolViolation);
  CHECK(test::error_code([&] { tell(s, g); }) == ErrorCode::kIncompleteGeneration);
  for (std::size_t i = 0; i < g.size(); ++i) g.rewards[i] = static_cast<double>(i);
  g.rewards[2] = std::nan("");
  CHECK(test::error_code([&] { tell(s, g); }) == ErrorCode::kIncompleteGeneration);
  g.rewards[2] = 2.0;
  tell(s, g);
  CHECK(s.generation == 1);
  CHECK(test::error_code([&] { tell(s, g); }) == ErrorCode::kProtocolViolation);
}

TEST_CASE("candidates are reproducible from the seed alone") {
  auto s = cma_init(5, 0.3, 8, 17);
  const auto copy = s;
  const Generation g = ask(s);
  auto other = copy;
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g.seeds[i] == candidate_seed(17, 0, i));
    CHECK(sample_candidate(other, i) == g.candidates[i]);
  }
}

TEST_CASE("vanishing step size collapses candidates onto the mean") {
  Vector mean(3);
  mean << 0.5, -1.0, 2.0;
  auto s = cma_init(3, 1e-300, 10, 1, mean);
  const auto g = ask(s);
  for (const auto& x : g.candidates) CHECK((x - mean).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("sample covariance of 1e5 draws matches sigma^2 I") {
  const double sigma = 0.7;
  auto s = cma_init(2, sigma, 100000, 31);
  const auto g = ask(s);
  Eigen::Vector2d mean = Eigen::Vector2d::Zero();
  for (const auto& x : g.candidates) mean += x;
  mean /= static_cast<double>(g.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& x : g.candidates) cov += (x - mean) * (x - mean).transpose();
  cov /= static_cast<double>(g.size() - 1);
  const double target = sigma * sigma;
  CHECK(std::abs(cov(0, 0) - target) <= 0.05 * target);
  CHECK(std::abs(cov(1, 1) - target) <= 0.05 * target);
  CHECK(std::abs(cov(0, 1)) <= 0.05 * target);
}

TEST_CASE("equal rewards recombine the first mu candidates") {
  auto s = cma_init(3, 0.4, 6, 8);
  auto g = ask(s);
  for (auto& r : g.rewards) r = 0.5;
  Vector expected = Vector::Zero(3);
  for (std::size_t i = 0; i < s.hyper.mu; ++i) expected += s.weights(static_cast<Eigen::Index>(i)) * g.candidates[i];
  tell(s, g);
  CHECK((s.mean - expected).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("updates depend on the ranking only") {
  auto base = cma_init(4, 0.5, 8, 12, Vector::Ones(4));
  auto shifted = base, scaled = base;
  auto g = ask(base);
  score(g, FitnessKind::kSphere);
  auto g_shift = ask(shifted);
  auto g_scale = ask(scaled);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g_shift.rewards[i] = *g.rewards[i] + 1000.0;
    g_scale.rewards[i] = *g.rewards[i] * 3.5;
  }
  tell(base, g);
  tell(shifted, g_shift);
  tell(scaled, g_scale);
  CHECK(checkpoint(shifted) == checkpoint(base));
  CHECK(checkpoint(scaled) == checkpoint(base));
}

TEST_CASE("sphere dim 10 converges within 2000 generations") {
  auto s = cma_init(10, 0.5, 10, 1, Vector::Ones(10));
  CHECK(generations_to(s, FitnessKind::kSphere, -1e-10, 2000) <= 2000);
}

TEST_CASE("rosenbrock dim 5 converges within 5000 generations") {
  auto s = cma_init(5, 0.5, default_population(5), 1);
  CHECK(generations_to(s, FitnessKind::kRosenbrock, -1e-8, 5000) <= 5000);
}

TEST_CASE("whole trajectory is a pure function of the seed") {
  const auto a = fixture_trajectory();
  const auto b = fixture_trajectory();
  CHECK(checkpoint(a) == checkpoint(b));
}

TEST_CASE("checkpoint round-trip resumes the identical stream") {
  auto s = cma_init(6, 0.4, 10, 5, Vector::Ones(6));
  for (int i = 0; i < 7; ++i) {
    auto g = ask(s);
    score(g, FitnessKind::kRastrigin);
    tell(s, g);
  }
  const auto bytes = checkpoint(s);
  auto restored = restore(bytes);
  CHECK(checkpoint(restored) == bytes);
  const auto g1 = ask(s);
  const auto g2 = ask(restored);
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g1.candidates[i] == g2.candidates[i]);
  CHECK(diagnostic_dump(s).find("generation=7\n") != std::string::npos);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto bytes = checkpoint(cma_init(3, 0.5, 6, 1));
  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  CHECK(test::error_code([&] { restore(truncated); }) == ErrorCode::kCorruptCheckpoint);
  auto flipped = bytes;
  flipped[40] ^= 0x01;
  CHECK(test::error_code([&] { restore(flipped); }) == ErrorCode::kCorruptCheckpoint);
  auto version = bytes;
  version[4] = 9;
  CHECK(test::error_code([&] { restore(version); }) == ErrorCode::kCorruptCheckpoint);
  CHECK(test::error_code([&] { restore(std::span<const std::uint8_t>()); }) == ErrorCode::kCorruptCheckpoint);
}

TEST_CASE("golden checkpoint fixture") {
  const std::filesystem::path fixture = std::filesystem::path(ESSA_FIXTURE_DIR) / "cma_sphere_dim3_gen5.esck";
  const auto fresh = checkpoint(fixture_trajectory());
  if (std::getenv("ESSA_WRITE_FIXTURES") != nullptr) write_file_atomic(fixture, fresh);
  REQUIRE(std::filesystem::exists(fixture));
  const auto stored = read_file(fixture);
  const auto state = restore(stored);
  CHECK(state.dim == 3);
  CHECK(state.generation == 5);
  CHECK(state.hyper.lambda == 8);
  CHECK(state.rng_seed == 2024);
  CHECK(stored == fresh);
}

TEST_CASE("convergence test uses sigma times the largest axis") {
  auto s = cma_init(2, 1e-13, 4, 0);
  CHECK(converged(s, 1e-12));
  auto t = cma_init(2, 1e-3, 4, 0);
  CHECK_FALSE(converged(t, 1e-12));
}
