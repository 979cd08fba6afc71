#include "essa/cmaes.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "essa/binary_io.hpp"
#include "essa/digest.hpp"
#include "essa/error.hpp"
#include "essa/rng.hpp"

namespace essa {
namespace {

constexpr double kSymmetryTolerance = 1e-10;

CmaHyper default_hyper(std::size_t dim, std::size_t lambda, Vector& weights) {
  CmaHyper h;
  h.lambda = lambda;
  h.mu = lambda / 2;
  weights.resize(static_cast<Eigen::Index>(h.mu));
  for (std::size_t i = 0; i < h.mu; ++i) {
    weights(static_cast<Eigen::Index>(i)) =
        std::log(static_cast<double>(h.mu) + 0.5) - std::log(static_cast<double>(i + 1));
  }
  weights /= weights.sum();
  h.mu_eff = 1.0 / weights.squaredNorm();

  const double n = static_cast<double>(dim);
  const double mu_eff = h.mu_eff;
  h.c_m = 1.0;
  h.c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
  h.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + h.c_sigma;
  h.c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
  h.c_1 = 2.0 / ((n + 1.3) * (n + 1.3) + mu_eff);
  h.c_mu = std::min(1.0 - h.c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) * (n + 2.0) + mu_eff));
  return h;
}

void factorize(CmaState& state) {
  if (state.factored_generation == state.generation && state.eigen_basis.size() != 0) return;
  const Eigen::MatrixXd c = state.covariance;
  if (!c.allFinite()) throw Error(ErrorCode::kNumericalBreakdown, "covariance has non-finite entries");
  if ((c - c.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance) {
    throw Error(ErrorCode::kNumericalBreakdown, "covariance lost symmetry");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(c);
  if (solver.info() != Eigen::Success) {
    throw Error(ErrorCode::kNumericalBreakdown, "covariance eigendecomposition failed");
  }
  const Eigen::VectorXd& values = solver.eigenvalues();
  if (!values.allFinite() || values.minCoeff() <= 0.0) {
    throw Error(ErrorCode::kNumericalBreakdown, "covariance is not positive definite");
  }
  state.eigen_basis = solver.eigenvectors();
  state.eigen_scale = values.cwiseSqrt();
  state.factored_generation = state.generation;
}

// y = B * D * z for the candidate's deterministic z stream.
Vector sample_step(const CmaState& state, std::uint64_t seed) {
  CounterRng rng(seed, 0);
  Vector z(static_cast<Eigen::Index>(state.dim));
  for (Eigen::Index j = 0; j < z.size(); ++j) z(j) = rng.normal();
  return state.eigen_basis * state.eigen_scale.cwiseProduct(z);
}

}  // namespace

bool Generation::complete() const {
  return std::all_of(rewards.begin(), rewards.end(),
                     [](const std::optional<double>& r) { return r.has_value() && std::isfinite(*r); });
}

std::size_t default_population(std::size_t dim) {
  return 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(static_cast<double>(dim))));
}

double expected_normal_norm(std::size_t dim) {
  const double n = static_cast<double>(dim);
  return std::sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
}

CmaState cma_init(std::size_t dim, double sigma0, std::size_t lambda, std::uint64_t seed,
                  std::optional<Vector> mean0) {
  if (dim < 1) throw Error(ErrorCode::kInvalidConfig, "dimension must be at least 1");
  if (!(sigma0 > 0.0) || !std::isfinite(sigma0)) {
    throw Error(ErrorCode::kInvalidConfig, "sigma0 must be positive and finite");
  }
  if (lambda < 2) throw Error(ErrorCode::kInvalidConfig, "population must be at least 2");
  if (mean0 && (static_cast<std::size_t>(mean0->size()) != dim || !mean0->allFinite())) {
    throw Error(ErrorCode::kInvalidConfig, "initial mean has wrong size or non-finite entries");
  }

  CmaState s;
  s.dim = dim;
  const auto n = static_cast<Eigen::Index>(dim);
  s.mean = mean0 ? *mean0 : Vector::Zero(n);
  s.step_size = sigma0;
  s.sigma0 = sigma0;
  s.covariance = Matrix::Identity(n, n);
  s.path_sigma = Vector::Zero(n);
  s.path_c = Vector::Zero(n);
  s.rng_seed = seed;
  s.hyper = default_hyper(dim, lambda, s.weights);
  return s;
}

std::uint64_t candidate_seed(std::uint64_t master_seed, std::uint64_t generation, std::uint64_t index) {
  return derive_seed(master_seed, generation, index);
}

Vector sample_candidate(CmaState& state, std::size_t index) {
  if (index >= state.hyper.lambda) {
    throw Error(ErrorCode::kProtocolViolation, "candidate index " + std::to_string(index) + " out of range");
  }
  factorize(state);
  const auto y = sample_step(state, candidate_seed(state.rng_seed, state.generation, index));
  return state.mean + state.step_size * y;
}

Generation ask(CmaState& state) {
  if (state.awaiting_tell) {
    throw Error(ErrorCode::kProtocolViolation, "ask called twice without tell for generation " +
                                                   std::to_string(state.generation));
  }
  factorize(state);
  Generation g;
  g.id = state.generation;
  const std::size_t lambda = state.hyper.lambda;
  g.candidates.reserve(lambda);
  g.seeds.reserve(lambda);
  g.steps.reserve(lambda);
  g.rewards.assign(lambda, std::nullopt);
  for (std::size_t i = 0; i < lambda; ++i) {
    const auto seed = candidate_seed(state.rng_seed, state.generation, i);
    Vector y = sample_step(state, seed);
    g.candidates.push_back(state.mean + state.step_size * y);
    g.seeds.push_back(seed);
    g.steps.push_back(std::move(y));
  }
  state.awaiting_tell = true;
  return g;
}

void tell(CmaState& state, const Generation& generation) {
  if (!state.awaiting_tell || generation.id != state.generation) {
    throw Error(ErrorCode::kProtocolViolation, "tell for generation " + std::to_string(generation.id) +
                                                   " does not match outstanding ask");
  }
  const std::size_t lambda = state.hyper.lambda;
  if (generation.size() != lambda || generation.rewards.size() != lambda ||
      generation.steps.size() != lambda || !generation.complete()) {
    throw Error(ErrorCode::kIncompleteGeneration,
                "generation " + std::to_string(generation.id) + " lacks finite rewards for all candidates");
  }
  factorize(state);

  // Rank by reward descending; equal rewards keep candidate index order.
  std::vector<std::size_t> order(lambda);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t l, std::size_t r) {
    return *generation.rewards[l] > *generation.rewards[r];
  });

  const auto& h = state.hyper;
  const auto n = static_cast<Eigen::Index>(state.dim);
  Vector y_w = Vector::Zero(n);
  for (std::size_t i = 0; i < h.mu; ++i) {
    y_w += state.weights(static_cast<Eigen::Index>(i)) * generation.steps[order[i]];
  }

  state.mean += h.c_m * state.step_size * y_w;

  // C^{-1/2} y_w = B D^{-1} B^T y_w
  const Vector inv_sqrt_y =
      state.eigen_basis * (state.eigen_basis.transpose() * y_w).cwiseQuotient(state.eigen_scale);
  state.path_sigma = (1.0 - h.c_sigma) * state.path_sigma +
                     std::sqrt(h.c_sigma * (2.0 - h.c_sigma) * h.mu_eff) * inv_sqrt_y;

  const double chi_n = expected_normal_norm(state.dim);
  const double ps_norm = state.path_sigma.norm();
  const double decay = 1.0 - std::pow(1.0 - h.c_sigma, 2.0 * static_cast<double>(state.generation + 1));
  const bool h_sigma = ps_norm / std::sqrt(decay) < (1.4 + 2.0 / (static_cast<double>(state.dim) + 1.0)) * chi_n;

  state.path_c = (1.0 - h.c_c) * state.path_c;
  if (h_sigma) state.path_c += std::sqrt(h.c_c * (2.0 - h.c_c) * h.mu_eff) * y_w;

  const double delta_h = h_sigma ? 0.0 : h.c_c * (2.0 - h.c_c);
  Matrix rank_mu = Matrix::Zero(n, n);
  for (std::size_t i = 0; i < h.mu; ++i) {
    const auto& y = generation.steps[order[i]];
    rank_mu.noalias() += state.weights(static_cast<Eigen::Index>(i)) * (y * y.transpose());
  }
  const double weight_sum = state.weights.sum();
  state.covariance = (1.0 + h.c_1 * delta_h - h.c_1 - h.c_mu * weight_sum) * state.covariance +
                     h.c_1 * (state.path_c * state.path_c.transpose()) + h.c_mu * rank_mu;
  state.covariance = (0.5 * (state.covariance + state.covariance.transpose())).eval();

  state.step_size *= std::exp((h.c_sigma / h.d_sigma) * (ps_norm / chi_n - 1.0));
  if (!std::isfinite(state.step_size) || state.step_size <= 0.0) {
    throw Error(ErrorCode::kNumericalBreakdown, "step size left (0, inf)");
  }

  ++state.generation;
  state.awaiting_tell = false;
}

bool converged(CmaState& state, double threshold) {
  factorize(state);
  return state.step_size * state.eigen_scale.maxCoeff() < threshold;
}

std::vector<std::uint8_t> checkpoint(const CmaState& s) {
  ByteWriter w;
  w.magic("ESCK");
  w.u32(kCmaCheckpointVersion);
  w.u64(s.dim);
  w.u64(s.hyper.lambda);
  w.u64(s.generation);
  for (Eigen::Index i = 0; i < s.mean.size(); ++i) w.f64(s.mean(i));
  for (Eigen::Index i = 0; i < s.covariance.rows(); ++i) {
    for (Eigen::Index j = 0; j < s.covariance.cols(); ++j) w.f64(s.covariance(i, j));
  }
  for (Eigen::Index i = 0; i < s.path_sigma.size(); ++i) w.f64(s.path_sigma(i));
  for (Eigen::Index i = 0; i < s.path_c.size(); ++i) w.f64(s.path_c(i));
  for (Eigen::Index i = 0; i < s.weights.size(); ++i) w.f64(s.weights(i));
  w.f64(s.step_size);
  w.f64(s.sigma0);
  w.f64(s.hyper.c_m);
  w.f64(s.hyper.c_sigma);
  w.f64(s.hyper.d_sigma);
  w.f64(s.hyper.c_c);
  w.f64(s.hyper.c_1);
  w.f64(s.hyper.c_mu);
  w.f64(s.hyper.mu_eff);
  w.u64(s.hyper.mu);
  w.u64(s.rng_seed);
  w.u32(crc32(w.data()));
  return w.take();
}

CmaState restore(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 4 + 24 + 4) throw Error(ErrorCode::kCorruptCheckpoint, "checkpoint too short");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader trailer(bytes.subspan(bytes.size() - 4), ErrorCode::kCorruptCheckpoint);
  ByteReader r(body, ErrorCode::kCorruptCheckpoint);
  r.expect_magic("ESCK");
  const auto version = r.u32();
  if (version != kCmaCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  if (trailer.u32() != crc32(body)) r.fail("checksum mismatch");

  CmaState s;
  s.dim = r.u64();
  const auto lambda = r.u64();
  s.generation = r.u64();
  if (s.dim == 0 || s.dim > (1u << 16) || lambda < 2 || lambda > (1u << 24)) r.fail("implausible header");
  const auto mu = lambda / 2;
  const std::uint64_t expected = 8 * (s.dim * s.dim + 3 * s.dim + mu + 9) + 16;
  if (r.remaining() != expected) r.fail("payload size does not match header");

  const auto n = static_cast<Eigen::Index>(s.dim);
  s.mean.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) s.mean(i) = r.f64();
  s.covariance.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) s.covariance(i, j) = r.f64();
  }
  s.path_sigma.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) s.path_sigma(i) = r.f64();
  s.path_c.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) s.path_c(i) = r.f64();
  s.weights.resize(static_cast<Eigen::Index>(mu));
  for (Eigen::Index i = 0; i < s.weights.size(); ++i) s.weights(i) = r.f64();
  s.step_size = r.f64();
  s.sigma0 = r.f64();
  s.hyper.lambda = lambda;
  s.hyper.c_m = r.f64();
  s.hyper.c_sigma = r.f64();
  s.hyper.d_sigma = r.f64();
  s.hyper.c_c = r.f64();
  s.hyper.c_1 = r.f64();
  s.hyper.c_mu = r.f64();
  s.hyper.mu_eff = r.f64();
  s.hyper.mu = r.u64();
  s.rng_seed = r.u64();
  if (s.hyper.mu != mu) r.fail("parent count does not match population");
  if (!(s.step_size > 0.0) || !s.mean.allFinite() || !s.covariance.allFinite()) r.fail("invalid state values");
  return s;
}

std::string diagnostic_dump(const CmaState& s) {
  std::ostringstream out;
  out << std::setprecision(17);
  const auto join = [&](const Vector& v) {
    std::ostringstream line;
    line << std::setprecision(17);
    for (Eigen::Index i = 0; i < v.size(); ++i) line << (i ? "," : "") << v(i);
    return line.str();
  };
  out << "dim=" << s.dim << '\n'
      << "lambda=" << s.hyper.lambda << '\n'
      << "mu=" << s.hyper.mu << '\n'
      << "generation=" << s.generation << '\n'
      << "rng_seed=" << s.rng_seed << '\n'
      << "step_size=" << s.step_size << '\n'
      << "sigma0=" << s.sigma0 << '\n'
      << "c_m=" << s.hyper.c_m << '\n'
      << "c_sigma=" << s.hyper.c_sigma << '\n'
      << "d_sigma=" << s.hyper.d_sigma << '\n'
      << "c_c=" << s.hyper.c_c << '\n'
      << "c_1=" << s.hyper.c_1 << '\n'
      << "c_mu=" << s.hyper.c_mu << '\n'
      << "mu_eff=" << s.hyper.mu_eff << '\n'
      << "mean=" << join(s.mean) << '\n'
      << "path_sigma=" << join(s.path_sigma) << '\n'
      << "path_c=" << join(s.path_c) << '\n'
      << "weights=" << join(s.weights) << '\n'
      << "covariance_diag=" << join(s.covariance.diagonal()) << '\n';
  return out.str();
}

}  // namespace essa
