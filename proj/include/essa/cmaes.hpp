#pragma once

// CMA-ES with an ask/tell interface and a serializable state.
//
// Rewards are MAXIMIZED. Candidate i of generation g is
//   x_i = mean + sigma * B * D * z_i,  z_i ~ N(0, I)
// where z_i is drawn from a counter-based stream keyed by
// candidate_seed(rng_seed, g, i), so x_i is reproducible from the state and
// the seed alone. Update rules follow Hansen's tutorial formulation with
// positive recombination weights only.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "essa/linalg.hpp"

namespace essa {

struct CmaHyper {
  std::size_t lambda = 0;
  std::size_t mu = 0;
  double c_m = 1.0;
  double c_sigma = 0.0;
  double d_sigma = 0.0;
  double c_c = 0.0;
  double c_1 = 0.0;
  double c_mu = 0.0;
  double mu_eff = 0.0;
};

struct CmaState {
  std::size_t dim = 0;
  Vector mean;
  double step_size = 0.0;
  double sigma0 = 0.0;
  Matrix covariance;
  Vector path_sigma;
  Vector path_c;
  Vector weights;
  std::uint64_t generation = 0;
  std::uint64_t rng_seed = 0;
  CmaHyper hyper;

  // Not serialized: the outstanding-ask flag and the eigendecomposition of
  // `covariance`, which is recomputed on demand.
  bool awaiting_tell = false;
  Matrix eigen_basis;   // B, columns are eigenvectors
  Vector eigen_scale;   // D, square roots of eigenvalues
  std::uint64_t factored_generation = ~std::uint64_t{0};
};

struct Generation {
  std::uint64_t id = 0;
  std::vector<Vector> candidates;
  std::vector<std::uint64_t> seeds;
  std::vector<std::optional<double>> rewards;
  std::vector<Vector> steps;  // y_i = B * D * z_i, kept so tell avoids (x - m) / sigma

  std::size_t size() const { return candidates.size(); }
  bool complete() const;
};

// Default population 4 + floor(3 ln n).
std::size_t default_population(std::size_t dim);

CmaState cma_init(std::size_t dim, double sigma0, std::size_t lambda, std::uint64_t seed,
                  std::optional<Vector> mean0 = std::nullopt);

std::uint64_t candidate_seed(std::uint64_t master_seed, std::uint64_t generation, std::uint64_t index);

// Regenerates candidate `index` of the current generation without asking.
Vector sample_candidate(CmaState& state, std::size_t index);

Generation ask(CmaState& state);
void tell(CmaState& state, const Generation& generation);

// Expected norm of an n-dimensional standard normal vector.
double expected_normal_norm(std::size_t dim);

// sigma * max(D) < threshold.
bool converged(CmaState& state, double threshold = 1e-12);

// "ESCK" checkpoint; see the README for the byte layout.
inline constexpr std::uint32_t kCmaCheckpointVersion = 1;
std::vector<std::uint8_t> checkpoint(const CmaState& state);
CmaState restore(std::span<const std::uint8_t> bytes);

// Human-readable dump, one key per line.
std::string diagnostic_dump(const CmaState& state);

}  // namespace essa
