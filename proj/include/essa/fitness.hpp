#pragma once

// Rewards for candidates. Accuracy over a dataset subset for the policy
// model, negated classic test functions for optimizer validation. Every
// reward is maximized.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "essa/digest.hpp"
#include "essa/kernels.hpp"
#include "essa/lowrank.hpp"
#include "essa/model.hpp"
#include "essa/task.hpp"

namespace essa {

enum class FitnessKind : std::uint32_t { kAccuracyTask = 0, kSphere = 1, kRosenbrock = 2, kRastrigin = 3 };
enum class SubsetMode : std::uint32_t { kFixed = 0, kDynamic = 1 };

std::string_view to_string(FitnessKind k);
FitnessKind parse_fitness_kind(std::string_view s);
std::string_view to_string(SubsetMode m);
SubsetMode parse_subset_mode(std::string_view s);

struct SubsetPolicy {
  SubsetMode mode = SubsetMode::kDynamic;
  std::size_t size = 100;
  std::uint64_t seed = 0;
  // Draw a fresh subset for every candidate instead of one per generation.
  bool per_candidate = false;
};

struct FitnessSpec {
  FitnessKind kind = FitnessKind::kAccuracyTask;
  SubsetPolicy subset;
  std::vector<TaskExample> dataset;  // accuracy task only
  double synthetic_delay_ms = 0.0;   // added wall time per evaluation, for scheduling tests
};

// Index list for one generation. Fixed: first `size` entries of the
// permutation drawn from CounterRng(0, 0). Dynamic: the same Fisher-Yates
// shuffle drawn from CounterRng(seed, generation); per-candidate resampling
// uses CounterRng(derive_seed(seed, generation, candidate), 1).
//
// Fisher-Yates: perm = 0..n-1; for i = n-1 down to 1: swap(perm[i],
// perm[rng.bounded(i + 1)]).
std::vector<std::size_t> subset_select(const SubsetPolicy& policy, std::size_t dataset_size,
                                       std::uint64_t generation, std::uint64_t candidate = 0);

// SHA-256 over the indices as little-endian u64, first 16 hex digits.
std::string subset_hash(std::span<const std::size_t> indices);

// Textbook minimization forms.
double sphere(std::span<const double> x);
double rosenbrock(std::span<const double> x);
double rastrigin(std::span<const double> x);

// Negated benchmark value.
double evaluate_benchmark(FitnessKind kind, std::span<const double> x);

// Fraction of exact matches on the subset chosen for (generation, candidate).
double evaluate(const FitnessSpec& spec, const PolicyModel& model, std::span<const FactorPair> overrides,
                std::uint64_t generation, std::uint64_t candidate = 0,
                kernels::Exec exec = kernels::Exec::kSerial);

// Maps a raw candidate vector to a reward. Implementations are immutable and
// may be called concurrently.
class CandidateEvaluator {
 public:
  virtual ~CandidateEvaluator() = default;
  virtual std::size_t dim() const = 0;
  virtual double operator()(std::span<const double> x, std::uint64_t generation, std::uint64_t candidate) const = 0;
};

// Reconstructs adapters from the candidate's singular-value deltas and scores
// the policy on the subset.
class TaskEvaluator final : public CandidateEvaluator {
 public:
  TaskEvaluator(std::shared_ptr<const FitnessSpec> spec, std::shared_ptr<const PolicyModel> model,
                std::vector<LowRankAdapter> adapters, double top_percent,
                kernels::Exec exec = kernels::Exec::kSerial);

  std::size_t dim() const override { return layout_.dim(); }
  double operator()(std::span<const double> x, std::uint64_t generation, std::uint64_t candidate) const override;

  const PerturbationLayout& layout() const { return layout_; }
  const std::vector<LowRankAdapter>& adapters() const { return adapters_; }

 private:
  std::shared_ptr<const FitnessSpec> spec_;
  std::shared_ptr<const PolicyModel> model_;
  std::vector<LowRankAdapter> adapters_;
  PerturbationLayout layout_;
  kernels::Exec exec_;
};

class BenchmarkEvaluator final : public CandidateEvaluator {
 public:
  BenchmarkEvaluator(FitnessKind kind, std::size_t dim, double synthetic_delay_ms = 0.0);

  std::size_t dim() const override { return dim_; }
  double operator()(std::span<const double> x, std::uint64_t generation, std::uint64_t candidate) const override;

 private:
  FitnessKind kind_;
  std::size_t dim_;
  double delay_ms_;
};

// Digest of everything that determines a reward: kind, subset policy,
// dataset contents and synthetic delay.
void hash_fitness_spec(Sha256Builder& h, const FitnessSpec& spec);

}  // namespace essa
