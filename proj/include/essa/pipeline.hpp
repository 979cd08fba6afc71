#pragma once

// Command implementations behind the CLI verbs. Every artifact lands in the
// configured output directory:
//
//   config.ini            effective configuration of the last command
//   sft.tsv, align.tsv    dataset splits
//   base_model.essm       frozen base weights (full precision)
//   sft_adapters.essa     adapters after SFT, with per-factor SVDs
//   metrics.csv           one row per generation
//   subsets.tsv           generation, subset hash, subset indices
//   run_state.bin         CMA-ES checkpoint, reward history and best-so-far
//   cma.esck              CMA-ES checkpoint alone
//   final_adapters.essa   adapters at the best candidate seen
//   mean_adapters.essa    adapters at the final CMA-ES mean
//   summary.json          accuracies, best reward, evaluation count

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "essa/config.hpp"
#include "essa/scheduler.hpp"

namespace essa {

inline constexpr std::string_view kMetricsHeader =
    "generation,evaluations,best_reward,mean_reward,worst_reward,wall_millis,subset_hash";

struct TaskData {
  std::vector<TaskExample> sft;
  std::vector<TaskExample> align;
};

// Generates or loads both splits and checks they share no prompt.
TaskData prepare_data(const RunConfig& config);

struct SftOutcome {
  SftReport report;
  std::size_t sft_examples = 0;
  std::size_t align_examples = 0;
};

SftOutcome cmd_sft(const RunConfig& config, std::ostream& log);

// Everything a coordinator and its workers must agree on.
struct AlignSetup {
  std::shared_ptr<const PolicyModel> model;     // null for benchmark fitness
  std::vector<LowRankAdapter> adapters;         // decomposed
  PerturbationLayout layout;
  std::shared_ptr<const FitnessSpec> fitness;
  std::shared_ptr<const CandidateEvaluator> evaluator;
  CmaState initial;
  Digest config_hash{};
};

// `artifacts` holds base_model.essm and sft_adapters.essa.
AlignSetup prepare_align(const RunConfig& config, const std::filesystem::path& artifacts);

struct AlignOptions {
  bool resume = false;
  // Directory holding the SFT artifacts; defaults to the output directory.
  std::optional<std::filesystem::path> artifacts;
  // Called once the socket coordinator listens (port 0 picks a free port).
  std::function<void(std::uint16_t)> on_listening;
};

struct AlignSummary {
  std::string config_hash;
  std::size_t population = 0;
  std::uint64_t generations = 0;
  std::uint64_t evaluations = 0;
  double best_reward = 0.0;
  std::uint64_t best_generation = 0;
  bool converged = false;
  // Accuracy on the whole alignment split; absent for benchmark fitness.
  std::optional<double> baseline_accuracy;
  std::optional<double> final_accuracy;  // best candidate seen
  std::optional<double> mean_accuracy;   // final CMA-ES mean
  double final_sigma = 0.0;
};

AlignSummary cmd_align(const RunConfig& config, const AlignOptions& options, std::ostream& log);

// One alignment run per population size under <output>/pop_<P>, then a
// merged sweep.csv in the output directory.
std::vector<AlignSummary> cmd_population_sweep(const RunConfig& config, const std::vector<std::size_t>& populations,
                                               std::ostream& log);

// Connects to the coordinator and serves jobs until Shutdown.
void cmd_worker(const RunConfig& config, const std::filesystem::path& artifacts, std::ostream& log);

struct BenchCase {
  std::string name;
  FitnessKind kind = FitnessKind::kSphere;
  std::size_t dim = 10;
  std::size_t lambda = 10;
  double sigma0 = 0.5;
  double mean0 = 1.0;
  double target = -1e-10;
  std::size_t budget = 2000;  // generations
};

struct BenchResult {
  BenchCase config;
  std::size_t generations = 0;
  double best = 0.0;
  bool passed = false;
  bool breakdown = false;  // covariance degenerated before the target was reached
  double seconds = 0.0;
};

std::vector<BenchCase> default_bench_suite();
BenchResult run_bench_case(const BenchCase& c, std::uint64_t seed);
std::string bench_json(const std::vector<BenchResult>& results);

// Concatenates metrics CSVs with a leading run column. Each input is a
// metrics file or a directory containing metrics.csv; the run label is the
// directory name.
void merge_metrics(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& output);

}  // namespace essa
