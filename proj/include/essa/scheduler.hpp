#pragma once

// Distributed ask/evaluate/tell loop.
//
// The coordinator owns the CMA-ES state. Every worker holds a replica that
// starts from the same initial state; after each tell the coordinator
// broadcasts all rewards of the generation, so every replica steps in lock
// with the coordinator and can regenerate any candidate from its index.
// Only EvalJob (seed) and RewardReport (scalar) frames cross the wire.
//
// Candidates of a generation are split contiguously: worker n evaluates
// indices n*k .. n*k+k-1 with k = P/N. A worker that disconnects, sends a
// corrupt frame or misses the job timeout is dropped and its unfinished jobs
// move to the remaining workers. A JobError only moves that one job. A job
// is attempted at most twice; a third attempt fails the generation.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "essa/cmaes.hpp"
#include "essa/digest.hpp"
#include "essa/fitness.hpp"
#include "essa/transport.hpp"

namespace essa {

enum class TransportKind : std::uint32_t { kInProcess = 0, kSocket = 1 };

std::string_view to_string(TransportKind t);
TransportKind parse_transport(std::string_view s);

struct ClusterConfig {
  std::size_t population = 192;  // P
  std::size_t workers = 1;       // N
  std::size_t epochs = 100;      // E, generations
  TransportKind transport = TransportKind::kInProcess;
  std::chrono::milliseconds job_timeout{120000};
  // Stop before E when sigma * max(D) falls below this; 0 disables.
  double convergence_threshold = 1e-12;
};

// P, N, E >= 1 and P mod N == 0; throws InvalidCluster.
void validate(const ClusterConfig& c);
std::size_t jobs_per_worker(const ClusterConfig& c);

struct GenerationMetrics {
  std::uint64_t generation = 0;
  std::uint64_t evaluations = 0;  // cumulative
  double best = 0.0;
  double mean = 0.0;
  double worst = 0.0;
  std::uint64_t wall_millis = 0;
  std::string subset_hash;
  std::vector<double> rewards;  // by candidate index
};

struct RunReport {
  std::vector<GenerationMetrics> generations;  // this invocation only
  Vector best_candidate;
  double best_reward = -std::numeric_limits<double>::infinity();
  std::uint64_t best_generation = 0;
  std::uint64_t evaluations = 0;  // cumulative, including resumed history
  bool converged = false;
  std::size_t workers_lost = 0;
  std::size_t jobs_retried = 0;
};

// Rewards of already completed generations, replayed to every worker so its
// replica catches up with a resumed coordinator.
using RewardHistory = std::vector<std::vector<double>>;

struct RunHooks {
  // Subset hash recorded in the metrics of a generation.
  std::function<std::string(std::uint64_t generation)> subset_hash;
  // Called after every tell with the updated state.
  std::function<void(const CmaState&, const GenerationMetrics&, const RunReport&)> on_generation;
  // Ends the run early when it returns true after a generation.
  std::function<bool(const RunReport&)> stop_when;
};

// Continues a run from `state`. `best` seeds best-so-far tracking on resume.
struct ResumeInfo {
  RewardHistory history;
  std::optional<Vector> best_candidate;
  double best_reward = -std::numeric_limits<double>::infinity();
  std::uint64_t best_generation = 0;
};

// Drives the loop over already-connected workers. Each connection must start
// with a Hello; mismatched workers are answered with ConfigMismatch and
// dropped. Runs until state.generation reaches config.epochs.
RunReport run(const ClusterConfig& config, CmaState& state, std::vector<std::unique_ptr<Connection>> workers,
              const Digest& config_hash, const RunHooks& hooks = {}, const ResumeInfo& resume = {});

// Test hooks for failure handling. Counts are jobs completed before the
// fault fires; -1 disables.
struct WorkerFaults {
  int disconnect_after = -1;
  int corrupt_after = -1;
  int hang_after = -1;
  int error_after = -1;
};

struct WorkerOptions {
  WorkerFaults faults;
};

// Serves jobs until Shutdown or until the connection closes. Throws
// ConfigMismatch if the coordinator rejects the handshake.
void worker_serve(Connection& conn, const CandidateEvaluator& evaluator, const CmaState& initial_state,
                  const Digest& config_hash, const WorkerOptions& options = {});

using EvaluatorFactory = std::function<std::shared_ptr<const CandidateEvaluator>(std::size_t worker)>;

struct InProcessOptions {
  std::shared_ptr<ByteCounters> counters;  // counts both directions when set
  std::vector<WorkerOptions> worker_options;  // per worker, optional
};

// Spawns config.workers worker threads over in-process pipes and runs.
// `initial_state` is the replica origin (generation 0).
RunReport run_in_process(const ClusterConfig& config, CmaState& state, const CmaState& initial_state,
                         const EvaluatorFactory& evaluators, const Digest& config_hash,
                         const RunHooks& hooks = {}, const ResumeInfo& resume = {},
                         const InProcessOptions& options = {});

// Listens on `endpoint`, waits up to accept_timeout for config.workers
// workers, then runs.
RunReport run_socket(const ClusterConfig& config, CmaState& state, const Endpoint& endpoint,
                     std::chrono::milliseconds accept_timeout, const Digest& config_hash,
                     const RunHooks& hooks = {}, const ResumeInfo& resume = {},
                     std::function<void(std::uint16_t port)> on_listening = {});

struct ScalingRow {
  std::size_t workers = 0;
  double seconds = 0.0;
  std::size_t generations = 0;
  double best_reward = 0.0;
  bool reached = false;
  double speedup = 0.0;
  double efficiency = 0.0;
};

struct ScalingOptions {
  std::vector<std::size_t> worker_counts{1, 2, 4, 8};
  std::size_t population = 64;
  std::size_t generations = 5;  // budget per setting
  // Stop a setting early once the best reward reaches this value.
  std::optional<double> target_reward;
};

// Same seed and evaluator for every N; speedup and efficiency relative to
// the first row.
std::vector<ScalingRow> measure_scaling(const ScalingOptions& options, const CmaState& initial_state,
                                        const EvaluatorFactory& evaluators, const Digest& config_hash);

void write_scaling_csv(const std::filesystem::path& path, const std::vector<ScalingRow>& rows);

}  // namespace essa
