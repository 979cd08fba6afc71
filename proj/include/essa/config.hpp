#pragma once

// Run configuration: one INI file with sections [task] [model] [lora] [es]
// [cluster] [output]. Unknown sections or keys are errors. Only the master
// seed (ESSA_MASTER_SEED) and the output directory (ESSA_OUTPUT_DIR) may be
// overridden from the environment.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "essa/fitness.hpp"
#include "essa/model.hpp"
#include "essa/scheduler.hpp"
#include "essa/task.hpp"

namespace essa {

enum class TaskSource : std::uint32_t { kArithmetic = 0, kFiles = 1 };

struct RunConfig {
  // [task]
  TaskSource source = TaskSource::kArithmetic;
  ArithmeticTaskSpec arithmetic;
  std::uint64_t data_seed = 1;
  std::size_t sft_count = 3333;
  std::size_t align_count = 6667;
  std::filesystem::path sft_file;
  std::filesystem::path align_file;

  // [model]
  Architecture arch;
  std::uint64_t model_seed = 7;
  Precision precision = Precision::kF32;

  // [lora]
  int rank = 8;
  double init_std = 0.1;
  std::uint64_t adapter_seed = 3;
  SftOptions sft{3000, 0.3, false, 16, 11};

  // [es]
  double top_percent = 40.0;
  std::size_t population = 192;
  std::size_t epochs = 200;
  double sigma0 = 0.32;
  std::uint64_t master_seed = 5;
  FitnessKind fitness = FitnessKind::kAccuracyTask;
  std::size_t benchmark_dim = 10;
  SubsetPolicy subset{SubsetMode::kDynamic, 100, 9, false};
  std::size_t checkpoint_every = 10;
  double synthetic_delay_ms = 0.0;
  double convergence_threshold = 1e-12;

  // [cluster]
  std::size_t workers = 1;
  TransportKind transport = TransportKind::kInProcess;
  std::string endpoint = "127.0.0.1:7070";
  std::chrono::milliseconds job_timeout{120000};
  std::chrono::milliseconds accept_timeout{60000};

  // [output]
  std::filesystem::path output_dir = "runs/default";

  ClusterConfig cluster() const;
};

// One recognised key. `flag` is the command-line spelling without dashes.
struct ConfigKey {
  std::string_view section;
  std::string_view key;
  std::string_view flag;
  std::string_view help;
};

const std::vector<ConfigKey>& config_keys();

// (section, key, value) triples applied on top of the file, as if written there.
struct ConfigOverride {
  std::string section;
  std::string key;
  std::string value;
};
using ConfigOverrides = std::vector<ConfigOverride>;

// Parses and validates; throws InvalidConfig naming the offending key.
// Precedence: defaults < file < overrides < environment.
RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides = {},
                      bool apply_env = true);
RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides = {},
                       bool apply_env = true);

// Applies ESSA_MASTER_SEED and ESSA_OUTPUT_DIR when set.
void apply_env_overrides(RunConfig& c);

// Checks every cross-field invariant that does not need the data loaded.
void validate(const RunConfig& c);

// Canonical INI text; parse_config(to_ini(c)) == c.
std::string to_ini(const RunConfig& c);

}  // namespace essa
