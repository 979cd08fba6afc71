// essa: command-line front end.
//
//   essa sft        --config run.ini [--strict]
//   essa align      --config run.ini [--resume] [--population-sweep 96,192,400,608]
//   essa worker     --config run.ini --endpoint host:port
//   essa bench      [--json] [--scaling]
//   essa plot-data  --out merged.csv DIR...
//
// Every RunConfig field also has a flag (see --help); flags override the
// config file. Exit codes: 0 success, 2 config error, 3 numerical failure,
// 4 transport failure.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>

#include "essa/error.hpp"
#include "essa/pipeline.hpp"

namespace {

using namespace essa;
namespace fs = std::filesystem;

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

// Config file plus per-field flags shared by the verbs that read a RunConfig.
class ConfigFlags {
 public:
  void attach(CLI::App* app) {
    app->add_option("-c,--config", path_, "INI configuration file")->check(CLI::ExistingFile);
    for (const auto& k : config_keys()) {
      const std::string name = "--" + std::string(k.flag);
      app->add_option(name, values_[name], std::string(k.help))
          ->group("Config overrides")
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }

  RunConfig load(const CLI::App* app) const {
    ConfigOverrides overrides;
    for (const auto& k : config_keys()) {
      const std::string name = "--" + std::string(k.flag);
      if (app->count(name) > 0) overrides.push_back({std::string(k.section), std::string(k.key), values_.at(name)});
    }
    if (path_.empty()) return parse_config("", overrides);
    return load_config(path_, overrides);
  }

 private:
  std::string path_;
  std::map<std::string, std::string> values_;
};

int run_bench(bool json, bool scaling, std::uint64_t seed, double delay_ms, const std::vector<std::size_t>& workers,
              const fs::path& output_dir) {
  std::vector<BenchResult> results;
  for (const auto& c : default_bench_suite()) {
    results.push_back(run_bench_case(c, seed));
    const auto& r = results.back();
    if (!json) {
      std::cout << r.config.name << ": " << (r.passed ? "pass" : "FAIL") << " best " << r.best << " after "
                << r.generations << " generations (" << r.seconds << " s)\n";
    }
  }
  if (json) std::cout << bench_json(results) << "\n";

  if (scaling) {
    ScalingOptions options;
    options.worker_counts = workers;
    const auto initial = cma_init(10, 0.5, options.population, seed, Vector::Ones(10));
    auto evaluator = std::make_shared<BenchmarkEvaluator>(FitnessKind::kSphere, 10, delay_ms);
    const Digest hash = sha256(std::span<const std::uint8_t>());
    const auto rows = measure_scaling(options, initial, [evaluator](std::size_t) { return evaluator; }, hash);
    const auto path = output_dir / "scaling.csv";
    write_scaling_csv(path, rows);
    if (!json) {
      for (const auto& r : rows) {
        std::cout << "workers " << r.workers << ": " << r.seconds << " s, speedup " << r.speedup << ", efficiency "
                  << r.efficiency << "\n";
      }
      std::cout << "wrote " << path.string() << "\n";
    }
  }

  const bool ok = std::all_of(results.begin(), results.end(), [](const BenchResult& r) { return r.passed; });
  return ok ? 0 : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evolution strategies over the singular values of low-rank adapters"};
  app.require_subcommand(1);

  ConfigFlags sft_flags, align_flags, worker_flags;

  auto* sft = app.add_subcommand("sft", "Fine-tune adapters on the SFT split and save them with their SVDs");
  sft_flags.attach(sft);
  bool strict = false;
  sft->add_flag("--strict", strict, "exit 3 when the adapters come out degenerate");

  auto* align = app.add_subcommand("align", "Run the evolution strategy on the alignment split");
  align_flags.attach(align);
  bool resume = false;
  std::vector<std::size_t> sweep;
  std::string align_artifacts;
  align->add_flag("--resume", resume, "continue from run_state.bin in the output directory");
  align->add_option("--population-sweep", sweep, "one run per population size")->delimiter(',');
  align->add_option("--artifacts", align_artifacts, "directory with the SFT outputs (default: output dir)");

  auto* worker = app.add_subcommand("worker", "Serve evaluation jobs for a socket coordinator");
  worker_flags.attach(worker);
  std::string worker_artifacts;
  worker->add_option("--artifacts", worker_artifacts, "directory with the SFT outputs (default: output dir)");

  auto* bench = app.add_subcommand("bench", "CMA-ES convergence suite; nonzero exit on regression");
  bool json = false, scaling = false;
  std::uint64_t bench_seed = 1;
  double delay_ms = 50.0;
  std::vector<std::size_t> scaling_workers{1, 2, 4, 8};
  std::string bench_out = ".";
  bench->add_flag("--json", json, "print machine-readable results");
  bench->add_flag("--scaling", scaling, "also measure scheduler scaling with a synthetic delay");
  bench->add_option("--seed", bench_seed, "master seed");
  bench->add_option("--delay-ms", delay_ms, "synthetic delay per evaluation for --scaling");
  bench->add_option("--workers", scaling_workers, "worker counts for --scaling")->delimiter(',');
  bench->add_option("--output-dir", bench_out, "where scaling.csv goes");

  auto* plot = app.add_subcommand("plot-data", "Merge metrics CSVs into one long table");
  std::vector<std::string> inputs;
  std::string merged = "merged_metrics.csv";
  plot->add_option("inputs", inputs, "run directories or metrics files")->required();
  plot->add_option("-o,--out", merged, "output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*sft) {
      const auto config = sft_flags.load(sft);
      const auto outcome = cmd_sft(config, std::cout);
      if (outcome.report.degenerate && strict) return kExitNumerical;
    } else if (*align) {
      const auto config = align_flags.load(align);
      if (!sweep.empty()) {
        if (resume) throw Error(ErrorCode::kInvalidConfig, "--resume and --population-sweep are exclusive");
        cmd_population_sweep(config, sweep, std::cout);
      } else {
        AlignOptions options;
        options.resume = resume;
        if (!align_artifacts.empty()) options.artifacts = align_artifacts;
        options.on_listening = [](std::uint16_t port) { std::cout << "listening on port " << port << std::endl; };
        cmd_align(config, options, std::cout);
      }
    } else if (*worker) {
      const auto config = worker_flags.load(worker);
      cmd_worker(config, worker_artifacts.empty() ? config.output_dir : fs::path(worker_artifacts), std::cout);
    } else if (*bench) {
      return run_bench(json, scaling, bench_seed, delay_ms, scaling_workers, bench_out);
    } else if (*plot) {
      merge_metrics(std::vector<fs::path>(inputs.begin(), inputs.end()), merged);
      std::cout << "wrote " << merged << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
