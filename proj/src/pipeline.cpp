#include "essa/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "essa/binary_io.hpp"
#include "essa/error.hpp"

namespace essa {
namespace {

namespace fs = std::filesystem;

constexpr std::string_view kBaseModelFile = "base_model.essm";
constexpr std::string_view kSftAdaptersFile = "sft_adapters.essa";
constexpr std::string_view kRunStateMagic = "ESRS";
constexpr std::uint32_t kRunStateVersion = 1;
constexpr double kMinTopSingularValue = 1e-4;

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void require_file(const fs::path& path, const std::string& hint) {
  if (!fs::exists(path)) throw Error(ErrorCode::kIoError, path.string() + " not found; " + hint);
}

std::vector<LowRankAdapter> to_adapters(const std::vector<LowRankAdapter>& like, std::vector<FactorPair> pairs) {
  std::vector<LowRankAdapter> out;
  out.reserve(like.size());
  for (std::size_t i = 0; i < like.size(); ++i) {
    LowRankAdapter a;
    a.name = like[i].name;
    a.b = std::move(pairs[i].b);
    a.a = std::move(pairs[i].a);
    out.push_back(std::move(a));
  }
  decompose_all(out);
  return out;
}

struct RunState {
  Digest config_hash{};
  CmaState cma;
  RewardHistory history;
  std::optional<Vector> best_candidate;
  double best_reward = -std::numeric_limits<double>::infinity();
  std::uint64_t best_generation = 0;
};

std::vector<std::uint8_t> encode_run_state(const RunState& s) {
  ByteWriter w;
  w.magic(kRunStateMagic);
  w.u32(kRunStateVersion);
  w.bytes(s.config_hash);
  const auto cma = checkpoint(s.cma);
  w.u64(cma.size());
  w.bytes(cma);
  w.u64(s.history.size());
  for (const auto& row : s.history) {
    w.u64(row.size());
    for (double r : row) w.f64(r);
  }
  w.u8(s.best_candidate ? 1 : 0);
  if (s.best_candidate) {
    w.u64(static_cast<std::uint64_t>(s.best_candidate->size()));
    for (double v : *s.best_candidate) w.f64(v);
  }
  w.f64(s.best_reward);
  w.u64(s.best_generation);
  return w.take();
}

RunState decode_run_state(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::kCorruptCheckpoint);
  r.expect_magic(kRunStateMagic);
  if (r.u32() != kRunStateVersion) r.fail("unsupported run state version");
  RunState s;
  const auto hash = r.bytes(s.config_hash.size());
  std::copy(hash.begin(), hash.end(), s.config_hash.begin());
  const auto cma_size = r.u64();
  if (cma_size > r.remaining()) r.fail("truncated CMA-ES checkpoint");
  s.cma = restore(r.bytes(cma_size));
  const auto gens = r.u64();
  if (gens != s.cma.generation) r.fail("reward history does not match the checkpoint generation");
  for (std::uint64_t g = 0; g < gens; ++g) {
    const auto n = r.u64();
    if (n != s.cma.hyper.lambda) r.fail("reward history row has the wrong population");
    auto& row = s.history.emplace_back();
    for (std::uint64_t i = 0; i < n; ++i) row.push_back(r.f64());
  }
  if (r.u8() != 0) {
    const auto n = r.u64();
    if (n != s.cma.dim) r.fail("best candidate has the wrong dimension");
    Vector v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = r.f64();
    s.best_candidate = std::move(v);
  }
  s.best_reward = r.f64();
  s.best_generation = r.u64();
  if (!r.done()) r.fail("trailing bytes after run state");
  return s;
}

// Drops rows at or beyond `generation` (and any torn last line) so a resumed
// run appends exactly where the checkpoint left off.
void truncate_rows(const fs::path& path, std::uint64_t generation, char sep, bool has_header) {
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  std::ostringstream kept;
  bool first = true;
  while (std::getline(in, line)) {
    if (in.eof()) break;  // last line without a newline is torn
    if (first && has_header) {
      kept << line << '\n';
      first = false;
      continue;
    }
    first = false;
    const auto cut = line.find(sep);
    std::uint64_t g = 0;
    try {
      g = std::stoull(line.substr(0, cut));
    } catch (const std::exception&) {
      continue;
    }
    if (g < generation) kept << line << '\n';
  }
  write_text_atomic(path, kept.str());
}

// Shortest text that parses back to the same double.
std::string format_reward(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class AppendFile {
 public:
  AppendFile(const fs::path& path, bool truncate) : out_(path, truncate ? std::ios::trunc : std::ios::app) {
    if (!out_) throw Error(ErrorCode::kIoError, "cannot write " + path.string());
  }
  void line(const std::string& text) {
    out_ << text << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace

TaskData prepare_data(const RunConfig& c) {
  TaskData d;
  if (c.source == TaskSource::kArithmetic) {
    const auto all = generate_arithmetic(c.arithmetic, c.data_seed);
    auto splits = split_dataset(all, c.sft_count, c.align_count);
    d.sft = std::move(splits.sft);
    d.align = std::move(splits.align);
  } else {
    d.sft = load_dataset(c.sft_file);
    d.align = load_dataset(c.align_file);
    if (d.align.size() < c.subset.size) {
      throw Error(ErrorCode::kInvalidConfig, "[es] subset_size exceeds the " + std::to_string(d.align.size()) +
                                                 " alignment examples");
    }
  }
  check_disjoint(d.sft, d.align);
  if (c.arch.kind == ArchKind::kTransformer) {
    for (const auto* split : {&d.sft, &d.align}) {
      for (const auto& e : *split) {
        if (e.prompt.size() + e.answer.size() + 1 > static_cast<std::size_t>(c.arch.max_seq)) {
          throw Error(ErrorCode::kInvalidConfig, "[model] max_seq " + std::to_string(c.arch.max_seq) +
                                                     " is too short for '" + e.prompt_text + e.answer + "'");
        }
      }
    }
  }
  return d;
}

SftOutcome cmd_sft(const RunConfig& c, std::ostream& log) {
  if (c.fitness != FitnessKind::kAccuracyTask) {
    throw Error(ErrorCode::kInvalidConfig, "sft needs [es] fitness = accuracy");
  }
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  write_text_atomic(out / "config.ini", to_ini(c));

  const auto data = prepare_data(c);
  save_dataset(out / "sft.tsv", data.sft);
  save_dataset(out / "align.tsv", data.align);
  log << "splits: " << data.sft.size() << " sft, " << data.align.size() << " align, disjoint\n";

  PolicyModel model = PolicyModel::create(c.arch, c.model_seed);
  save_model(out / kBaseModelFile, model);
  model.set_adapters(init_adapters(model, c.rank, c.init_std, c.adapter_seed));

  SftOutcome outcome;
  outcome.report = sft_train(model, data.sft, c.sft);
  outcome.sft_examples = data.sft.size();
  outcome.align_examples = data.align.size();
  decompose_all(outcome.report.adapters);
  save_adapters(out / kSftAdaptersFile, outcome.report.adapters);

  const auto& r = outcome.report;
  log << std::setprecision(6) << "sft loss: " << r.initial_loss << " -> " << r.final_loss << " over " << c.sft.steps
      << " steps\n"
      << "singular values: min " << r.min_singular_value << " max " << r.max_singular_value << "\n";
  if (r.degenerate) log << "warning: degenerate adapters (smallest singular value <= 1e-6)\n";
  log << "wrote " << (out / kSftAdaptersFile).string() << "\n";
  return outcome;
}

AlignSetup prepare_align(const RunConfig& c, const fs::path& artifacts) {
  validate(c);
  AlignSetup s;
  Sha256Builder h;
  h.add("essa-align/1");

  if (c.fitness != FitnessKind::kAccuracyTask) {
    s.evaluator = std::make_shared<BenchmarkEvaluator>(c.fitness, c.benchmark_dim, c.synthetic_delay_ms);
    s.initial = cma_init(c.benchmark_dim, c.sigma0, c.population, c.master_seed,
                         Vector::Ones(static_cast<Eigen::Index>(c.benchmark_dim)));
    h.add(to_string(c.fitness)).add_u64(c.benchmark_dim).add_f64(c.synthetic_delay_ms);
  } else {
    const auto model_path = artifacts / kBaseModelFile;
    const auto adapters_path = artifacts / kSftAdaptersFile;
    require_file(model_path, "run the sft command first");
    require_file(adapters_path, "run the sft command first");

    PolicyModel base = load_model(model_path);
    if (!(base.arch() == c.arch)) {
      throw Error(ErrorCode::kInvalidConfig, "[model] settings differ from the saved base model");
    }
    if (c.precision != Precision::kF32) base = quantize_base(base, c.precision);
    s.adapters = load_adapters(adapters_path);
    for (const auto& a : s.adapters) {
      if (a.rank() != c.rank) {
        throw Error(ErrorCode::kAdapterMismatch, a.name + " has rank " + std::to_string(a.rank()) +
                                                     ", config says " + std::to_string(c.rank));
      }
      // Perturbing the singular values of a vanishing factor explores nothing.
      if (!a.decomposed() || a.svd_a->sigma(0) <= kMinTopSingularValue || a.svd_b->sigma(0) <= kMinTopSingularValue) {
        throw Error(ErrorCode::kNumericalBreakdown,
                    a.name + " has a degenerate factor (top singular value <= 1e-4); rerun sft with more steps");
      }
    }
    base.set_adapters(s.adapters);
    s.model = std::make_shared<const PolicyModel>(std::move(base));

    auto spec = std::make_shared<FitnessSpec>();
    spec->kind = FitnessKind::kAccuracyTask;
    spec->subset = c.subset;
    spec->dataset = prepare_data(c).align;
    spec->synthetic_delay_ms = c.synthetic_delay_ms;
    s.fitness = spec;

    auto evaluator = std::make_shared<TaskEvaluator>(s.fitness, s.model, s.adapters, c.top_percent);
    s.layout = evaluator->layout();
    s.evaluator = evaluator;
    s.initial = cma_init(s.layout.dim(), c.sigma0, c.population, c.master_seed);

    h.add(encode_model(*s.model)).add(encode_adapters(s.adapters));
    hash_fitness_spec(h, *s.fitness);
    h.add_f64(c.top_percent);
    for (const auto& e : s.layout.entries) {
      h.add(e.adapter).add_u64(static_cast<std::uint64_t>(e.factor)).add_u64(static_cast<std::uint64_t>(e.index));
    }
  }
  h.add_u64(s.initial.dim).add_f64(c.sigma0).add_u64(c.population).add_u64(c.master_seed);
  s.config_hash = h.finish();
  return s;
}

AlignSummary cmd_align(const RunConfig& c, const AlignOptions& options, std::ostream& log) {
  const fs::path out = c.output_dir;
  fs::create_directories(out);
  const AlignSetup setup = prepare_align(c, options.artifacts.value_or(out));
  write_text_atomic(out / "config.ini", to_ini(c));

  const auto state_path = out / "run_state.bin";
  const auto metrics_path = out / "metrics.csv";
  const auto subsets_path = out / "subsets.tsv";

  CmaState state = setup.initial;
  ResumeInfo resume;
  if (options.resume) {
    require_file(state_path, "nothing to resume");
    RunState saved = decode_run_state(read_file(state_path));
    if (saved.config_hash != setup.config_hash) {
      throw Error(ErrorCode::kConfigMismatch, "run state was written under a different configuration");
    }
    state = std::move(saved.cma);
    resume.history = std::move(saved.history);
    resume.best_candidate = std::move(saved.best_candidate);
    resume.best_reward = saved.best_reward;
    resume.best_generation = saved.best_generation;
    truncate_rows(metrics_path, state.generation, ',', true);
    truncate_rows(subsets_path, state.generation, '\t', false);
    log << "resuming at generation " << state.generation << "\n";
  }

  AppendFile metrics(metrics_path, !options.resume);
  AppendFile subsets(subsets_path, !options.resume);
  if (!options.resume) metrics.line(std::string(kMetricsHeader));

  RewardHistory history = resume.history;
  const bool task = setup.fitness != nullptr;
  // Best-so-far as of the last completed generation.
  std::optional<Vector> best_x = resume.best_candidate;
  double best_r = resume.best_reward;
  std::uint64_t best_g = resume.best_generation;
  const auto save_state = [&](const CmaState& cma) {
    RunState rs;
    rs.config_hash = setup.config_hash;
    rs.cma = cma;
    rs.history = history;
    rs.best_candidate = best_x;
    rs.best_reward = best_r;
    rs.best_generation = best_g;
    write_file_atomic(state_path, encode_run_state(rs));
    write_file_atomic(out / "cma.esck", checkpoint(cma));
  };

  RunHooks hooks;
  std::map<std::uint64_t, std::vector<std::size_t>> pending_subsets;
  hooks.subset_hash = [&](std::uint64_t g) -> std::string {
    if (!task) return "-";
    auto idx = subset_select(setup.fitness->subset, setup.fitness->dataset.size(), g);
    auto hash = subset_hash(idx);
    pending_subsets[g] = std::move(idx);
    return hash;
  };
  hooks.on_generation = [&](const CmaState& cma, const GenerationMetrics& m, const RunReport& report) {
    history.push_back(m.rewards);
    if (report.best_reward > best_r) {
      best_x = report.best_candidate;
      best_r = report.best_reward;
      best_g = report.best_generation;
    }
    metrics.line(std::to_string(m.generation) + "," + std::to_string(m.evaluations) + "," + format_reward(m.best) +
                 "," + format_reward(m.mean) + "," + format_reward(m.worst) + "," + std::to_string(m.wall_millis) +
                 "," + m.subset_hash);
    if (auto it = pending_subsets.find(m.generation); it != pending_subsets.end()) {
      std::string row = std::to_string(m.generation) + "\t" + m.subset_hash + "\t";
      for (std::size_t i = 0; i < it->second.size(); ++i) row += (i ? "," : "") + std::to_string(it->second[i]);
      subsets.line(row);
      pending_subsets.erase(it);
    }
    log << "gen " << m.generation << " best " << std::setprecision(4) << m.best << " mean " << m.mean
        << " sigma " << cma.step_size << "\n";
    if (cma.generation % c.checkpoint_every == 0) save_state(cma);
  };

  const ClusterConfig cluster = c.cluster();
  const auto evaluator = setup.evaluator;
  RunReport report;
  try {
    if (c.transport == TransportKind::kInProcess) {
      report = run_in_process(
          cluster, state, setup.initial, [evaluator](std::size_t) { return evaluator; }, setup.config_hash, hooks,
          resume);
    } else {
      report = run_socket(cluster, state, parse_endpoint(c.endpoint), c.accept_timeout, setup.config_hash, hooks,
                          resume, options.on_listening);
    }
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kNumericalBreakdown) {
      // The last completed generation is still consistent; keep it.
      state.awaiting_tell = false;
      save_state(state);
      log << "checkpointed generation " << state.generation << " before failing\n";
    }
    throw;
  }
  save_state(state);

  AlignSummary summary;
  summary.config_hash = to_hex(setup.config_hash);
  summary.population = c.population;
  summary.generations = state.generation;
  summary.evaluations = report.evaluations;
  summary.best_reward = report.best_reward;
  summary.best_generation = report.best_generation;
  summary.converged = report.converged;
  summary.final_sigma = state.step_size;

  if (task) {
    const auto& align = setup.fitness->dataset;
    const auto& model = *setup.model;
    const auto mean = std::span<const double>(state.mean.data(), static_cast<std::size_t>(state.mean.size()));
    const auto best = std::span<const double>(report.best_candidate.data(),
                                              static_cast<std::size_t>(report.best_candidate.size()));
    auto mean_pairs = apply_candidate(setup.adapters, setup.layout, mean);
    auto best_pairs = apply_candidate(setup.adapters, setup.layout, best);
    summary.baseline_accuracy = accuracy(model, stored_factors(setup.adapters), align, kernels::Exec::kParallel);
    summary.final_accuracy = accuracy(model, best_pairs, align, kernels::Exec::kParallel);
    summary.mean_accuracy = accuracy(model, mean_pairs, align, kernels::Exec::kParallel);
    save_adapters(out / "final_adapters.essa", to_adapters(setup.adapters, std::move(best_pairs)));
    save_adapters(out / "mean_adapters.essa", to_adapters(setup.adapters, std::move(mean_pairs)));
  }

  nlohmann::ordered_json j;
  j["config_hash"] = summary.config_hash;
  j["fitness"] = std::string(to_string(c.fitness));
  j["population"] = summary.population;
  j["generations"] = summary.generations;
  j["evaluations"] = summary.evaluations;
  j["best_reward"] = summary.best_reward;
  j["best_generation"] = summary.best_generation;
  j["converged"] = summary.converged;
  j["final_sigma"] = summary.final_sigma;
  if (task) {
    j["baseline_accuracy"] = *summary.baseline_accuracy;
    j["final_accuracy"] = *summary.final_accuracy;
    j["mean_accuracy"] = *summary.mean_accuracy;
  }
  write_text_atomic(out / "summary.json", j.dump(2) + "\n");

  log << "done: " << summary.generations << " generations, " << summary.evaluations << " evaluations, best reward "
      << summary.best_reward << "\n";
  if (task) {
    log << "alignment accuracy: baseline " << *summary.baseline_accuracy << ", final "
        << *summary.final_accuracy << ", CMA-ES mean " << *summary.mean_accuracy << "\n";
  }
  return summary;
}

std::vector<AlignSummary> cmd_population_sweep(const RunConfig& c, const std::vector<std::size_t>& populations,
                                               std::ostream& log) {
  std::vector<AlignSummary> summaries;
  std::vector<fs::path> dirs;
  for (auto p : populations) {
    RunConfig run = c;
    run.population = p;
    run.output_dir = c.output_dir / ("pop_" + std::to_string(p));
    validate(run);
    log << "population " << p << "\n";
    AlignOptions options;
    options.artifacts = c.output_dir;
    summaries.push_back(cmd_align(run, options, log));
    dirs.push_back(run.output_dir);
  }
  merge_metrics(dirs, c.output_dir / "sweep.csv");
  return summaries;
}

void cmd_worker(const RunConfig& c, const fs::path& artifacts, std::ostream& log) {
  const AlignSetup setup = prepare_align(c, artifacts);
  const auto endpoint = parse_endpoint(c.endpoint);
  auto conn = tcp_connect(endpoint);
  log << "connected to " << endpoint.host << ":" << endpoint.port << ", config " << to_hex(setup.config_hash).substr(0, 16)
      << "\n";
  worker_serve(*conn, *setup.evaluator, setup.initial, setup.config_hash);
  log << "shutdown received\n";
}

std::vector<BenchCase> default_bench_suite() {
  return {
      {"sphere-10", FitnessKind::kSphere, 10, 10, 0.5, 1.0, -1e-10, 2000},
      {"rosenbrock-5", FitnessKind::kRosenbrock, 5, default_population(5), 0.5, 0.0, -1e-8, 5000},
      {"rastrigin-2", FitnessKind::kRastrigin, 2, 100, 2.0, 3.0, -1e-8, 2000},
  };
}

BenchResult run_bench_case(const BenchCase& c, std::uint64_t seed) {
  BenchResult result;
  result.config = c;
  result.best = -std::numeric_limits<double>::infinity();
  const auto started = std::chrono::steady_clock::now();
  CmaState state = cma_init(c.dim, c.sigma0, c.lambda, seed, Vector::Constant(static_cast<Eigen::Index>(c.dim), c.mean0));
  try {
    while (result.generations < c.budget && result.best < c.target) {
      Generation gen = ask(state);
      for (std::size_t i = 0; i < gen.size(); ++i) {
        const auto& x = gen.candidates[i];
        const double r = evaluate_benchmark(c.kind, std::span(x.data(), static_cast<std::size_t>(x.size())));
        gen.rewards[i] = r;
        result.best = std::max(result.best, r);
      }
      tell(state, gen);
      ++result.generations;
      if (converged(state)) break;
    }
  } catch (const Error& e) {
    // A run stuck in a local optimum shrinks the covariance below rounding.
    if (e.code() != ErrorCode::kNumericalBreakdown) throw;
    result.breakdown = true;
  }
  result.passed = result.best >= c.target;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::string bench_json(const std::vector<BenchResult>& results) {
  nlohmann::ordered_json j;
  j["schema"] = "essa-bench/1";
  auto cases = nlohmann::ordered_json::array();
  bool all = true;
  for (const auto& r : results) {
    nlohmann::ordered_json item;
    item["name"] = r.config.name;
    item["function"] = std::string(to_string(r.config.kind));
    item["dim"] = r.config.dim;
    item["lambda"] = r.config.lambda;
    item["sigma0"] = r.config.sigma0;
    item["target"] = r.config.target;
    item["budget"] = r.config.budget;
    item["generations"] = r.generations;
    item["best"] = r.best;
    item["breakdown"] = r.breakdown;
    item["passed"] = r.passed;
    item["seconds"] = r.seconds;
    cases.push_back(std::move(item));
    all = all && r.passed;
  }
  j["cases"] = std::move(cases);
  j["passed"] = all;
  return j.dump(2);
}

void merge_metrics(const std::vector<fs::path>& inputs, const fs::path& output) {
  std::ostringstream merged;
  merged << "run," << kMetricsHeader << "\n";
  for (const auto& input : inputs) {
    const bool dir = fs::is_directory(input);
    const fs::path file = dir ? input / "metrics.csv" : input;
    const std::string label = dir ? input.filename().string() : input.parent_path().filename().string();
    std::ifstream in(file);
    if (!in) throw Error(ErrorCode::kIoError, "cannot read " + file.string());
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
      throw Error(ErrorCode::kInvalidConfig, file.string() + " is not a metrics file");
    }
    while (std::getline(in, line)) {
      if (!line.empty()) merged << label << "," << line << "\n";
    }
  }
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_text_atomic(output, merged.str());
}

}  // namespace essa
