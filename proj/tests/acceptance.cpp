// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Slow criteria run the real pipeline on committed configs
// and seeds.

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "essa/binary_io.hpp"
#include "essa/cmaes.hpp"
#include "essa/config.hpp"
#include "essa/fitness.hpp"
#include "essa/lowrank.hpp"
#include "essa/model.hpp"
#include "essa/pipeline.hpp"
#include "essa/rng.hpp"
#include "essa/scheduler.hpp"

namespace fs = std::filesystem;
using namespace essa;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("essa_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Matrix gaussian(int rows, int cols, CounterRng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (auto& v : m.reshaped()) v = scale * rng.normal();
  return m;
}

EvaluatorFactory shared(std::shared_ptr<const CandidateEvaluator> ev) {
  return [ev](std::size_t) { return ev; };
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

// Small MLP policy with random decomposed adapters of the given rank.
std::shared_ptr<const TaskEvaluator> mlp_task_evaluator(int rank) {
  Architecture arch;
  arch.kind = ArchKind::kMlp;
  arch.model_dim = 8;
  arch.layers = 2;
  arch.mlp_hidden = 64;
  arch.max_seq = 8;
  auto model = std::make_shared<PolicyModel>(PolicyModel::create(arch, 1));
  auto adapters = init_adapters(*model, rank, 0.1, 2);
  CounterRng rng(3, 0);
  for (auto& ad : adapters) ad.b = gaussian(ad.out_dim(), rank, rng, 0.05);
  decompose_all(adapters);
  auto spec = std::make_shared<FitnessSpec>();
  ArithmeticTaskSpec task;
  task.max_operand = 20;
  spec->dataset = generate_arithmetic(task, 1);
  spec->subset = {SubsetMode::kDynamic, 50, 1, false};
  return std::make_shared<TaskEvaluator>(spec, model, std::move(adapters), 40.0);
}

// ---------------------------------------------------------------------------

Verdict c1_cmaes() {
  const auto t0 = Clock::now();
  BenchCase sphere{"sphere-10", FitnessKind::kSphere, 10, 10, 0.5, 1.0, -1e-10, 2000};
  BenchCase rosen{"rosenbrock-5", FitnessKind::kRosenbrock, 5, default_population(5), 0.5, 0.0, -1e-8, 5000};
  const auto s = run_bench_case(sphere, 1);
  const auto r = run_bench_case(rosen, 1);
  const double secs = seconds_since(t0);
  return {s.passed && r.passed && secs < 10.0,
          fmt("sphere best %.3g in %zu gens, rosenbrock best %.3g in %zu gens, %.2fs", s.best, s.generations, r.best,
              r.generations, secs)};
}

Verdict c2_roundtrip() {
  CounterRng rng(2024, 0);
  const int ranks[] = {4, 8, 16, 32, 64};
  double worst_rt = 0.0, worst_pert = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int r = ranks[i % 5];
    const int m = 64 + static_cast<int>(rng.bounded(40));
    const int n = 64 + static_cast<int>(rng.bounded(40));
    LowRankAdapter ad;
    ad.name = "a" + std::to_string(i);
    ad.b = gaussian(m, r, rng);
    ad.a = gaussian(r, n, rng);
    std::vector<LowRankAdapter> ads{decompose(ad)};
    const auto layout = build_layout(ads, 40.0);
    std::vector<double> x(layout.dim(), 0.0);
    const auto same = apply_candidate(ads, layout, x);
    worst_rt = std::max(worst_rt, relative_error(delta_weight(same[0].b, same[0].a), ad.b * ad.a));

    // Rank-1 perturbation of the leading singular value of B.
    const double delta = 0.5 + rng.uniform();
    const auto it = std::find(layout.entries.begin(), layout.entries.end(), LayoutEntry{ad.name, Factor::kB, 0});
    x[static_cast<std::size_t>(it - layout.entries.begin())] = delta;
    const auto moved = apply_candidate(ads, layout, x);
    const Matrix oracle = delta * ads[0].svd_b->u.col(0) * ads[0].svd_b->vt.row(0);
    worst_pert = std::max(worst_pert, (moved[0].b - ad.b - oracle).cwiseAbs().maxCoeff());
    worst_pert = std::max(worst_pert, (moved[0].a - ad.a).cwiseAbs().maxCoeff());
  }
  return {worst_rt <= 1e-6 && worst_pert <= 1e-8,
          fmt("max relative reconstruction error %.2e, max rank-1 deviation %.2e", worst_rt, worst_pert)};
}

Verdict c3_transparency() {
  auto ev = mlp_task_evaluator(8);
  const auto initial = cma_init(ev->dim(), 0.3, 24, 42);
  auto run_with = [&](std::size_t n) {
    ClusterConfig cc;
    cc.population = 24;
    cc.workers = n;
    cc.epochs = 8;
    cc.convergence_threshold = 0.0;
    auto state = initial;
    const auto report = run_in_process(cc, state, initial, shared(ev), Digest{});
    std::vector<std::vector<double>> multisets;
    for (auto g : report.generations) {
      std::sort(g.rewards.begin(), g.rewards.end());
      multisets.push_back(g.rewards);
    }
    return std::make_pair(multisets, checkpoint(state));
  };
  const auto reference = run_with(1);
  std::string mismatched;
  for (std::size_t n : {2u, 3u, 4u, 6u, 8u}) {
    if (run_with(n) != reference) mismatched += " N=" + std::to_string(n);
  }
  return {mismatched.empty(), mismatched.empty() ? "N in {1,2,3,4,6,8}: 8 generations, checkpoints bitwise equal"
                                                 : "differs at" + mismatched};
}

Verdict c4_seed_only() {
  std::uint64_t bytes[2];
  std::size_t dims[2];
  const int ranks[2] = {4, 64};
  for (int k = 0; k < 2; ++k) {
    auto ev = mlp_task_evaluator(ranks[k]);
    dims[k] = ev->dim();
    ClusterConfig cc;
    cc.population = 16;
    cc.workers = 4;
    cc.epochs = 3;
    cc.convergence_threshold = 0.0;
    const auto initial = cma_init(ev->dim(), 0.3, 16, 7);
    auto state = initial;
    InProcessOptions opt;
    opt.counters = std::make_shared<ByteCounters>();
    run_in_process(cc, state, initial, shared(ev), Digest{}, {}, {}, opt);
    bytes[k] = opt.counters->payload_bytes();
  }
  const auto diff = static_cast<long long>(bytes[1]) - static_cast<long long>(bytes[0]);
  return {diff == 0 && dims[0] != dims[1],
          fmt("rank 4 (dim %zu): %llu payload bytes, rank 64 (dim %zu): %llu, difference %lld", dims[0],
              static_cast<unsigned long long>(bytes[0]), dims[1], static_cast<unsigned long long>(bytes[1]), diff)};
}

// Shared SFT run for criteria 5 and 7; precision only changes the align step.
struct TransformerRuns {
  fs::path dir;
  RunConfig config;
  double sft_seconds = 0.0;
};

TransformerRuns& transformer_runs() {
  static TransformerRuns runs = [] {
    TransformerRuns t;
    t.dir = scratch("transformer");
    t.config = load_config(fs::path(ESSA_CONFIG_DIR) / "arith_transformer.ini",
                           {{"output", "dir", (t.dir / "sft").string()}}, false);
    std::ostringstream log;
    const auto t0 = Clock::now();
    cmd_sft(t.config, log);
    t.sft_seconds = seconds_since(t0);
    return t;
  }();
  return runs;
}

struct AlignOutcome {
  AlignSummary summary;
  double seconds = 0.0;
};

AlignOutcome align_with(Precision p) {
  auto& t = transformer_runs();
  RunConfig c = t.config;
  c.precision = p;
  c.output_dir = t.dir / std::string(to_string(p));
  AlignOptions opt;
  opt.artifacts = t.dir / "sft";
  std::ostringstream log;
  const auto t0 = Clock::now();
  AlignOutcome out{cmd_align(c, opt, log), 0.0};
  out.seconds = seconds_since(t0);
  return out;
}

std::string describe(const AlignSummary& s) {
  return fmt("baseline %.4f -> best-seen %.4f (%+.4f), CMA mean %.4f", *s.baseline_accuracy, *s.final_accuracy,
             *s.final_accuracy - *s.baseline_accuracy, *s.mean_accuracy);
}

Verdict c5_alignment() {
  const auto out = align_with(Precision::kF32);
  const double gain = *out.summary.final_accuracy - *out.summary.baseline_accuracy;
  const double total = transformer_runs().sft_seconds + out.seconds;
  return {gain >= 0.05 && total < 300.0 && out.summary.generations <= 200,
          describe(out.summary) + fmt(", %llu generations, %.0fs", static_cast<unsigned long long>(out.summary.generations), total)};
}

// Rank 8 against rank 64 under the same SFT result: the rank-64 adapters are
// the rank-8 ones padded with gaussian A rows and zero B columns, so dW and
// the baseline are identical and only the search dimension differs.
LowRankAdapter pad_rank(const LowRankAdapter& ad, int rank, CounterRng& rng, double init_std) {
  LowRankAdapter out;
  out.name = ad.name;
  out.b = Matrix::Zero(ad.out_dim(), rank);
  out.b.leftCols(ad.rank()) = ad.b;
  out.a = gaussian(rank, ad.in_dim(), rng, init_std);
  out.a.topRows(ad.rank()) = ad.a;
  return out;
}

Verdict c6_dimensionality() {
  RunConfig c = transformer_runs().config;
  c.arch.model_dim = 64;
  c.sft = {8000, 0.1, false, 16, 11};
  const auto data = prepare_data(c);
  auto base = PolicyModel::create(c.arch, c.model_seed);
  base.set_adapters(init_adapters(base, 8, c.init_std, c.adapter_seed));
  const auto sft = sft_train(base, data.sft, c.sft);
  const auto model = std::make_shared<const PolicyModel>(base);
  auto spec = std::make_shared<FitnessSpec>();
  spec->dataset = data.align;
  spec->subset = c.subset;

  const std::size_t generations = 100;
  double mean_acc[2] = {0.0, 0.0};
  double baseline[2] = {0.0, 0.0};
  std::size_t dims[2] = {0, 0};
  const int ranks[2] = {8, 64};
  for (int k = 0; k < 2; ++k) {
    std::vector<LowRankAdapter> ads;
    CounterRng rng(c.adapter_seed, 64);
    for (const auto& ad : sft.adapters) ads.push_back(ranks[k] == 8 ? ad : pad_rank(ad, ranks[k], rng, c.init_std));
    decompose_all(ads);
    auto ev = std::make_shared<TaskEvaluator>(spec, model, ads, c.top_percent);
    dims[k] = ev->dim();
    baseline[k] = accuracy(*model, stored_factors(ev->adapters()), data.align, kernels::Exec::kParallel);
    ClusterConfig cc;
    cc.population = c.population;
    cc.epochs = generations;
    cc.convergence_threshold = 0.0;
    const auto initial = cma_init(ev->dim(), c.sigma0, c.population, c.master_seed);
    auto state = initial;
    run_in_process(cc, state, initial, shared(ev), Digest{});
    mean_acc[k] = accuracy(*model, apply_candidate(ev->adapters(), ev->layout(), to_vec(state.mean)), data.align,
                           kernels::Exec::kParallel);
  }
  return {mean_acc[1] <= mean_acc[0],
          fmt("%zu evaluations each; rank 8 (dim %zu) %.4f -> %.4f, rank 64 (dim %zu) %.4f -> %.4f",
              generations * c.population, dims[0], baseline[0], mean_acc[0], dims[1], baseline[1], mean_acc[1])};
}

Verdict c7_quantized() {
  const auto q8 = align_with(Precision::kSimInt8);
  const auto q4 = align_with(Precision::kSimInt4);
  const double g8 = *q8.summary.final_accuracy - *q8.summary.baseline_accuracy;
  const double g4 = *q4.summary.final_accuracy - *q4.summary.baseline_accuracy;
  return {g8 >= 0.05 && g4 >= 0.03, "int8 " + describe(q8.summary) + "; int4 " + describe(q4.summary)};
}

Verdict c8_scaling() {
  ScalingOptions opt;
  opt.worker_counts = {1, 8};
  opt.population = 64;
  opt.generations = 3;
  auto ev = std::make_shared<BenchmarkEvaluator>(FitnessKind::kSphere, 10, 50.0);
  const auto initial = cma_init(10, 0.5, 64, 1, Vector::Ones(10));
  const auto rows = measure_scaling(opt, initial, shared(ev), Digest{});
  return {rows[1].efficiency >= 0.7,
          fmt("N=1 %.2fs, N=8 %.2fs, speedup %.2f, efficiency %.3f", rows[0].seconds, rows[1].seconds, rows[1].speedup,
              rows[1].efficiency)};
}

int run_cli(const std::vector<std::string>& args) {
  std::string cmd = ESSA_CLI_PATH;
  for (const auto& a : args) cmd += " '" + a + "'";
  cmd += " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream f(p);
  return static_cast<std::size_t>(std::count(std::istreambuf_iterator<char>(f), {}, '\n'));
}

Verdict c9_resume() {
  const auto root = scratch("resume");
  const std::string config = std::string(ESSA_CONFIG_DIR) + "/arith_mlp_fast.ini";
  auto args = [&](const char* verb, const fs::path& dir) {
    return std::vector<std::string>{verb, "-c", config, "--output-dir", dir.string(), "--synthetic-delay-ms", "3"};
  };
  const auto whole = root / "uninterrupted", killed = root / "killed";
  if (run_cli(args("sft", whole)) != 0 || run_cli(args("sft", killed)) != 0) return {false, "sft failed"};
  if (run_cli(args("align", whole)) != 0) return {false, "uninterrupted align failed"};

  auto argv_s = args("align", killed);
  argv_s.insert(argv_s.begin(), ESSA_CLI_PATH);
  const pid_t pid = fork();
  if (pid == 0) {
    std::vector<char*> argv;
    for (auto& s : argv_s) argv.push_back(s.data());
    argv.push_back(nullptr);
    const int devnull = ::open("/dev/null", O_WRONLY);
    ::dup2(devnull, 1);
    ::dup2(devnull, 2);
    ::execv(argv[0], argv.data());
    _exit(127);
  }
  // Kill between checkpoints, after the third one.
  const auto deadline = Clock::now() + std::chrono::seconds(60);
  std::size_t rows = 0;
  while ((rows = line_count(killed / "metrics.csv")) < 36 && Clock::now() < deadline) {
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ::kill(pid, SIGKILL);
  int status = 0;
  ::waitpid(pid, &status, 0);
  const bool was_killed = WIFSIGNALED(status);
  const auto rows_at_kill = line_count(killed / "metrics.csv") - 1;

  auto resume = args("align", killed);
  resume.push_back("--resume");
  if (run_cli(resume) != 0) return {false, "resume failed"};
  const bool same_ckpt = read_file(whole / "cma.esck") == read_file(killed / "cma.esck");
  const bool same_adapters = read_file(whole / "final_adapters.essa") == read_file(killed / "final_adapters.essa");
  return {was_killed && same_ckpt && same_adapters,
          fmt("SIGKILL after %zu generations; cma.esck %s, final_adapters.essa %s", rows_at_kill,
              same_ckpt ? "identical" : "DIFFERS", same_adapters ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    const char* id;
    const char* name;
    std::function<Verdict()> check;
  };
  const std::vector<Criterion> all{
      {"C1", "CMA-ES correctness", c1_cmaes},
      {"C2", "SVD/adapter round-trip", c2_roundtrip},
      {"C3", "worker-count transparency", c3_transparency},
      {"C4", "seed-only communication", c4_seed_only},
      {"C5", "end-to-end alignment", c5_alignment},
      {"C6", "dimensionality trend", c6_dimensionality},
      {"C7", "quantization robustness", c7_quantized},
      {"C8", "scaling efficiency", c8_scaling},
      {"C9", "checkpoint/resume", c9_resume},
  };
  // Optional filter: criterion ids to run, e.g. `essa_acceptance C1 C9`.
  std::vector<std::string> only(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::printf("%s %s %s: %s [%.1fs]\n", v.pass ? "PASS" : "FAIL", c.id, c.name, v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
