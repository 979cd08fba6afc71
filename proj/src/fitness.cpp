#include "essa/fitness.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <thread>

#include "essa/error.hpp"
#include "essa/rng.hpp"

namespace essa {
namespace {

std::vector<std::size_t> shuffled_prefix(CounterRng rng, std::size_t n, std::size_t size) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.bounded(i)]);
  perm.resize(size);
  return perm;
}

void synthetic_delay(double ms) {
  if (ms > 0.0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

}  // namespace

std::string_view to_string(FitnessKind k) {
  switch (k) {
    case FitnessKind::kAccuracyTask: return "accuracy";
    case FitnessKind::kSphere: return "sphere";
    case FitnessKind::kRosenbrock: return "rosenbrock";
    case FitnessKind::kRastrigin: return "rastrigin";
  }
  return "unknown";
}

FitnessKind parse_fitness_kind(std::string_view s) {
  for (auto k : {FitnessKind::kAccuracyTask, FitnessKind::kSphere, FitnessKind::kRosenbrock, FitnessKind::kRastrigin}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown fitness kind '" + std::string(s) + "'");
}

std::string_view to_string(SubsetMode m) { return m == SubsetMode::kFixed ? "fixed" : "dynamic"; }

SubsetMode parse_subset_mode(std::string_view s) {
  if (s == "fixed") return SubsetMode::kFixed;
  if (s == "dynamic") return SubsetMode::kDynamic;
  throw Error(ErrorCode::kInvalidConfig, "unknown subset policy '" + std::string(s) + "'");
}

std::vector<std::size_t> subset_select(const SubsetPolicy& policy, std::size_t dataset_size,
                                       std::uint64_t generation, std::uint64_t candidate) {
  if (policy.size == 0) throw Error(ErrorCode::kInvalidConfig, "subset size must be positive");
  if (policy.size > dataset_size) {
    throw Error(ErrorCode::kInvalidConfig, "subset size " + std::to_string(policy.size) + " exceeds dataset size " +
                                               std::to_string(dataset_size));
  }
  if (policy.mode == SubsetMode::kFixed) return shuffled_prefix(CounterRng(0, 0), dataset_size, policy.size);
  if (policy.per_candidate) {
    return shuffled_prefix(CounterRng(derive_seed(policy.seed, generation, candidate), 1), dataset_size, policy.size);
  }
  return shuffled_prefix(CounterRng(policy.seed, generation), dataset_size, policy.size);
}

std::string subset_hash(std::span<const std::size_t> indices) {
  Sha256Builder h;
  for (auto i : indices) h.add_u64(i);
  return to_hex(h.finish()).substr(0, 16);
}

double sphere(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

double rosenbrock(std::span<const double> x) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double a = x[i + 1] - x[i] * x[i];
    const double b = 1.0 - x[i];
    s += 100.0 * a * a + b * b;
  }
  return s;
}

double rastrigin(std::span<const double> x) {
  double s = 10.0 * static_cast<double>(x.size());
  for (double v : x) s += v * v - 10.0 * std::cos(2.0 * std::numbers::pi * v);
  return s;
}

double evaluate_benchmark(FitnessKind kind, std::span<const double> x) {
  switch (kind) {
    case FitnessKind::kSphere: return -sphere(x);
    case FitnessKind::kRosenbrock: return -rosenbrock(x);
    case FitnessKind::kRastrigin: return -rastrigin(x);
    case FitnessKind::kAccuracyTask: break;
  }
  throw Error(ErrorCode::kInvalidConfig, "accuracy task is not a benchmark function");
}

double evaluate(const FitnessSpec& spec, const PolicyModel& model, std::span<const FactorPair> overrides,
                std::uint64_t generation, std::uint64_t candidate, kernels::Exec exec) {
  if (spec.kind != FitnessKind::kAccuracyTask) {
    throw Error(ErrorCode::kInvalidConfig, "evaluate() needs an accuracy task; use evaluate_benchmark");
  }
  if (spec.dataset.empty()) throw Error(ErrorCode::kInvalidConfig, "empty alignment dataset");
  const auto indices = subset_select(spec.subset, spec.dataset.size(), generation, candidate);
  const InferenceSession session(model, overrides);
  const auto correct = count_correct(session, spec.dataset, indices, exec);
  synthetic_delay(spec.synthetic_delay_ms);
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

TaskEvaluator::TaskEvaluator(std::shared_ptr<const FitnessSpec> spec, std::shared_ptr<const PolicyModel> model,
                             std::vector<LowRankAdapter> adapters, double top_percent, kernels::Exec exec)
    : spec_(std::move(spec)), model_(std::move(model)), adapters_(std::move(adapters)), exec_(exec) {
  layout_ = build_layout(adapters_, top_percent);
}

double TaskEvaluator::operator()(std::span<const double> x, std::uint64_t generation, std::uint64_t candidate) const {
  const auto factors = apply_candidate(adapters_, layout_, x);
  return evaluate(*spec_, *model_, factors, generation, candidate, exec_);
}

BenchmarkEvaluator::BenchmarkEvaluator(FitnessKind kind, std::size_t dim, double synthetic_delay_ms)
    : kind_(kind), dim_(dim), delay_ms_(synthetic_delay_ms) {
  if (kind == FitnessKind::kAccuracyTask) throw Error(ErrorCode::kInvalidConfig, "not a benchmark function");
  if (dim == 0) throw Error(ErrorCode::kInvalidConfig, "benchmark dimension must be positive");
}

double BenchmarkEvaluator::operator()(std::span<const double> x, std::uint64_t, std::uint64_t) const {
  if (x.size() != dim_) throw Error(ErrorCode::kLayoutMismatch, "candidate has the wrong dimension");
  synthetic_delay(delay_ms_);
  return evaluate_benchmark(kind_, x);
}

void hash_fitness_spec(Sha256Builder& h, const FitnessSpec& spec) {
  h.add("fitness");
  h.add_u64(static_cast<std::uint64_t>(spec.kind));
  h.add_u64(static_cast<std::uint64_t>(spec.subset.mode));
  h.add_u64(spec.subset.size);
  h.add_u64(spec.subset.seed);
  h.add_u64(spec.subset.per_candidate ? 1 : 0);
  h.add_f64(spec.synthetic_delay_ms);
  h.add_u64(spec.dataset.size());
  for (const auto& ex : spec.dataset) {
    h.add(ex.prompt_text);
    h.add(ex.answer);
  }
}

}  // namespace essa
