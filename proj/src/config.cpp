#include "essa/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "essa/error.hpp"

namespace essa {
namespace {

namespace pt = boost::property_tree;

[[noreturn]] void bad(const std::string& key, const std::string& why) {
  throw Error(ErrorCode::kInvalidConfig, key + ": " + why);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// Reads typed values out of a section and remembers which keys were used.
class Section {
 public:
  Section(const pt::ptree* tree, std::string name) : tree_(tree), name_(std::move(name)) {}

  bool has(const std::string& key) {
    seen_.insert(key);
    return tree_ != nullptr && tree_->find(key) != tree_->not_found();
  }

  std::string raw(const std::string& key) { return trim(tree_->get<std::string>(key)); }

  void str(const std::string& key, std::string& out) {
    if (has(key)) out = raw(key);
  }

  void path(const std::string& key, std::filesystem::path& out) {
    if (has(key)) out = raw(key);
  }

  template <typename T>
  void integer(const std::string& key, T& out) {
    if (!has(key)) return;
    const auto text = raw(key);
    T value{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || end != text.data() + text.size()) bad(full(key), "expected an integer, got '" + text + "'");
    out = value;
  }

  void real(const std::string& key, double& out) {
    if (!has(key)) return;
    const auto text = raw(key);
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size()) bad(full(key), "expected a number, got '" + text + "'");
    out = v;
  }

  void boolean(const std::string& key, bool& out) {
    if (!has(key)) return;
    const auto text = raw(key);
    if (text == "true" || text == "1" || text == "yes") {
      out = true;
    } else if (text == "false" || text == "0" || text == "no") {
      out = false;
    } else {
      bad(full(key), "expected true or false, got '" + text + "'");
    }
  }

  void millis(const std::string& key, std::chrono::milliseconds& out) {
    long long v = out.count();
    integer(key, v);
    out = std::chrono::milliseconds(v);
  }

  void reject_unknown() const {
    if (tree_ == nullptr) return;
    for (const auto& [key, _] : *tree_) {
      if (!seen_.contains(key)) bad(full(key), "unknown key");
    }
  }

  std::string full(const std::string& key) const { return "[" + name_ + "] " + key; }

 private:
  const pt::ptree* tree_;
  std::string name_;
  std::set<std::string> seen_;
};

Precision parse_precision(const std::string& s) {
  if (s == "f32") return Precision::kF32;
  if (s == "int8") return Precision::kSimInt8;
  if (s == "int4") return Precision::kSimInt4;
  bad("[model] precision", "expected f32, int8 or int4, got '" + s + "'");
}

ArchKind parse_arch(const std::string& s) {
  if (s == "transformer") return ArchKind::kTransformer;
  if (s == "mlp") return ArchKind::kMlp;
  bad("[model] arch", "expected transformer or mlp, got '" + s + "'");
}

TaskSource parse_source(const std::string& s) {
  if (s == "arithmetic") return TaskSource::kArithmetic;
  if (s == "files") return TaskSource::kFiles;
  bad("[task] source", "expected arithmetic or files, got '" + s + "'");
}

template <typename F>
auto wrap(const std::string& key, F&& parse) {
  try {
    return parse();
  } catch (const Error& e) {
    bad(key, e.what());
  }
}

RunConfig from_tree(const pt::ptree& root) {
  static const std::set<std::string> kSections{"task", "model", "lora", "es", "cluster", "output"};
  for (const auto& [name, sub] : root) {
    if (!kSections.contains(name)) bad("[" + name + "]", "unknown section");
    if (!sub.data().empty()) bad(name, "keys must live inside a section");
  }
  auto section = [&root](const std::string& name) {
    const auto it = root.find(name);
    return Section(it == root.not_found() ? nullptr : &it->second, name);
  };

  RunConfig c;
  std::string text;

  auto task = section("task");
  if (task.has("source")) c.source = parse_source(task.raw("source"));
  task.integer("max_operand", c.arithmetic.max_operand);
  if (task.has("op")) {
    text = task.raw("op");
    if (text.size() != 1) bad("[task] op", "expected one of + - *");
    c.arithmetic.op = text[0];
  }
  task.boolean("pad_operands", c.arithmetic.pad_operands);
  task.integer("data_seed", c.data_seed);
  task.integer("sft_count", c.sft_count);
  task.integer("align_count", c.align_count);
  task.path("sft_file", c.sft_file);
  task.path("align_file", c.align_file);
  task.reject_unknown();

  auto model = section("model");
  if (model.has("arch")) c.arch.kind = parse_arch(model.raw("arch"));
  model.integer("model_dim", c.arch.model_dim);
  model.integer("heads", c.arch.heads);
  model.integer("layers", c.arch.layers);
  model.integer("mlp_hidden", c.arch.mlp_hidden);
  model.integer("max_seq", c.arch.max_seq);
  model.integer("seed", c.model_seed);
  if (model.has("precision")) c.precision = parse_precision(model.raw("precision"));
  model.reject_unknown();

  auto lora = section("lora");
  lora.integer("rank", c.rank);
  lora.real("init_std", c.init_std);
  lora.integer("seed", c.adapter_seed);
  lora.integer("sft_steps", c.sft.steps);
  lora.real("sft_learning_rate", c.sft.learning_rate);
  lora.boolean("sft_linear_decay", c.sft.linear_decay);
  lora.integer("sft_batch_size", c.sft.batch_size);
  lora.integer("sft_seed", c.sft.seed);
  lora.reject_unknown();

  auto es = section("es");
  es.real("top_percent", c.top_percent);
  es.integer("population", c.population);
  es.integer("epochs", c.epochs);
  es.real("sigma0", c.sigma0);
  es.integer("master_seed", c.master_seed);
  if (es.has("fitness")) c.fitness = wrap("[es] fitness", [&] { return parse_fitness_kind(es.raw("fitness")); });
  es.integer("benchmark_dim", c.benchmark_dim);
  if (es.has("subset")) c.subset.mode = wrap("[es] subset", [&] { return parse_subset_mode(es.raw("subset")); });
  es.integer("subset_size", c.subset.size);
  es.integer("subset_seed", c.subset.seed);
  es.boolean("per_candidate_subsets", c.subset.per_candidate);
  es.integer("checkpoint_every", c.checkpoint_every);
  es.real("synthetic_delay_ms", c.synthetic_delay_ms);
  es.real("convergence_threshold", c.convergence_threshold);
  es.reject_unknown();

  auto cluster = section("cluster");
  cluster.integer("workers", c.workers);
  if (cluster.has("transport")) {
    c.transport = wrap("[cluster] transport", [&] { return parse_transport(cluster.raw("transport")); });
  }
  cluster.str("endpoint", c.endpoint);
  cluster.millis("job_timeout_ms", c.job_timeout);
  cluster.millis("accept_timeout_ms", c.accept_timeout);
  cluster.reject_unknown();

  auto output = section("output");
  output.path("dir", c.output_dir);
  output.reject_unknown();
  return c;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string_view precision_key(Precision p) { return to_string(p); }

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"task", "source", "source", "arithmetic or files"},
      {"task", "max_operand", "max-operand", "largest arithmetic operand"},
      {"task", "op", "op", "arithmetic operator: + - *"},
      {"task", "pad_operands", "pad-operands", "zero-pad operands to a fixed width"},
      {"task", "data_seed", "data-seed", "shuffle seed of the generated problems"},
      {"task", "sft_count", "sft-count", "examples in the SFT split"},
      {"task", "align_count", "align-count", "examples in the alignment split"},
      {"task", "sft_file", "sft-file", "SFT split (prompt TAB answer) for source = files"},
      {"task", "align_file", "align-file", "alignment split for source = files"},
      {"model", "arch", "arch", "transformer or mlp"},
      {"model", "model_dim", "model-dim", "embedding width"},
      {"model", "heads", "heads", "attention heads"},
      {"model", "layers", "layers", "blocks"},
      {"model", "mlp_hidden", "mlp-hidden", "hidden width of the feed-forward layers"},
      {"model", "max_seq", "max-seq", "context length"},
      {"model", "seed", "model-seed", "seed of the frozen base weights"},
      {"model", "precision", "precision", "f32, int8 or int4 base weights during alignment"},
      {"lora", "rank", "rank", "adapter rank"},
      {"lora", "init_std", "init-std", "standard deviation of the initial A factor"},
      {"lora", "seed", "adapter-seed", "seed of the initial adapters"},
      {"lora", "sft_steps", "steps", "SFT optimizer steps"},
      {"lora", "sft_learning_rate", "learning-rate", "SFT learning rate"},
      {"lora", "sft_linear_decay", "linear-decay", "decay the SFT learning rate linearly to zero"},
      {"lora", "sft_batch_size", "batch-size", "SFT minibatch size"},
      {"lora", "sft_seed", "sft-seed", "seed of the SFT minibatch order"},
      {"es", "top_percent", "top-percent", "percent of singular values perturbed per factor"},
      {"es", "population", "population", "candidates per generation"},
      {"es", "epochs", "epochs", "generations"},
      {"es", "sigma0", "sigma0", "initial CMA-ES step size"},
      {"es", "master_seed", "master-seed", "seed of every candidate"},
      {"es", "fitness", "fitness", "accuracy, sphere, rosenbrock or rastrigin"},
      {"es", "benchmark_dim", "benchmark-dim", "dimension of the benchmark functions"},
      {"es", "subset", "subset", "fixed or dynamic evaluation subsets"},
      {"es", "subset_size", "subset-size", "examples per evaluation subset"},
      {"es", "subset_seed", "subset-seed", "seed of the dynamic subsets"},
      {"es", "per_candidate_subsets", "per-candidate-subsets", "fresh subset for every candidate"},
      {"es", "checkpoint_every", "checkpoint-every", "generations between checkpoints"},
      {"es", "synthetic_delay_ms", "synthetic-delay-ms", "extra wall time per evaluation"},
      {"es", "convergence_threshold", "convergence-threshold", "stop once sigma * max(D) is below this"},
      {"cluster", "workers", "workers", "worker count"},
      {"cluster", "transport", "transport", "inprocess or socket"},
      {"cluster", "endpoint", "endpoint", "host:port of the coordinator"},
      {"cluster", "job_timeout_ms", "job-timeout-ms", "per-job deadline before a worker is dropped"},
      {"cluster", "accept_timeout_ms", "accept-timeout-ms", "how long the coordinator waits for workers"},
      {"output", "dir", "output-dir", "directory for every artifact"},
  };
  return keys;
}

ClusterConfig RunConfig::cluster() const {
  ClusterConfig cc;
  cc.population = population;
  cc.workers = workers;
  cc.epochs = epochs;
  cc.transport = transport;
  cc.job_timeout = job_timeout;
  cc.convergence_threshold = convergence_threshold;
  return cc;
}

void apply_env_overrides(RunConfig& c) {
  if (const char* seed = std::getenv("ESSA_MASTER_SEED"); seed != nullptr && *seed != '\0') {
    std::uint64_t v = 0;
    const std::string_view text(seed);
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size()) bad("ESSA_MASTER_SEED", "expected an integer");
    c.master_seed = v;
  }
  if (const char* dir = std::getenv("ESSA_OUTPUT_DIR"); dir != nullptr && *dir != '\0') c.output_dir = dir;
}

void validate(const RunConfig& c) {
  validate(c.cluster());
  validate(c.arch);
  if (!(c.top_percent > 0.0 && c.top_percent <= 100.0)) bad("[es] top_percent", "must be in (0, 100]");
  if (!(c.sigma0 > 0.0) || !std::isfinite(c.sigma0)) bad("[es] sigma0", "must be positive");
  if (c.population < 2) bad("[es] population", "must be at least 2");
  if (c.checkpoint_every == 0) bad("[es] checkpoint_every", "must be at least 1");
  if (c.synthetic_delay_ms < 0.0) bad("[es] synthetic_delay_ms", "must be non-negative");
  if (c.job_timeout.count() <= 0) bad("[cluster] job_timeout_ms", "must be positive");
  if (c.transport == TransportKind::kSocket) parse_endpoint(c.endpoint);
  if (c.fitness != FitnessKind::kAccuracyTask) {
    if (c.benchmark_dim == 0) bad("[es] benchmark_dim", "must be positive");
    return;
  }
  if (c.rank < 1) bad("[lora] rank", "must be positive");
  if (!(c.init_std > 0.0)) bad("[lora] init_std", "must be positive");
  if (c.sft.batch_size == 0) bad("[lora] sft_batch_size", "must be positive");
  if (!(c.sft.learning_rate > 0.0)) bad("[lora] sft_learning_rate", "must be positive");
  const int smallest = c.arch.kind == ArchKind::kTransformer ? c.arch.model_dim
                                                             : std::min(c.arch.mlp_hidden, c.arch.model_dim * c.arch.max_seq);
  if (c.rank > smallest) {
    bad("[lora] rank", std::to_string(c.rank) + " exceeds the smallest adapted dimension " + std::to_string(smallest));
  }
  if (c.subset.size == 0) bad("[es] subset_size", "must be positive");
  if (c.source == TaskSource::kArithmetic) {
    const auto total = static_cast<std::size_t>(c.arithmetic.max_operand + 1) *
                       static_cast<std::size_t>(c.arithmetic.max_operand + 1);
    if (c.sft_count + c.align_count > total) {
      bad("[task] sft_count", "sft_count + align_count exceeds the " + std::to_string(total) + " distinct problems");
    }
    if (c.subset.size > c.align_count) bad("[es] subset_size", "exceeds align_count");
  } else if (c.sft_file.empty() || c.align_file.empty()) {
    bad("[task] sft_file", "files source needs sft_file and align_file");
  }
}

RunConfig parse_config(const std::string& text, const ConfigOverrides& overrides, bool apply_env) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("malformed config: ") + e.message() + " at line " +
                                               std::to_string(e.line()));
  }
  for (const auto& o : overrides) {
    tree.put(pt::ptree::path_type(o.section + "/" + o.key, '/'), o.value);
  }
  RunConfig c = from_tree(tree);
  if (apply_env) apply_env_overrides(c);
  validate(c);
  return c;
}

RunConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides, bool apply_env) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  RunConfig c = parse_config(text.str(), overrides, apply_env);
  // Relative data paths are relative to the config file.
  for (auto* p : {&c.sft_file, &c.align_file}) {
    if (!p->empty() && p->is_relative()) *p = path.parent_path() / *p;
  }
  return c;
}

std::string to_ini(const RunConfig& c) {
  std::ostringstream o;
  o << "[task]\n"
    << "source = " << (c.source == TaskSource::kArithmetic ? "arithmetic" : "files") << "\n"
    << "max_operand = " << c.arithmetic.max_operand << "\n"
    << "op = " << c.arithmetic.op << "\n"
    << "pad_operands = " << (c.arithmetic.pad_operands ? "true" : "false") << "\n"
    << "data_seed = " << c.data_seed << "\n"
    << "sft_count = " << c.sft_count << "\n"
    << "align_count = " << c.align_count << "\n";
  if (!c.sft_file.empty()) o << "sft_file = " << c.sft_file.string() << "\n";
  if (!c.align_file.empty()) o << "align_file = " << c.align_file.string() << "\n";
  o << "\n[model]\n"
    << "arch = " << to_string(c.arch.kind) << "\n"
    << "model_dim = " << c.arch.model_dim << "\n"
    << "heads = " << c.arch.heads << "\n"
    << "layers = " << c.arch.layers << "\n"
    << "mlp_hidden = " << c.arch.mlp_hidden << "\n"
    << "max_seq = " << c.arch.max_seq << "\n"
    << "seed = " << c.model_seed << "\n"
    << "precision = " << precision_key(c.precision) << "\n"
    << "\n[lora]\n"
    << "rank = " << c.rank << "\n"
    << "init_std = " << fmt(c.init_std) << "\n"
    << "seed = " << c.adapter_seed << "\n"
    << "sft_steps = " << c.sft.steps << "\n"
    << "sft_learning_rate = " << fmt(c.sft.learning_rate) << "\n"
    << "sft_linear_decay = " << (c.sft.linear_decay ? "true" : "false") << "\n"
    << "sft_batch_size = " << c.sft.batch_size << "\n"
    << "sft_seed = " << c.sft.seed << "\n"
    << "\n[es]\n"
    << "top_percent = " << fmt(c.top_percent) << "\n"
    << "population = " << c.population << "\n"
    << "epochs = " << c.epochs << "\n"
    << "sigma0 = " << fmt(c.sigma0) << "\n"
    << "master_seed = " << c.master_seed << "\n"
    << "fitness = " << to_string(c.fitness) << "\n"
    << "benchmark_dim = " << c.benchmark_dim << "\n"
    << "subset = " << to_string(c.subset.mode) << "\n"
    << "subset_size = " << c.subset.size << "\n"
    << "subset_seed = " << c.subset.seed << "\n"
    << "per_candidate_subsets = " << (c.subset.per_candidate ? "true" : "false") << "\n"
    << "checkpoint_every = " << c.checkpoint_every << "\n"
    << "synthetic_delay_ms = " << fmt(c.synthetic_delay_ms) << "\n"
    << "convergence_threshold = " << fmt(c.convergence_threshold) << "\n"
    << "\n[cluster]\n"
    << "workers = " << c.workers << "\n"
    << "transport = " << to_string(c.transport) << "\n"
    << "endpoint = " << c.endpoint << "\n"
    << "job_timeout_ms = " << c.job_timeout.count() << "\n"
    << "accept_timeout_ms = " << c.accept_timeout.count() << "\n"
    << "\n[output]\n"
    << "dir = " << c.output_dir.string() << "\n";
  return o.str();
}

}  // namespace essa
