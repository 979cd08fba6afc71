#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>

#include "essa/config.hpp"
#include "essa/error.hpp"
#include "test_util.hpp"

using namespace essa;

namespace {

// Sets an environment variable for the lifetime of the guard.
class EnvGuard {
 public:
  EnvGuard(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~EnvGuard() { ::unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST_CASE("empty text yields the defaults") {
  const auto c = parse_config("", {}, false);
  CHECK(c.rank == 8);
  CHECK(c.top_percent == 40.0);
  CHECK(c.subset.mode == SubsetMode::kDynamic);
  CHECK(c.subset.size == 100);
  CHECK(c.arch.kind == ArchKind::kTransformer);
}

TEST_CASE("values are read from their sections") {
  const auto c = parse_config(
      "[model]\narch = mlp\nmodel_dim = 16\nprecision = int4\n"
      "[es]\npopulation = 24\nsigma0 = 0.25\nsubset = fixed\n"
      "[cluster]\nworkers = 3\ntransport = socket\njob_timeout_ms = 500\n",
      {}, false);
  CHECK(c.arch.kind == ArchKind::kMlp);
  CHECK(c.arch.model_dim == 16);
  CHECK(c.precision == Precision::kSimInt4);
  CHECK(c.population == 24);
  CHECK(c.sigma0 == 0.25);
  CHECK(c.subset.mode == SubsetMode::kFixed);
  CHECK(c.workers == 3);
  CHECK(c.transport == TransportKind::kSocket);
  CHECK(c.job_timeout == std::chrono::milliseconds(500));
  CHECK(c.cluster().population == 24);
}

TEST_CASE("unknown or malformed entries are rejected") {
  CHECK(test::error_code([] { parse_config("[es]\npopulaton = 3\n", {}, false); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { parse_config("[extra]\na = 1\n", {}, false); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { parse_config("[es]\npopulation = many\n", {}, false); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { parse_config("[es]\nsigma0 = 0.3x\n", {}, false); }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { parse_config("[model]\nprecision = fp8\n", {}, false); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("cross-field checks") {
  // P mod N
  CHECK(test::error_code([] { parse_config("[es]\npopulation = 10\n[cluster]\nworkers = 4\n", {}, false); }) ==
        ErrorCode::kInvalidCluster);
  // rank above the smallest adapted dimension
  CHECK(test::error_code([] { parse_config("[lora]\nrank = 64\n", {}, false); }) == ErrorCode::kInvalidConfig);
  // more examples requested than problems exist
  CHECK(test::error_code([] {
          parse_config("[task]\nmax_operand = 9\nsft_count = 50\nalign_count = 51\n", {}, false);
        }) == ErrorCode::kInvalidConfig);
  CHECK(test::error_code([] { parse_config("[es]\ntop_percent = 0\n", {}, false); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("overrides beat the file and the environment beats both") {
  const std::string text = "[es]\nmaster_seed = 2\npopulation = 8\n[output]\ndir = a\n";
  const ConfigOverrides over{{"es", "master_seed", "3"}, {"es", "population", "16"}};
  CHECK(parse_config(text, over, false).master_seed == 3);
  CHECK(parse_config(text, over, false).population == 16);
  EnvGuard seed("ESSA_MASTER_SEED", "99");
  EnvGuard dir("ESSA_OUTPUT_DIR", "/tmp/elsewhere");
  const auto c = parse_config(text, over, true);
  CHECK(c.master_seed == 99);
  CHECK(c.output_dir == "/tmp/elsewhere");
  CHECK(parse_config(text, over, false).master_seed == 3);
  EnvGuard bad("ESSA_MASTER_SEED", "x1");
  CHECK(test::error_code([&] { parse_config(text, {}, true); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("unknown override keys are rejected") {
  CHECK(test::error_code([] { parse_config("", {{"es", "nope", "1"}}, false); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("canonical text round-trips") {
  auto c = parse_config("[es]\nsigma0 = 0.1\ntop_percent = 12.5\n[lora]\ninit_std = 0.03\n", {}, false);
  const auto text = to_ini(c);
  CHECK(text.find("sigma0 = 0.1\n") != std::string::npos);
  CHECK(to_ini(parse_config(text, {}, false)) == text);
}

TEST_CASE("every key has a distinct flag") {
  std::set<std::string_view> flags;
  for (const auto& k : config_keys()) {
    CHECK_FALSE(k.help.empty());
    CHECK(flags.insert(k.flag).second);
  }
  CHECK(flags.count("output-dir") == 1);
  CHECK(flags.count("model-seed") == 1);
}

TEST_CASE("relative data paths resolve against the config file") {
  const auto dir = test::temp_dir("config_paths");
  {
    std::ofstream f(dir / "run.ini");
    f << "[task]\nsource = files\nsft_file = data/sft.tsv\nalign_file = /abs/align.tsv\n";
  }
  const auto c = load_config(dir / "run.ini", {}, false);
  CHECK(c.source == TaskSource::kFiles);
  CHECK(c.sft_file == dir / "data/sft.tsv");
  CHECK(c.align_file == "/abs/align.tsv");
  CHECK(test::error_code([&] { load_config(dir / "missing.ini", {}, false); }) == ErrorCode::kIoError);
}

TEST_CASE("committed example configs load") {
  for (const char* name : {"arith_transformer.ini", "arith_mlp_fast.ini", "rosenbrock.ini", "socket_cluster.ini"}) {
    CAPTURE(std::string(name));
    CHECK_NOTHROW(load_config(std::filesystem::path(ESSA_CONFIG_DIR) / name, {}, false));
  }
}
