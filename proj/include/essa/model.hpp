#pragma once

// Desk-scale forward-only policy with frozen base weights.
//
// Two architectures share one interface:
//   * a pre-LayerNorm causal transformer whose attention projections
//     layer{l}.Q/K/V/O carry low-rank adapters, with the unembedding tied
//     to the token embedding;
//   * an MLP over a fixed context window, adapters on mlp{l}.fc, which is
//     cheap enough to run the whole pipeline in milliseconds.
// Every projection computes y = W x with W stored out x in. The effective
// weight of an adapted projection is W + B' A', where W may have been
// replaced by its simulated low-precision version.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "essa/kernels.hpp"
#include "essa/linalg.hpp"
#include "essa/lowrank.hpp"
#include "essa/task.hpp"

namespace essa {

enum class Precision : std::uint32_t { kF32 = 0, kSimInt8 = 1, kSimInt4 = 2 };
enum class ArchKind : std::uint32_t { kTransformer = 0, kMlp = 1 };

std::string_view to_string(Precision p);
std::string_view to_string(ArchKind k);
// qmax of the symmetric integer grid: 127 for Int8, 7 for Int4.
int quant_levels(Precision p);

struct Architecture {
  ArchKind kind = ArchKind::kTransformer;
  int vocab = Tokenizer::kVocabSize;
  int model_dim = 32;
  int heads = 4;
  int layers = 2;
  int mlp_hidden = 64;
  int max_seq = 16;  // positions for the transformer, context window for the MLP

  bool operator==(const Architecture&) const = default;
};

void validate(const Architecture& arch);

class PolicyModel {
 public:
  // Frozen base weights drawn from a counter-based stream keyed by `seed`.
  static PolicyModel create(const Architecture& arch, std::uint64_t seed);

  const Architecture& arch() const { return arch_; }
  Precision precision() const { return precision_; }
  const std::map<std::string, Matrix, std::less<>>& base() const { return base_; }
  const Matrix& weight(std::string_view name) const;

  // Names of the projections that carry adapters, in attachment order.
  std::vector<std::string> adapter_targets() const;

  const std::vector<LowRankAdapter>& adapters() const { return adapters_; }
  // Adapters must match adapter_targets() one-to-one, in order and shape.
  void set_adapters(std::vector<LowRankAdapter> adapters);

  friend PolicyModel quantize_base(const PolicyModel& model, Precision mode,
                                   kernels::Exec exec);
  friend std::vector<std::uint8_t> encode_model(const PolicyModel& model);
  friend PolicyModel decode_model(std::span<const std::uint8_t> bytes);

 private:
  Architecture arch_;
  Precision precision_ = Precision::kF32;
  std::map<std::string, Matrix, std::less<>> base_;
  std::vector<LowRankAdapter> adapters_;
};

// A = N(0, init_std^2), B = 0 for every adapter target.
std::vector<LowRankAdapter> init_adapters(const PolicyModel& model, int rank, double init_std,
                                          std::uint64_t seed);

// Replaces every block projection by its symmetric per-row
// quantize-dequantize. Embeddings stay full precision.
PolicyModel quantize_base(const PolicyModel& model, Precision mode,
                          kernels::Exec exec = kernels::Exec::kParallel);

// Effective weights for one set of adapter overrides; immutable and safe to
// share across threads.
class InferenceSession {
 public:
  InferenceSession(const PolicyModel& model, std::span<const FactorPair> overrides);

  // Greedy decoding; stops at EOS (not included) or after max_new tokens.
  std::vector<int> generate(std::span<const int> prompt, std::size_t max_new) const;
  // Logits for the next token after `prefix`.
  Vector next_logits(std::span<const int> prefix) const;
  std::string answer(const TaskExample& example, std::size_t max_new) const;

 private:
  struct Layer {
    const Matrix* q;
    const Matrix* k;
    const Matrix* v;
    const Matrix* o;
    const Matrix* w1;
    const Matrix* w2;
  };

  std::vector<int> generate_transformer(std::span<const int> prompt, std::size_t max_new,
                                        Vector* last_logits) const;
  std::vector<int> generate_mlp(std::span<const int> prompt, std::size_t max_new,
                                Vector* last_logits) const;

  const PolicyModel* model_;
  std::vector<Matrix> owned_;  // effective weights of adapted projections
  std::vector<Layer> layers_;
  std::vector<const Matrix*> mlp_fc_;
};

std::string forward(const PolicyModel& model, std::span<const FactorPair> overrides,
                    std::span<const int> prompt, std::size_t max_new = 8);

bool is_correct(const InferenceSession& session, const TaskExample& example, std::size_t max_new);

// Fraction of examples answered exactly. The parallel variant splits the
// examples across OpenMP threads and returns the identical count.
double accuracy(const PolicyModel& model, std::span<const FactorPair> overrides,
                std::span<const TaskExample> examples,
                kernels::Exec exec = kernels::Exec::kSerial);
std::size_t count_correct(const InferenceSession& session, std::span<const TaskExample> examples,
                          std::span<const std::size_t> indices, kernels::Exec exec);

// Teacher-forced cross-entropy over answer tokens (and EOS), averaged per
// example then over examples.
struct LossAndGradients {
  double loss = 0.0;
  std::vector<FactorPair> grads;  // (dL/dB, dL/dA) per adapter
};

LossAndGradients loss_and_gradients(const PolicyModel& model, std::span<const FactorPair> adapters,
                                    std::span<const TaskExample> batch, bool want_gradients = true);

double sft_loss(const PolicyModel& model, std::span<const FactorPair> adapters,
                std::span<const TaskExample> examples);

struct SftOptions {
  std::size_t steps = 200;
  double learning_rate = 0.1;
  bool linear_decay = false;  // learning rate falls linearly to zero over `steps`
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

struct SftReport {
  std::vector<LowRankAdapter> adapters;  // undecomposed
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double min_singular_value = 0.0;  // smallest sigma over all factors
  double max_singular_value = 0.0;
  bool degenerate = false;          // min_singular_value <= 1e-6
};

// Plain minibatch SGD on the adapters; base weights untouched.
SftReport sft_train(const PolicyModel& model, std::span<const TaskExample> data, const SftOptions& options);

// "ESSM" container: architecture, precision and f64 base weights.
inline constexpr std::uint32_t kModelFormatVersion = 1;
std::vector<std::uint8_t> encode_model(const PolicyModel& model);
PolicyModel decode_model(std::span<const std::uint8_t> bytes);
void save_model(const std::filesystem::path& path, const PolicyModel& model);
PolicyModel load_model(const std::filesystem::path& path);

}  // namespace essa
