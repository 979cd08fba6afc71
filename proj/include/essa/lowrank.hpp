#pragma once

// Low-rank adapters, their per-factor SVDs, and singular-value perturbation.
//
// An adapter contributes dW = B * A (B is m x r, A is r x n). Each factor is
// decomposed separately, factor = U * diag(sigma) * Vt, and a candidate
// vector x adds deltas to the largest ceil(p/100 * r) singular values of
// every factor. Reconstruction is pure: adapters are never mutated.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "essa/kernels.hpp"
#include "essa/linalg.hpp"

namespace essa {

struct SvdFactors {
  Matrix u;      // columns orthonormal
  Vector sigma;  // non-negative, descending
  Matrix vt;     // rows orthonormal

  Matrix reconstruct() const;
  Matrix reconstruct(const Vector& singular_values) const;
};

struct LowRankAdapter {
  std::string name;
  Matrix b;  // m x r
  Matrix a;  // r x n
  std::optional<SvdFactors> svd_a;
  std::optional<SvdFactors> svd_b;

  int rank() const { return static_cast<int>(a.rows()); }
  int out_dim() const { return static_cast<int>(b.rows()); }
  int in_dim() const { return static_cast<int>(a.cols()); }
  bool decomposed() const { return svd_a.has_value() && svd_b.has_value(); }
};

// A reconstructed factor pair (B', A') for one adapter.
struct FactorPair {
  Matrix b;
  Matrix a;
};

enum class Factor : std::uint8_t { kA = 0, kB = 1 };

struct LayoutEntry {
  std::string adapter;
  Factor factor;
  int index;

  bool operator==(const LayoutEntry&) const = default;
};

struct PerturbationLayout {
  std::vector<LayoutEntry> entries;
  double top_percent = 100.0;

  std::size_t dim() const { return entries.size(); }
};

// Thin SVD with descending singular values and the sign convention that the
// first nonzero element of every U column is non-negative.
SvdFactors svd(const Matrix& m);

LowRankAdapter decompose(LowRankAdapter adapter);
// Decomposes every adapter; independent SVDs run across OpenMP threads.
void decompose_all(std::vector<LowRankAdapter>& adapters,
                   kernels::Exec exec = kernels::Exec::kParallel);

// ceil(p/100 * rank), at least 1.
int top_count(int rank, double top_percent);

PerturbationLayout build_layout(std::span<const LowRankAdapter> adapters, double top_percent);

// Returns (B', A') per adapter, in the order of `adapters`.
std::vector<FactorPair> apply_candidate(std::span<const LowRankAdapter> adapters,
                                        const PerturbationLayout& layout,
                                        std::span<const double> x);

// Unperturbed (B, A) pairs as stored.
std::vector<FactorPair> stored_factors(std::span<const LowRankAdapter> adapters);

Matrix delta_weight(const Matrix& b, const Matrix& a,
                    kernels::Exec exec = kernels::Exec::kSerial);

// Relative Frobenius error ||got - want|| / max(||want||, tiny).
double relative_error(const Matrix& got, const Matrix& want);

// Adapter checkpoint: "ESSA" container, f32 little-endian payloads.
inline constexpr std::uint32_t kAdapterFormatVersion = 1;
std::vector<std::uint8_t> encode_adapters(std::span<const LowRankAdapter> adapters);
std::vector<LowRankAdapter> decode_adapters(std::span<const std::uint8_t> bytes);
void save_adapters(const std::filesystem::path& path, std::span<const LowRankAdapter> adapters);
std::vector<LowRankAdapter> load_adapters(const std::filesystem::path& path);

}  // namespace essa
