#include "essa/lowrank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include <Eigen/SVD>

#include "essa/binary_io.hpp"
#include "essa/error.hpp"

namespace essa {
namespace {

constexpr double kReconstructionTolerance = 1e-6;

bool all_finite(const Matrix& m) { return m.allFinite(); }

void put_matrix(ByteWriter& w, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) w.f32(static_cast<float>(m(i, j)));
  }
}

void put_vector(ByteWriter& w, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) w.f32(static_cast<float>(v(i)));
}

Matrix get_matrix(ByteReader& r, std::uint32_t rows, std::uint32_t cols) {
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = r.f32();
  }
  return m;
}

Vector get_vector(ByteReader& r, std::uint32_t n) {
  Vector v(n);
  for (std::uint32_t i = 0; i < n; ++i) v(i) = r.f32();
  return v;
}

const SvdFactors& factors_of(const LowRankAdapter& adapter, Factor f) {
  return f == Factor::kA ? *adapter.svd_a : *adapter.svd_b;
}

}  // namespace

Matrix SvdFactors::reconstruct() const { return reconstruct(sigma); }

Matrix SvdFactors::reconstruct(const Vector& singular_values) const {
  return u * singular_values.asDiagonal() * vt;
}

SvdFactors svd(const Matrix& m) {
  if (!all_finite(m)) throw Error(ErrorCode::kInvalidMatrix, "matrix has non-finite entries");
  const Eigen::MatrixXd colmajor = m;
  Eigen::JacobiSVD<Eigen::MatrixXd> solver(colmajor, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& values = solver.singularValues();
  const Eigen::Index k = values.size();

  // Stable order: equal values keep the solver's column order.
  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index lhs, Eigen::Index rhs) { return values(lhs) > values(rhs); });

  SvdFactors out;
  out.u.resize(m.rows(), k);
  out.sigma.resize(k);
  out.vt.resize(k, m.cols());
  for (Eigen::Index c = 0; c < k; ++c) {
    const auto src = order[static_cast<std::size_t>(c)];
    out.sigma(c) = values(src);
    out.u.col(c) = solver.matrixU().col(src);
    out.vt.row(c) = solver.matrixV().col(src).transpose();
  }
  for (Eigen::Index c = 0; c < k; ++c) {
    for (Eigen::Index i = 0; i < out.u.rows(); ++i) {
      const double v = out.u(i, c);
      if (std::abs(v) <= 1e-12) continue;
      if (v < 0.0) {
        out.u.col(c) *= -1.0;
        out.vt.row(c) *= -1.0;
      }
      break;
    }
  }
  if (!out.u.allFinite() || !out.sigma.allFinite() || !out.vt.allFinite()) {
    throw Error(ErrorCode::kDecompositionFailed, "SVD produced non-finite factors");
  }
  return out;
}

LowRankAdapter decompose(LowRankAdapter adapter) {
  if (adapter.b.cols() != adapter.a.rows()) {
    throw Error(ErrorCode::kShapeError, adapter.name + ": B is " + std::to_string(adapter.b.rows()) +
                                            "x" + std::to_string(adapter.b.cols()) + " but A has " +
                                            std::to_string(adapter.a.rows()) + " rows");
  }
  const int r = adapter.rank();
  if (r < 1 || r > std::min(adapter.out_dim(), adapter.in_dim())) {
    throw Error(ErrorCode::kInvalidConfig,
                adapter.name + ": rank " + std::to_string(r) + " exceeds min(m, n)");
  }
  if (!all_finite(adapter.a) || !all_finite(adapter.b)) {
    throw Error(ErrorCode::kInvalidMatrix, adapter.name + ": non-finite adapter entries");
  }
  adapter.svd_a = svd(adapter.a);
  adapter.svd_b = svd(adapter.b);
  if (relative_error(adapter.svd_a->reconstruct(), adapter.a) > kReconstructionTolerance ||
      relative_error(adapter.svd_b->reconstruct(), adapter.b) > kReconstructionTolerance) {
    throw Error(ErrorCode::kDecompositionFailed, adapter.name + ": SVD does not reproduce the factor");
  }
  return adapter;
}

void decompose_all(std::vector<LowRankAdapter>& adapters, kernels::Exec exec) {
  const auto n = static_cast<std::ptrdiff_t>(adapters.size());
  if (exec == kernels::Exec::kSerial) {
    for (auto& adapter : adapters) adapter = decompose(std::move(adapter));
    return;
  }
  // Exceptions cannot cross the parallel region; collect and rethrow the first.
  std::vector<std::exception_ptr> failures(adapters.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      adapters[static_cast<std::size_t>(i)] = decompose(std::move(adapters[static_cast<std::size_t>(i)]));
    } catch (...) {
      failures[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& failure : failures) {
    if (failure) std::rethrow_exception(failure);
  }
}

int top_count(int rank, double top_percent) {
  const double exact = top_percent / 100.0 * rank;
  // Guard against 40/100*10 landing a hair above 4.
  const int count = static_cast<int>(std::ceil(exact - 1e-9));
  return std::clamp(count, 1, rank);
}

PerturbationLayout build_layout(std::span<const LowRankAdapter> adapters, double top_percent) {
  if (!(top_percent > 0.0 && top_percent <= 100.0)) {
    throw Error(ErrorCode::kInvalidConfig, "top percent must be in (0, 100], got " +
                                               std::to_string(top_percent));
  }
  std::vector<const LowRankAdapter*> sorted;
  for (const auto& adapter : adapters) {
    if (!adapter.decomposed()) throw Error(ErrorCode::kNotDecomposed, adapter.name);
    sorted.push_back(&adapter);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const LowRankAdapter* l, const LowRankAdapter* r) { return l->name < r->name; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->name == sorted[i - 1]->name) {
      throw Error(ErrorCode::kInvalidConfig, "duplicate adapter name " + sorted[i]->name);
    }
  }

  PerturbationLayout layout;
  layout.top_percent = top_percent;
  for (const auto* adapter : sorted) {
    const int count = top_count(adapter->rank(), top_percent);
    for (Factor f : {Factor::kA, Factor::kB}) {
      for (int i = 0; i < count; ++i) layout.entries.push_back({adapter->name, f, i});
    }
  }
  return layout;
}

std::vector<FactorPair> stored_factors(std::span<const LowRankAdapter> adapters) {
  std::vector<FactorPair> out;
  out.reserve(adapters.size());
  for (const auto& adapter : adapters) out.push_back({adapter.b, adapter.a});
  return out;
}

std::vector<FactorPair> apply_candidate(std::span<const LowRankAdapter> adapters,
                                        const PerturbationLayout& layout,
                                        std::span<const double> x) {
  if (x.size() != layout.dim()) {
    throw Error(ErrorCode::kLayoutMismatch, "candidate has " + std::to_string(x.size()) +
                                                " entries, layout expects " +
                                                std::to_string(layout.dim()));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw Error(ErrorCode::kInvalidCandidate, "non-finite candidate entry");
  }

  std::unordered_map<std::string_view, std::size_t> by_name;
  std::vector<Vector> sigma_a, sigma_b;
  sigma_a.reserve(adapters.size());
  sigma_b.reserve(adapters.size());
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const auto& adapter = adapters[i];
    if (!adapter.decomposed()) throw Error(ErrorCode::kNotDecomposed, adapter.name);
    by_name.emplace(adapter.name, i);
    sigma_a.push_back(adapter.svd_a->sigma);
    sigma_b.push_back(adapter.svd_b->sigma);
  }

  for (std::size_t k = 0; k < layout.entries.size(); ++k) {
    const auto& entry = layout.entries[k];
    const auto it = by_name.find(entry.adapter);
    if (it == by_name.end()) {
      throw Error(ErrorCode::kLayoutMismatch, "layout names unknown adapter " + entry.adapter);
    }
    auto& sigma = entry.factor == Factor::kA ? sigma_a[it->second] : sigma_b[it->second];
    if (entry.index < 0 || entry.index >= sigma.size()) {
      throw Error(ErrorCode::kLayoutMismatch, "layout index out of range for " + entry.adapter);
    }
    sigma(entry.index) += x[k];
  }

  std::vector<FactorPair> out;
  out.reserve(adapters.size());
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    out.push_back({factors_of(adapters[i], Factor::kB).reconstruct(sigma_b[i]),
                   factors_of(adapters[i], Factor::kA).reconstruct(sigma_a[i])});
  }
  return out;
}

Matrix delta_weight(const Matrix& b, const Matrix& a, kernels::Exec exec) {
  Matrix out;
  kernels::gemm(b, a, out, exec);
  return out;
}

double relative_error(const Matrix& got, const Matrix& want) {
  if (got.rows() != want.rows() || got.cols() != want.cols()) {
    throw Error(ErrorCode::kShapeError, "relative_error shape mismatch");
  }
  const double denom = std::max(want.norm(), 1e-300);
  return (got - want).norm() / denom;
}

std::vector<std::uint8_t> encode_adapters(std::span<const LowRankAdapter> adapters) {
  ByteWriter w;
  w.magic("ESSA");
  w.u32(kAdapterFormatVersion);
  w.u32(static_cast<std::uint32_t>(adapters.size()));
  for (const auto& adapter : adapters) {
    if (!adapter.decomposed()) throw Error(ErrorCode::kNotDecomposed, adapter.name);
    w.short_string(adapter.name);
    w.u32(static_cast<std::uint32_t>(adapter.out_dim()));
    w.u32(static_cast<std::uint32_t>(adapter.rank()));
    w.u32(static_cast<std::uint32_t>(adapter.in_dim()));
    put_matrix(w, adapter.b);
    put_matrix(w, adapter.a);
    put_matrix(w, adapter.svd_a->u);
    put_vector(w, adapter.svd_a->sigma);
    put_matrix(w, adapter.svd_a->vt);
    put_matrix(w, adapter.svd_b->u);
    put_vector(w, adapter.svd_b->sigma);
    put_matrix(w, adapter.svd_b->vt);
  }
  return w.take();
}

std::vector<LowRankAdapter> decode_adapters(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::kCorruptCheckpoint);
  r.expect_magic("ESSA");
  const auto version = r.u32();
  if (version != kAdapterFormatVersion) r.fail("unsupported adapter format version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<LowRankAdapter> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    LowRankAdapter adapter;
    adapter.name = r.short_string();
    const auto m = r.u32();
    const auto rank = r.u32();
    const auto n = r.u32();
    if (rank == 0 || rank > std::min(m, n)) r.fail("bad adapter dimensions for " + adapter.name);
    // Reject absurd sizes before allocating.
    const std::uint64_t floats = 2ull * m * rank + 2ull * rank * n + 2ull * rank * rank + 2ull * rank;
    if (floats * 4 > r.remaining()) r.fail("truncated adapter " + adapter.name);
    adapter.b = get_matrix(r, m, rank);
    adapter.a = get_matrix(r, rank, n);
    SvdFactors fa, fb;
    fa.u = get_matrix(r, rank, rank);
    fa.sigma = get_vector(r, rank);
    fa.vt = get_matrix(r, rank, n);
    fb.u = get_matrix(r, m, rank);
    fb.sigma = get_vector(r, rank);
    fb.vt = get_matrix(r, rank, rank);
    adapter.svd_a = std::move(fa);
    adapter.svd_b = std::move(fb);
    out.push_back(std::move(adapter));
  }
  if (!r.done()) r.fail("trailing bytes after adapters");
  return out;
}

void save_adapters(const std::filesystem::path& path, std::span<const LowRankAdapter> adapters) {
  const auto bytes = encode_adapters(adapters);
  write_file_atomic(path, bytes);
}

std::vector<LowRankAdapter> load_adapters(const std::filesystem::path& path) {
  return decode_adapters(read_file(path));
}

}  // namespace essa
