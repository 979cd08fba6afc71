#include "essa/kernels.hpp"

#include <algorithm>
#include <cmath>

#include <omp.h>

#include "essa/error.hpp"

namespace essa::kernels {
namespace {

void check_gemm_shapes(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::kShapeError, "gemm inner dimensions differ: " + std::to_string(a.cols()) +
                                            " vs " + std::to_string(b.rows()));
  }
}

inline void gemm_row(const Matrix& a, const Matrix& b, Matrix& out, Eigen::Index i) {
  const auto inner = a.cols();
  const auto cols = b.cols();
  double* dst = out.data() + i * cols;
  std::fill(dst, dst + cols, 0.0);
  for (Eigen::Index k = 0; k < inner; ++k) {
    const double aik = a(i, k);
    const double* src = b.data() + k * cols;
    for (Eigen::Index j = 0; j < cols; ++j) dst[j] += aik * src[j];
  }
}

inline void quantize_row(Matrix& m, Eigen::Index i, int qmax) {
  const auto cols = m.cols();
  double* row = m.data() + i * cols;
  double peak = 0.0;
  for (Eigen::Index j = 0; j < cols; ++j) peak = std::max(peak, std::abs(row[j]));
  if (peak == 0.0) return;
  const double scale = peak / qmax;
  for (Eigen::Index j = 0; j < cols; ++j) {
    const double q = std::clamp(std::nearbyint(row[j] / scale), -static_cast<double>(qmax),
                                static_cast<double>(qmax));
    row[j] = q * scale;
  }
}

// Below this many multiply-adds the thread fork costs more than it saves.
constexpr Eigen::Index kParallelThreshold = 1 << 15;

}  // namespace

namespace serial {

void gemm(const Matrix& a, const Matrix& b, Matrix& out) {
  check_gemm_shapes(a, b);
  out.resize(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) gemm_row(a, b, out, i);
}

void quantize_rows(Matrix& m, int qmax) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) quantize_row(m, i, qmax);
}

}  // namespace serial

namespace parallel {

void gemm(const Matrix& a, const Matrix& b, Matrix& out) {
  check_gemm_shapes(a, b);
  out.resize(a.rows(), b.cols());
  const Eigen::Index rows = a.rows();
  const bool big = rows * a.cols() * b.cols() >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
  for (Eigen::Index i = 0; i < rows; ++i) gemm_row(a, b, out, i);
}

void quantize_rows(Matrix& m, int qmax) {
  const Eigen::Index rows = m.rows();
  const bool big = rows * m.cols() >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
  for (Eigen::Index i = 0; i < rows; ++i) quantize_row(m, i, qmax);
}

}  // namespace parallel

void gemm(const Matrix& a, const Matrix& b, Matrix& out, Exec exec) {
  if (exec == Exec::kParallel) {
    parallel::gemm(a, b, out);
  } else {
    serial::gemm(a, b, out);
  }
}

void quantize_rows(Matrix& m, int qmax, Exec exec) {
  if (exec == Exec::kParallel) {
    parallel::quantize_rows(m, qmax);
  } else {
    serial::quantize_rows(m, qmax);
  }
}

int max_threads() { return omp_get_max_threads(); }

}  // namespace essa::kernels
