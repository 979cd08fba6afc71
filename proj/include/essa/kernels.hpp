#pragma once

// Data-parallel kernels. Each kernel has a serial reference and an OpenMP
// variant; the two produce bitwise-identical results because the parallel
// split is over independent outputs and every output keeps the serial
// accumulation order.

#include <cstddef>

#include "essa/linalg.hpp"

namespace essa::kernels {

enum class Exec { kSerial, kParallel };

namespace serial {

// out = a * b, accumulating k in ascending order for every (i, j).
void gemm(const Matrix& a, const Matrix& b, Matrix& out);

// Symmetric per-row quantize-dequantize onto {-qmax..qmax} * max|row| / qmax.
void quantize_rows(Matrix& m, int qmax);

}  // namespace serial

namespace parallel {

void gemm(const Matrix& a, const Matrix& b, Matrix& out);
void quantize_rows(Matrix& m, int qmax);

}  // namespace parallel

void gemm(const Matrix& a, const Matrix& b, Matrix& out, Exec exec);
void quantize_rows(Matrix& m, int qmax, Exec exec);

// Number of threads the parallel variants would use.
int max_threads();

}  // namespace essa::kernels
