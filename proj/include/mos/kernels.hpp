#pragma once

// Numeric kernel layer.
//
// The hot inner loops live behind a function-pointer table with one scalar
// reference implementation and SIMD variants (AVX2, AVX-512F) selected at
// runtime from cpuid.  The scalar kernels are the semantic ground truth; the
// SIMD variants are checked against them by the equivalence tests.  Selection
// can be forced with the MOS_KERNELS environment variable or kernels::force()
// ("scalar", "avx2", "avx512").
//
// Matmul naming follows BLAS transpose conventions with row-major storage:
//   nn:  c[m x n] = a[m x k] * b[k x n]
//   nt:  c[m x n] = a[m x k] * b[n x k]^T
//   tn:  c[m x n] = a[k x m]^T * b[k x n]
// With acc=true the kernels accumulate into c instead of overwriting it
// (used by the backward pass, which sums adjoint contributions).

#include <cstdint>
#include <string>
#include <vector>

namespace mos::kernels {

struct Table {
  const char* name;

  void (*matmul_nn)(const float* a, const float* b, float* c, int m, int k, int n, bool acc);
  void (*matmul_nt)(const float* a, const float* b, float* c, int m, int k, int n, bool acc);
  void (*matmul_tn)(const float* a, const float* b, float* c, int m, int k, int n, bool acc);

  // y (+)= alpha * x
  void (*axpy)(float alpha, const float* x, float* y, int n);
  // Double-precision accumulated reductions (float inputs).
  double (*dot)(const float* x, const float* y, int n);
  // y = x * sigmoid(x)
  void (*silu)(const float* x, float* y, int n);
  // dx (+)= dy * d/dx silu(x)
  void (*silu_grad)(const float* x, const float* dy, float* dx, int n, bool acc);
  // y = softmax(x) over one contiguous row (max-subtracted, double-accumulated).
  void (*softmax_row)(const float* x, float* y, int n);
};

// The active table (environment override applied on first use).
const Table& active();

// Force a specific variant; throws std::invalid_argument if the name is
// unknown or the CPU lacks the feature.
void force(const std::string& name);

// Names of the variants this build can run on this CPU, scalar first.
std::vector<std::string> available();

namespace detail {
Table scalar_table();
bool avx2_supported();   // compile- and run-time
Table avx2_table();
bool avx512_supported();
Table avx512_table();
}  // namespace detail

}  // namespace mos::kernels
