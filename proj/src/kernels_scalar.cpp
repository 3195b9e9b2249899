// Scalar reference kernels.  These define the semantics; the SIMD variants
// must agree with them within the tolerances pinned in the equivalence tests.

#include <cmath>

#include "mos/kernels.hpp"

namespace mos::kernels {
namespace {

void matmul_nn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float sum = acc ? c[i * n + j] : 0.0f;
      for (int p = 0; p < k; ++p) sum += a[i * k + p] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float sum = acc ? c[i * n + j] : 0.0f;
      for (int p = 0; p < k; ++p) sum += a[i * k + p] * b[j * k + p];
      c[i * n + j] = sum;
    }
  }
}

void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      float sum = acc ? c[i * n + j] : 0.0f;
      for (int p = 0; p < k; ++p) sum += a[p * m + i] * b[p * n + j];
      c[i * n + j] = sum;
    }
  }
}

void axpy(float alpha, const float* x, float* y, int n) {
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double dot(const float* x, const float* y, int n) {
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return sum;
}

void silu(const float* x, float* y, int n) {
  for (int i = 0; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

void silu_grad(const float* x, const float* dy, float* dx, int n, bool acc) {
  for (int i = 0; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-x[i]));
    float g = s * (1.0f + x[i] * (1.0f - s));
    dx[i] = (acc ? dx[i] : 0.0f) + dy[i] * g;
  }
}

void softmax_row(const float* x, float* y, int n) {
  float mx = x[0];
  for (int i = 1; i < n; ++i) mx = x[i] > mx ? x[i] : mx;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    float e = std::exp(x[i] - mx);
    y[i] = e;
    sum += e;
  }
  float inv = static_cast<float>(1.0 / sum);
  for (int i = 0; i < n; ++i) y[i] *= inv;
}

}  // namespace

Table detail::scalar_table() {
  Table t;
  t.name = "scalar";
  t.matmul_nn = matmul_nn;
  t.matmul_nt = matmul_nt;
  t.matmul_tn = matmul_tn;
  t.axpy = axpy;
  t.dot = dot;
  t.silu = silu;
  t.silu_grad = silu_grad;
  t.softmax_row = softmax_row;
  return t;
}

}  // namespace mos::kernels
