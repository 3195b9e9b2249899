// AVX2+FMA kernels.  This translation unit is compiled with -mavx2 -mfma;
// nothing here runs unless dispatch confirmed cpuid support at runtime.

#include "mos/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX2__)

#include <immintrin.h>

#include <cmath>

namespace mos::kernels {
namespace {

// Cephes-style exp on 8 lanes, |rel err| < 3e-7 over the clamped range.
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
  const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
  const __m256 c1 = _mm256_set1_ps(0.693359375f);
  const __m256 c2 = _mm256_set1_ps(-2.12194440e-4f);
  const __m256 one = _mm256_set1_ps(1.0f);

  x = _mm256_min_ps(x, hi);
  x = _mm256_max_ps(x, lo);

  __m256 fx = _mm256_fmadd_ps(x, log2e, _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, c1, x);
  x = _mm256_fnmadd_ps(fx, c2, x);

  __m256 z = _mm256_mul_ps(x, x);
  __m256 y = _mm256_set1_ps(1.9875691500e-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
  y = _mm256_fmadd_ps(y, z, _mm256_add_ps(x, one));

  __m256i n = _mm256_cvttps_epi32(fx);
  n = _mm256_add_epi32(n, _mm256_set1_epi32(127));
  n = _mm256_slli_epi32(n, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(n));
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_movehdup_ps(lo));
  return _mm_cvtss_f32(lo);
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}

// Shared inner loop for nn/tn: c[i,:] (+)= sum_p scale(i,p) * b[p,:], with the
// a element fetched through a stride so both layouts reuse one body.
inline void accumulate_rows(const float* a, int a_row_stride, int a_col_stride,
                            const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<int64_t>(i) * n;
    int j = 0;
    for (; j + 32 <= n; j += 32) {
      __m256 s0, s1, s2, s3;
      if (acc) {
        s0 = _mm256_loadu_ps(crow + j);
        s1 = _mm256_loadu_ps(crow + j + 8);
        s2 = _mm256_loadu_ps(crow + j + 16);
        s3 = _mm256_loadu_ps(crow + j + 24);
      } else {
        s0 = s1 = s2 = s3 = _mm256_setzero_ps();
      }
      for (int p = 0; p < k; ++p) {
        __m256 av = _mm256_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        const float* brow = b + static_cast<int64_t>(p) * n + j;
        s0 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow), s0);
        s1 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 8), s1);
        s2 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 16), s2);
        s3 = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + 24), s3);
      }
      _mm256_storeu_ps(crow + j, s0);
      _mm256_storeu_ps(crow + j + 8, s1);
      _mm256_storeu_ps(crow + j + 16, s2);
      _mm256_storeu_ps(crow + j + 24, s3);
    }
    for (; j + 8 <= n; j += 8) {
      __m256 s = acc ? _mm256_loadu_ps(crow + j) : _mm256_setzero_ps();
      for (int p = 0; p < k; ++p) {
        __m256 av = _mm256_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        s = _mm256_fmadd_ps(av, _mm256_loadu_ps(b + static_cast<int64_t>(p) * n + j), s);
      }
      _mm256_storeu_ps(crow + j, s);
    }
    for (; j < n; ++j) {
      float s = acc ? crow[j] : 0.0f;
      for (int p = 0; p < k; ++p) s += a[i * a_row_stride + p * a_col_stride] * b[p * n + j];
      crow[j] = s;
    }
  }
}

void matmul_nn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  accumulate_rows(a, k, 1, b, c, m, k, n, acc);
}

void matmul_tn(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  accumulate_rows(a, 1, m, b, c, m, k, n, acc);
}

void matmul_nt(const float* a, const float* b, float* c, int m, int k, int n, bool acc) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<int64_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<int64_t>(j) * k;
      __m256 s0 = _mm256_setzero_ps();
      __m256 s1 = _mm256_setzero_ps();
      int p = 0;
      for (; p + 16 <= k; p += 16) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), s0);
        s1 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p + 8), _mm256_loadu_ps(brow + p + 8), s1);
      }
      for (; p + 8 <= k; p += 8) {
        s0 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), s0);
      }
      float sum = hsum(_mm256_add_ps(s0, s1));
      for (; p < k; ++p) sum += arow[p] * brow[p];
      c[i * n + j] = (acc ? c[i * n + j] : 0.0f) + sum;
    }
  }
}

void axpy(float alpha, const float* x, float* y, int n) {
  __m256 av = _mm256_set1_ps(alpha);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

double dot(const float* x, const float* y, int n) {
  // Convert before multiplying: float*float products are exact in double,
  // matching the scalar kernel up to summation order.
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 yv = _mm256_loadu_ps(y + i);
    s0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(xv)),
                         _mm256_cvtps_pd(_mm256_castps256_ps128(yv)), s0);
    s1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(xv, 1)),
                         _mm256_cvtps_pd(_mm256_extractf128_ps(yv, 1)), s1);
  }
  double sum = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) sum += static_cast<double>(x[i]) * static_cast<double>(y[i]);
  return sum;
}

void silu(const float* x, float* y, int n) {
  const __m256 one = _mm256_set1_ps(1.0f);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 e = exp256(_mm256_sub_ps(_mm256_setzero_ps(), xv));
    __m256 s = _mm256_div_ps(one, _mm256_add_ps(one, e));
    _mm256_storeu_ps(y + i, _mm256_mul_ps(xv, s));
  }
  for (; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-x[i]));
    y[i] = x[i] * s;
  }
}

void silu_grad(const float* x, const float* dy, float* dx, int n, bool acc) {
  const __m256 one = _mm256_set1_ps(1.0f);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 xv = _mm256_loadu_ps(x + i);
    __m256 e = exp256(_mm256_sub_ps(_mm256_setzero_ps(), xv));
    __m256 s = _mm256_div_ps(one, _mm256_add_ps(one, e));
    __m256 g = _mm256_mul_ps(s, _mm256_fmadd_ps(xv, _mm256_sub_ps(one, s), one));
    __m256 out = _mm256_mul_ps(_mm256_loadu_ps(dy + i), g);
    if (acc) out = _mm256_add_ps(out, _mm256_loadu_ps(dx + i));
    _mm256_storeu_ps(dx + i, out);
  }
  for (; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-x[i]));
    float g = s * (1.0f + x[i] * (1.0f - s));
    dx[i] = (acc ? dx[i] : 0.0f) + dy[i] * g;
  }
}

void softmax_row(const float* x, float* y, int n) {
  __m256 mv = _mm256_set1_ps(-3.4028235e38f);
  int i = 0;
  for (; i + 8 <= n; i += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(x + i));
  __m128 m4 = _mm_max_ps(_mm256_castps256_ps128(mv), _mm256_extractf128_ps(mv, 1));
  m4 = _mm_max_ps(m4, _mm_movehl_ps(m4, m4));
  m4 = _mm_max_ss(m4, _mm_movehdup_ps(m4));
  float mx = _mm_cvtss_f32(m4);
  for (; i < n; ++i) mx = x[i] > mx ? x[i] : mx;

  __m256 mxv = _mm256_set1_ps(mx);
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 e = exp256(_mm256_sub_ps(_mm256_loadu_ps(x + i), mxv));
    _mm256_storeu_ps(y + i, e);
    s0 = _mm256_add_pd(s0, _mm256_cvtps_pd(_mm256_castps256_ps128(e)));
    s1 = _mm256_add_pd(s1, _mm256_cvtps_pd(_mm256_extractf128_ps(e, 1)));
  }
  double sum = hsum(_mm256_add_pd(s0, s1));
  for (; i < n; ++i) {
    float e = std::exp(x[i] - mx);
    y[i] = e;
    sum += e;
  }
  float inv = static_cast<float>(1.0 / sum);
  __m256 iv = _mm256_set1_ps(inv);
  i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(y + i), iv));
  for (; i < n; ++i) y[i] *= inv;
}

}  // namespace

bool detail::avx2_supported() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

Table detail::avx2_table() {
  Table t;
  t.name = "avx2";
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

#else

namespace mos::kernels {
bool detail::avx2_supported() { return false; }
Table detail::avx2_table() { return detail::scalar_table(); }
}  // namespace mos::kernels

#endif
