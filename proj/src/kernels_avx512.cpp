// AVX-512F kernels.  Compiled with -mavx512f; gated behind runtime cpuid.
// Tails use mask registers instead of scalar epilogues.

#include "mos/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX512F__)

#include <immintrin.h>

#include <cmath>

namespace mos::kernels {
namespace {

inline __mmask16 tail_mask(int rem) { return static_cast<__mmask16>((1u << rem) - 1u); }

// Cephes-style exp on 16 lanes (same polynomial as the AVX2 variant).
inline __m512 exp512(__m512 x) {
  const __m512 hi = _mm512_set1_ps(88.3762626647949f);
  const __m512 lo = _mm512_set1_ps(-88.3762626647949f);
  const __m512 log2e = _mm512_set1_ps(1.44269504088896341f);
  const __m512 c1 = _mm512_set1_ps(0.693359375f);
  const __m512 c2 = _mm512_set1_ps(-2.12194440e-4f);
  const __m512 one = _mm512_set1_ps(1.0f);

  x = _mm512_min_ps(x, hi);
  x = _mm512_max_ps(x, lo);

  __m512 fx = _mm512_fmadd_ps(x, log2e, _mm512_set1_ps(0.5f));
  fx = _mm512_roundscale_ps(fx, 0x01);  // floor
  x = _mm512_fnmadd_ps(fx, c1, x);
  x = _mm512_fnmadd_ps(fx, c2, x);

  __m512 z = _mm512_mul_ps(x, x);
  __m512 y = _mm512_set1_ps(1.9875691500e-4f);
  y = _mm512_fmadd_ps(y, x, _mm512_set1_ps(1.3981999507e-3f));
  y = _mm512_fmadd_ps(y, x, _mm512_set1_ps(8.3334519073e-3f));
  y = _mm512_fmadd_ps(y, x, _mm512_set1_ps(4.1665795894e-2f));
  y = _mm512_fmadd_ps(y, x, _mm512_set1_ps(1.6666665459e-1f));
  y = _mm512_fmadd_ps(y, x, _mm512_set1_ps(5.0000001201e-1f));
  y = _mm512_fmadd_ps(y, z, _mm512_add_ps(x, one));

  __m512i n = _mm512_cvttps_epi32(fx);
  n = _mm512_add_epi32(n, _mm512_set1_epi32(127));
  n = _mm512_slli_epi32(n, 23);
  return _mm512_mul_ps(y, _mm512_castsi512_ps(n));
}

inline double sum_pd(__m512 v) {
  __m512d lo = _mm512_cvtps_pd(_mm512_castps512_ps256(v));
  __m512d hi = _mm512_cvtps_pd(_mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(v), 1)));
  return _mm512_reduce_add_pd(_mm512_add_pd(lo, hi));
}

// Narrow outputs (n <= 32): four output rows share every b-row load, and the
// per-row accumulators supply enough independent FMA chains to cover latency.
// V is the number of 16-lane column vectors per row (1 or 2).
template <int V>
inline void narrow_rows(const float* a, int ars, int acs, const float* b, float* c, int m, int k,
                        int n, bool acc, __mmask16 m0, __mmask16 m1) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const float* a0 = a + static_cast<int64_t>(i + 0) * ars;
    const float* a1 = a + static_cast<int64_t>(i + 1) * ars;
    const float* a2 = a + static_cast<int64_t>(i + 2) * ars;
    const float* a3 = a + static_cast<int64_t>(i + 3) * ars;
    float* c0 = c + static_cast<int64_t>(i + 0) * n;
    float* c1 = c + static_cast<int64_t>(i + 1) * n;
    float* c2 = c + static_cast<int64_t>(i + 2) * n;
    float* c3 = c + static_cast<int64_t>(i + 3) * n;
    __m512 s00 = acc ? _mm512_maskz_loadu_ps(m0, c0) : _mm512_setzero_ps();
    __m512 s10 = acc ? _mm512_maskz_loadu_ps(m0, c1) : _mm512_setzero_ps();
    __m512 s20 = acc ? _mm512_maskz_loadu_ps(m0, c2) : _mm512_setzero_ps();
    __m512 s30 = acc ? _mm512_maskz_loadu_ps(m0, c3) : _mm512_setzero_ps();
    __m512 s01, s11, s21, s31;
    if constexpr (V == 2) {
      s01 = acc ? _mm512_maskz_loadu_ps(m1, c0 + 16) : _mm512_setzero_ps();
      s11 = acc ? _mm512_maskz_loadu_ps(m1, c1 + 16) : _mm512_setzero_ps();
      s21 = acc ? _mm512_maskz_loadu_ps(m1, c2 + 16) : _mm512_setzero_ps();
      s31 = acc ? _mm512_maskz_loadu_ps(m1, c3 + 16) : _mm512_setzero_ps();
    }
    for (int p = 0; p < k; ++p) {
      const float* brow = b + static_cast<int64_t>(p) * n;
      __m512 b0 = _mm512_maskz_loadu_ps(m0, brow);
      __m512 w0 = _mm512_set1_ps(a0[p * acs]);
      __m512 w1 = _mm512_set1_ps(a1[p * acs]);
      __m512 w2 = _mm512_set1_ps(a2[p * acs]);
      __m512 w3 = _mm512_set1_ps(a3[p * acs]);
      s00 = _mm512_fmadd_ps(w0, b0, s00);
      s10 = _mm512_fmadd_ps(w1, b0, s10);
      s20 = _mm512_fmadd_ps(w2, b0, s20);
      s30 = _mm512_fmadd_ps(w3, b0, s30);
      if constexpr (V == 2) {
        __m512 b1 = _mm512_maskz_loadu_ps(m1, brow + 16);
        s01 = _mm512_fmadd_ps(w0, b1, s01);
        s11 = _mm512_fmadd_ps(w1, b1, s11);
        s21 = _mm512_fmadd_ps(w2, b1, s21);
        s31 = _mm512_fmadd_ps(w3, b1, s31);
      }
    }
    _mm512_mask_storeu_ps(c0, m0, s00);
    _mm512_mask_storeu_ps(c1, m0, s10);
    _mm512_mask_storeu_ps(c2, m0, s20);
    _mm512_mask_storeu_ps(c3, m0, s30);
    if constexpr (V == 2) {
      _mm512_mask_storeu_ps(c0 + 16, m1, s01);
      _mm512_mask_storeu_ps(c1 + 16, m1, s11);
      _mm512_mask_storeu_ps(c2 + 16, m1, s21);
      _mm512_mask_storeu_ps(c3 + 16, m1, s31);
    }
  }
  for (; i < m; ++i) {
    const float* a0 = a + static_cast<int64_t>(i) * ars;
    float* c0 = c + static_cast<int64_t>(i) * n;
    __m512 s00 = acc ? _mm512_maskz_loadu_ps(m0, c0) : _mm512_setzero_ps();
    __m512 s01;
    if constexpr (V == 2) s01 = acc ? _mm512_maskz_loadu_ps(m1, c0 + 16) : _mm512_setzero_ps();
    for (int p = 0; p < k; ++p) {
      const float* brow = b + static_cast<int64_t>(p) * n;
      __m512 w0 = _mm512_set1_ps(a0[p * acs]);
      s00 = _mm512_fmadd_ps(w0, _mm512_maskz_loadu_ps(m0, brow), s00);
      if constexpr (V == 2) s01 = _mm512_fmadd_ps(w0, _mm512_maskz_loadu_ps(m1, brow + 16), s01);
    }
    _mm512_mask_storeu_ps(c0, m0, s00);
    if constexpr (V == 2) _mm512_mask_storeu_ps(c0 + 16, m1, s01);
  }
}

inline void accumulate_rows(const float* a, int a_row_stride, int a_col_stride,
                            const float* b, float* c, int m, int k, int n, bool acc) {
  if (n <= 16) {
    narrow_rows<1>(a, a_row_stride, a_col_stride, b, c, m, k, n, acc, tail_mask(n),
                   static_cast<__mmask16>(0));
    return;
  }
  if (n <= 32) {
    narrow_rows<2>(a, a_row_stride, a_col_stride, b, c, m, k, n, acc,
                   static_cast<__mmask16>(0xffff), tail_mask(n - 16));
    return;
  }
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<int64_t>(i) * n;
    int j = 0;
    for (; j + 64 <= n; j += 64) {
      __m512 s0, s1, s2, s3;
      if (acc) {
        s0 = _mm512_loadu_ps(crow + j);
        s1 = _mm512_loadu_ps(crow + j + 16);
        s2 = _mm512_loadu_ps(crow + j + 32);
        s3 = _mm512_loadu_ps(crow + j + 48);
      } else {
        s0 = s1 = s2 = s3 = _mm512_setzero_ps();
      }
      for (int p = 0; p < k; ++p) {
        __m512 av = _mm512_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        const float* brow = b + static_cast<int64_t>(p) * n + j;
        s0 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow), s0);
        s1 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow + 16), s1);
        s2 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow + 32), s2);
        s3 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow + 48), s3);
      }
      _mm512_storeu_ps(crow + j, s0);
      _mm512_storeu_ps(crow + j + 16, s1);
      _mm512_storeu_ps(crow + j + 32, s2);
      _mm512_storeu_ps(crow + j + 48, s3);
    }
    // Narrow strips are FMA-latency-bound with one accumulator, so unroll k
    // into independent chains and fold them at the end.
    for (; j + 32 <= n; j += 32) {
      __m512 s0, s1;
      if (acc) {
        s0 = _mm512_loadu_ps(crow + j);
        s1 = _mm512_loadu_ps(crow + j + 16);
      } else {
        s0 = s1 = _mm512_setzero_ps();
      }
      __m512 t0 = _mm512_setzero_ps();
      __m512 t1 = _mm512_setzero_ps();
      int p = 0;
      for (; p + 2 <= k; p += 2) {
        __m512 av = _mm512_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        __m512 aw = _mm512_set1_ps(a[i * a_row_stride + (p + 1) * a_col_stride]);
        const float* brow = b + static_cast<int64_t>(p) * n + j;
        const float* brow2 = brow + n;
        s0 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow), s0);
        s1 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow + 16), s1);
        t0 = _mm512_fmadd_ps(aw, _mm512_loadu_ps(brow2), t0);
        t1 = _mm512_fmadd_ps(aw, _mm512_loadu_ps(brow2 + 16), t1);
      }
      if (p < k) {
        __m512 av = _mm512_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        const float* brow = b + static_cast<int64_t>(p) * n + j;
        s0 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow), s0);
        s1 = _mm512_fmadd_ps(av, _mm512_loadu_ps(brow + 16), s1);
      }
      _mm512_storeu_ps(crow + j, _mm512_add_ps(s0, t0));
      _mm512_storeu_ps(crow + j + 16, _mm512_add_ps(s1, t1));
    }
    for (; j + 16 <= n; j += 16) {
      __m512 s0 = acc ? _mm512_loadu_ps(crow + j) : _mm512_setzero_ps();
      __m512 s1 = _mm512_setzero_ps();
      __m512 s2 = _mm512_setzero_ps();
      __m512 s3 = _mm512_setzero_ps();
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        const float* arow = a + i * a_row_stride + p * a_col_stride;
        const float* brow = b + static_cast<int64_t>(p) * n + j;
        s0 = _mm512_fmadd_ps(_mm512_set1_ps(arow[0]), _mm512_loadu_ps(brow), s0);
        s1 = _mm512_fmadd_ps(_mm512_set1_ps(arow[a_col_stride]), _mm512_loadu_ps(brow + n), s1);
        s2 = _mm512_fmadd_ps(_mm512_set1_ps(arow[2 * a_col_stride]), _mm512_loadu_ps(brow + 2 * n), s2);
        s3 = _mm512_fmadd_ps(_mm512_set1_ps(arow[3 * a_col_stride]), _mm512_loadu_ps(brow + 3 * n), s3);
      }
      for (; p < k; ++p) {
        __m512 av = _mm512_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        s0 = _mm512_fmadd_ps(av, _mm512_loadu_ps(b + static_cast<int64_t>(p) * n + j), s0);
      }
      _mm512_storeu_ps(crow + j, _mm512_add_ps(_mm512_add_ps(s0, s1), _mm512_add_ps(s2, s3)));
    }
    if (j < n) {
      __mmask16 mk = tail_mask(n - j);
      __m512 s0 = acc ? _mm512_maskz_loadu_ps(mk, crow + j) : _mm512_setzero_ps();
      __m512 s1 = _mm512_setzero_ps();
      __m512 s2 = _mm512_setzero_ps();
      __m512 s3 = _mm512_setzero_ps();
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        const float* arow = a + i * a_row_stride + p * a_col_stride;
        const float* brow = b + static_cast<int64_t>(p) * n + j;
        s0 = _mm512_fmadd_ps(_mm512_set1_ps(arow[0]), _mm512_maskz_loadu_ps(mk, brow), s0);
        s1 = _mm512_fmadd_ps(_mm512_set1_ps(arow[a_col_stride]), _mm512_maskz_loadu_ps(mk, brow + n), s1);
        s2 = _mm512_fmadd_ps(_mm512_set1_ps(arow[2 * a_col_stride]), _mm512_maskz_loadu_ps(mk, brow + 2 * n), s2);
        s3 = _mm512_fmadd_ps(_mm512_set1_ps(arow[3 * a_col_stride]), _mm512_maskz_loadu_ps(mk, brow + 3 * n), s3);
      }
      for (; p < k; ++p) {
        __m512 av = _mm512_set1_ps(a[i * a_row_stride + p * a_col_stride]);
        s0 = _mm512_fmadd_ps(av, _mm512_maskz_loadu_ps(mk, b + static_cast<int64_t>(p) * n + j), s0);
      }
      _mm512_mask_storeu_ps(crow + j, mk, _mm512_add_ps(_mm512_add_ps(s0, s1), _mm512_add_ps(s2, s3)));
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
      __m512 s0 = _mm512_setzero_ps();
      __m512 s1 = _mm512_setzero_ps();
      __m512 s2 = _mm512_setzero_ps();
      __m512 s3 = _mm512_setzero_ps();
      int p = 0;
      for (; p + 64 <= k; p += 64) {
        s0 = _mm512_fmadd_ps(_mm512_loadu_ps(arow + p), _mm512_loadu_ps(brow + p), s0);
        s1 = _mm512_fmadd_ps(_mm512_loadu_ps(arow + p + 16), _mm512_loadu_ps(brow + p + 16), s1);
        s2 = _mm512_fmadd_ps(_mm512_loadu_ps(arow + p + 32), _mm512_loadu_ps(brow + p + 32), s2);
        s3 = _mm512_fmadd_ps(_mm512_loadu_ps(arow + p + 48), _mm512_loadu_ps(brow + p + 48), s3);
      }
      for (; p + 16 <= k; p += 16) {
        s0 = _mm512_fmadd_ps(_mm512_loadu_ps(arow + p), _mm512_loadu_ps(brow + p), s0);
      }
      if (p < k) {
        __mmask16 mk = tail_mask(k - p);
        s1 = _mm512_fmadd_ps(_mm512_maskz_loadu_ps(mk, arow + p),
                             _mm512_maskz_loadu_ps(mk, brow + p), s1);
      }
      float sum = _mm512_reduce_add_ps(_mm512_add_ps(_mm512_add_ps(s0, s1), _mm512_add_ps(s2, s3)));
      c[i * n + j] = (acc ? c[i * n + j] : 0.0f) + sum;
    }
  }
}

void axpy(float alpha, const float* x, float* y, int n) {
  __m512 av = _mm512_set1_ps(alpha);
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    _mm512_storeu_ps(y + i, _mm512_fmadd_ps(av, _mm512_loadu_ps(x + i), _mm512_loadu_ps(y + i)));
  }
  if (i < n) {
    __mmask16 mk = tail_mask(n - i);
    __m512 r = _mm512_fmadd_ps(av, _mm512_maskz_loadu_ps(mk, x + i), _mm512_maskz_loadu_ps(mk, y + i));
    _mm512_mask_storeu_ps(y + i, mk, r);
  }
}

double dot(const float* x, const float* y, int n) {
  // Convert before multiplying: float*float products are exact in double,
  // matching the scalar kernel up to summation order.
  __m512d s0 = _mm512_setzero_pd();
  __m512d s1 = _mm512_setzero_pd();
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    __m512 xv = _mm512_loadu_ps(x + i);
    __m512 yv = _mm512_loadu_ps(y + i);
    s0 = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm512_castps512_ps256(xv)),
                         _mm512_cvtps_pd(_mm512_castps512_ps256(yv)), s0);
    __m256 xh = _mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(xv), 1));
    __m256 yh = _mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(yv), 1));
    s1 = _mm512_fmadd_pd(_mm512_cvtps_pd(xh), _mm512_cvtps_pd(yh), s1);
  }
  if (i < n) {
    __mmask16 mk = tail_mask(n - i);
    __m512 xv = _mm512_maskz_loadu_ps(mk, x + i);
    __m512 yv = _mm512_maskz_loadu_ps(mk, y + i);
    s0 = _mm512_fmadd_pd(_mm512_cvtps_pd(_mm512_castps512_ps256(xv)),
                         _mm512_cvtps_pd(_mm512_castps512_ps256(yv)), s0);
    __m256 xh = _mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(xv), 1));
    __m256 yh = _mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(yv), 1));
    s1 = _mm512_fmadd_pd(_mm512_cvtps_pd(xh), _mm512_cvtps_pd(yh), s1);
  }
  return _mm512_reduce_add_pd(_mm512_add_pd(s0, s1));
}

void silu(const float* x, float* y, int n) {
  const __m512 one = _mm512_set1_ps(1.0f);
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    __m512 xv = _mm512_loadu_ps(x + i);
    __m512 s = _mm512_div_ps(one, _mm512_add_ps(one, exp512(_mm512_sub_ps(_mm512_setzero_ps(), xv))));
    _mm512_storeu_ps(y + i, _mm512_mul_ps(xv, s));
  }
  if (i < n) {
    __mmask16 mk = tail_mask(n - i);
    __m512 xv = _mm512_maskz_loadu_ps(mk, x + i);
    __m512 s = _mm512_div_ps(one, _mm512_add_ps(one, exp512(_mm512_sub_ps(_mm512_setzero_ps(), xv))));
    _mm512_mask_storeu_ps(y + i, mk, _mm512_mul_ps(xv, s));
  }
}

void silu_grad(const float* x, const float* dy, float* dx, int n, bool acc) {
  const __m512 one = _mm512_set1_ps(1.0f);
  int i = 0;
  for (; i + 16 <= n; i += 16) {
    __m512 xv = _mm512_loadu_ps(x + i);
    __m512 s = _mm512_div_ps(one, _mm512_add_ps(one, exp512(_mm512_sub_ps(_mm512_setzero_ps(), xv))));
    __m512 g = _mm512_mul_ps(s, _mm512_fmadd_ps(xv, _mm512_sub_ps(one, s), one));
    __m512 out = _mm512_mul_ps(_mm512_loadu_ps(dy + i), g);
    if (acc) out = _mm512_add_ps(out, _mm512_loadu_ps(dx + i));
    _mm512_storeu_ps(dx + i, out);
  }
  for (; i < n; ++i) {
    float s = 1.0f / (1.0f + std::exp(-x[i]));
    float g = s * (1.0f + x[i] * (1.0f - s));
    dx[i] = (acc ? dx[i] : 0.0f) + dy[i] * g;
  }
}

void softmax_row(const float* x, float* y, int n) {
  __m512 mv = _mm512_set1_ps(-3.4028235e38f);
  int i = 0;
  for (; i + 16 <= n; i += 16) mv = _mm512_max_ps(mv, _mm512_loadu_ps(x + i));
  if (i < n) {
    __mmask16 mk = tail_mask(n - i);
    mv = _mm512_mask_loadu_ps(mv, mk, x + i);
  }
  float mx = _mm512_reduce_max_ps(mv);

  // Accumulate the partition sum in double vectors; masked-out tail lanes are
  // forced to zero so they contribute exactly nothing.
  __m512 mxv = _mm512_set1_ps(mx);
  __m512d s0 = _mm512_setzero_pd();
  __m512d s1 = _mm512_setzero_pd();
  i = 0;
  for (; i + 16 <= n; i += 16) {
    __m512 e = exp512(_mm512_sub_ps(_mm512_loadu_ps(x + i), mxv));
    _mm512_storeu_ps(y + i, e);
    s0 = _mm512_add_pd(s0, _mm512_cvtps_pd(_mm512_castps512_ps256(e)));
    s1 = _mm512_add_pd(s1, _mm512_cvtps_pd(_mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(e), 1))));
  }
  if (i < n) {
    __mmask16 mk = tail_mask(n - i);
    __m512 e = exp512(_mm512_sub_ps(_mm512_maskz_loadu_ps(mk, x + i), mxv));
    e = _mm512_maskz_mov_ps(mk, e);
    _mm512_mask_storeu_ps(y + i, mk, e);
    s0 = _mm512_add_pd(s0, _mm512_cvtps_pd(_mm512_castps512_ps256(e)));
    s1 = _mm512_add_pd(s1, _mm512_cvtps_pd(_mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(e), 1))));
  }
  double sum = _mm512_reduce_add_pd(_mm512_add_pd(s0, s1));
  float inv = static_cast<float>(1.0 / sum);
  __m512 iv = _mm512_set1_ps(inv);
  i = 0;
  for (; i + 16 <= n; i += 16) _mm512_storeu_ps(y + i, _mm512_mul_ps(_mm512_loadu_ps(y + i), iv));
  if (i < n) {
    __mmask16 mk = tail_mask(n - i);
    _mm512_mask_storeu_ps(y + i, mk, _mm512_mul_ps(_mm512_maskz_loadu_ps(mk, y + i), iv));
  }
}

}  // namespace

bool detail::avx512_supported() { return __builtin_cpu_supports("avx512f"); }

Table detail::avx512_table() {
  Table t;
  t.name = "avx512";
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
bool detail::avx512_supported() { return false; }
Table detail::avx512_table() { return detail::scalar_table(); }
}  // namespace mos::kernels

#endif
