// AVX2/FMA variants. This translation unit is compiled with -mavx2 -mfma and
// must only be entered after avx2_available() returned true.
#include "wncs/simd.hpp"

#include <immintrin.h>

#include <algorithm>

namespace wncs::simd {
namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4)
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double s = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

inline __m256d reduce4(__m256d a0, __m256d a1, __m256d a2, __m256d a3) {
    const __m256d s01 = _mm256_hadd_pd(a0, a1);
    const __m256d s23 = _mm256_hadd_pd(a2, a3);
    const __m256d swap = _mm256_permute2f128_pd(s01, s23, 0x21);
    const __m256d blend = _mm256_blend_pd(s01, s23, 0b1100);
    return _mm256_add_pd(swap, blend);
}

// One row against four output neurons; returns the four dot products.
inline __m256d row_x4(const double* x, const double* w0, std::size_t in) {
    const double* w1 = w0 + in;
    const double* w2 = w1 + in;
    const double* w3 = w2 + in;
    __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd();
    __m256d a2 = _mm256_setzero_pd(), a3 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= in; i += 4) {
        const __m256d vx = _mm256_loadu_pd(x + i);
        a0 = _mm256_fmadd_pd(vx, _mm256_loadu_pd(w0 + i), a0);
        a1 = _mm256_fmadd_pd(vx, _mm256_loadu_pd(w1 + i), a1);
        a2 = _mm256_fmadd_pd(vx, _mm256_loadu_pd(w2 + i), a2);
        a3 = _mm256_fmadd_pd(vx, _mm256_loadu_pd(w3 + i), a3);
    }
    __m256d sum = reduce4(a0, a1, a2, a3);
    if (i < in) {
        alignas(32) double tail[4] = {0.0, 0.0, 0.0, 0.0};
        for (; i < in; ++i) {
            tail[0] += x[i] * w0[i];
            tail[1] += x[i] * w1[i];
            tail[2] += x[i] * w2[i];
            tail[3] += x[i] * w3[i];
        }
        sum = _mm256_add_pd(sum, _mm256_load_pd(tail));
    }
    return sum;
}

// Two rows by four output neurons per pass: each weight chunk is loaded once
// for both rows, each input chunk once for all four neurons.
void affine_rows_avx2(const double* X, std::size_t rows, std::size_t in, const double* W,
                      std::size_t out, const double* bias, double* Y) {
    std::size_t r = 0;
    for (; r + 2 <= rows; r += 2) {
        const double* xa = X + r * in;
        const double* xb = xa + in;
        double* ya = Y + r * out;
        double* yb = ya + out;
        std::size_t o = 0;
        for (; o + 4 <= out; o += 4) {
            const double* w0 = W + o * in;
            const double* w1 = w0 + in;
            const double* w2 = w1 + in;
            const double* w3 = w2 + in;
            __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd();
            __m256d a2 = _mm256_setzero_pd(), a3 = _mm256_setzero_pd();
            __m256d b0 = _mm256_setzero_pd(), b1 = _mm256_setzero_pd();
            __m256d b2 = _mm256_setzero_pd(), b3 = _mm256_setzero_pd();
            std::size_t i = 0;
            for (; i + 4 <= in; i += 4) {
                const __m256d va = _mm256_loadu_pd(xa + i);
                const __m256d vb = _mm256_loadu_pd(xb + i);
                const __m256d v0 = _mm256_loadu_pd(w0 + i);
                const __m256d v1 = _mm256_loadu_pd(w1 + i);
                const __m256d v2 = _mm256_loadu_pd(w2 + i);
                const __m256d v3 = _mm256_loadu_pd(w3 + i);
                a0 = _mm256_fmadd_pd(va, v0, a0);
                a1 = _mm256_fmadd_pd(va, v1, a1);
                a2 = _mm256_fmadd_pd(va, v2, a2);
                a3 = _mm256_fmadd_pd(va, v3, a3);
                b0 = _mm256_fmadd_pd(vb, v0, b0);
                b1 = _mm256_fmadd_pd(vb, v1, b1);
                b2 = _mm256_fmadd_pd(vb, v2, b2);
                b3 = _mm256_fmadd_pd(vb, v3, b3);
            }
            __m256d sa = reduce4(a0, a1, a2, a3);
            __m256d sb = reduce4(b0, b1, b2, b3);
            if (i < in) {
                alignas(32) double ta[4] = {0.0, 0.0, 0.0, 0.0};
                alignas(32) double tb[4] = {0.0, 0.0, 0.0, 0.0};
                for (; i < in; ++i) {
                    ta[0] += xa[i] * w0[i];
                    ta[1] += xa[i] * w1[i];
                    ta[2] += xa[i] * w2[i];
                    ta[3] += xa[i] * w3[i];
                    tb[0] += xb[i] * w0[i];
                    tb[1] += xb[i] * w1[i];
                    tb[2] += xb[i] * w2[i];
                    tb[3] += xb[i] * w3[i];
                }
                sa = _mm256_add_pd(sa, _mm256_load_pd(ta));
                sb = _mm256_add_pd(sb, _mm256_load_pd(tb));
            }
            const __m256d vbias = _mm256_loadu_pd(bias + o);
            _mm256_storeu_pd(ya + o, _mm256_add_pd(vbias, sa));
            _mm256_storeu_pd(yb + o, _mm256_add_pd(vbias, sb));
        }
        for (; o < out; ++o) {
            ya[o] = bias[o] + dot_avx2(xa, W + o * in, in);
            yb[o] = bias[o] + dot_avx2(xb, W + o * in, in);
        }
    }
    for (; r < rows; ++r) {
        const double* x = X + r * in;
        double* y = Y + r * out;
        std::size_t o = 0;
        for (; o + 4 <= out; o += 4)
            _mm256_storeu_pd(y + o, _mm256_add_pd(_mm256_loadu_pd(bias + o), row_x4(x, W + o * in, in)));
        for (; o < out; ++o) y[o] = bias[o] + dot_avx2(x, W + o * in, in);
    }
}

// Rows are processed in blocks so the block of X stays cache-resident while each
// 4-wide slice of dW is accumulated in a register.
constexpr std::size_t kRowBlock = 64;

void affine_grad_params_avx2(const double* X, const double* dY, std::size_t rows, std::size_t in,
                             std::size_t out, double* dW, double* db) {
    for (std::size_t r0 = 0; r0 < rows; r0 += kRowBlock) {
        const std::size_t r1 = std::min(rows, r0 + kRowBlock);
        for (std::size_t o = 0; o < out; ++o) {
            double* dw = dW + o * in;
            std::size_t i = 0;
            for (; i + 16 <= in; i += 16) {
                __m256d a0 = _mm256_loadu_pd(dw + i), a1 = _mm256_loadu_pd(dw + i + 4);
                __m256d a2 = _mm256_loadu_pd(dw + i + 8), a3 = _mm256_loadu_pd(dw + i + 12);
                for (std::size_t r = r0; r < r1; ++r) {
                    const __m256d g = _mm256_set1_pd(dY[r * out + o]);
                    const double* x = X + r * in + i;
                    a0 = _mm256_fmadd_pd(g, _mm256_loadu_pd(x), a0);
                    a1 = _mm256_fmadd_pd(g, _mm256_loadu_pd(x + 4), a1);
                    a2 = _mm256_fmadd_pd(g, _mm256_loadu_pd(x + 8), a2);
                    a3 = _mm256_fmadd_pd(g, _mm256_loadu_pd(x + 12), a3);
                }
                _mm256_storeu_pd(dw + i, a0);
                _mm256_storeu_pd(dw + i + 4, a1);
                _mm256_storeu_pd(dw + i + 8, a2);
                _mm256_storeu_pd(dw + i + 12, a3);
            }
            for (; i + 4 <= in; i += 4) {
                __m256d acc = _mm256_loadu_pd(dw + i);
                for (std::size_t r = r0; r < r1; ++r)
                    acc = _mm256_fmadd_pd(_mm256_set1_pd(dY[r * out + o]),
                                          _mm256_loadu_pd(X + r * in + i), acc);
                _mm256_storeu_pd(dw + i, acc);
            }
            for (; i < in; ++i) {
                double acc = dw[i];
                for (std::size_t r = r0; r < r1; ++r) acc += dY[r * out + o] * X[r * in + i];
                dw[i] = acc;
            }
            double b = db[o];
            for (std::size_t r = r0; r < r1; ++r) b += dY[r * out + o];
            db[o] = b;
        }
    }
}

void affine_grad_input_avx2(const double* dY, std::size_t rows, std::size_t out, const double* W,
                            std::size_t in, double* dX) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* dx = dX + r * in;
        const double* g = dY + r * out;
        std::size_t i = 0;
        for (; i + 16 <= in; i += 16) {
            __m256d a0 = _mm256_setzero_pd(), a1 = _mm256_setzero_pd();
            __m256d a2 = _mm256_setzero_pd(), a3 = _mm256_setzero_pd();
            for (std::size_t o = 0; o < out; ++o) {
                const __m256d vg = _mm256_set1_pd(g[o]);
                const double* w = W + o * in + i;
                a0 = _mm256_fmadd_pd(vg, _mm256_loadu_pd(w), a0);
                a1 = _mm256_fmadd_pd(vg, _mm256_loadu_pd(w + 4), a1);
                a2 = _mm256_fmadd_pd(vg, _mm256_loadu_pd(w + 8), a2);
                a3 = _mm256_fmadd_pd(vg, _mm256_loadu_pd(w + 12), a3);
            }
            _mm256_storeu_pd(dx + i, a0);
            _mm256_storeu_pd(dx + i + 4, a1);
            _mm256_storeu_pd(dx + i + 8, a2);
            _mm256_storeu_pd(dx + i + 12, a3);
        }
        for (; i + 4 <= in; i += 4) {
            __m256d acc = _mm256_setzero_pd();
            for (std::size_t o = 0; o < out; ++o)
                acc = _mm256_fmadd_pd(_mm256_set1_pd(g[o]), _mm256_loadu_pd(W + o * in + i), acc);
            _mm256_storeu_pd(dx + i, acc);
        }
        for (; i < in; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) acc += g[o] * W[o * in + i];
            dx[i] = acc;
        }
    }
}

void relu_avx2(const double* x, double* y, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(y + i, _mm256_max_pd(_mm256_loadu_pd(x + i), zero));
    for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_mask_avx2(const double* pre, double* g, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d keep = _mm256_cmp_pd(_mm256_loadu_pd(pre + i), zero, _CMP_GT_OQ);
        _mm256_storeu_pd(g + i, _mm256_and_pd(_mm256_loadu_pd(g + i), keep));
    }
    for (; i < n; ++i)
        if (!(pre[i] > 0.0)) g[i] = 0.0;
}

}  // namespace

namespace detail {
const KernelTable& avx2_table() {
    static const KernelTable table{dot_avx2,
                                   axpy_avx2,
                                   affine_rows_avx2,
                                   affine_grad_params_avx2,
                                   affine_grad_input_avx2,
                                   relu_avx2,
                                   relu_mask_avx2};
    return table;
}
}  // namespace detail

}  // namespace wncs::simd
