#include "wncs/simd.hpp"

#include <algorithm>

namespace wncs::simd {
namespace {

double dot_ref(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy_ref(double alpha, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void affine_rows_ref(const double* X, std::size_t rows, std::size_t in, const double* W,
                     std::size_t out, const double* bias, double* Y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = X + r * in;
        double* y = Y + r * out;
        for (std::size_t o = 0; o < out; ++o) y[o] = bias[o] + dot_ref(x, W + o * in, in);
    }
}

void affine_grad_params_ref(const double* X, const double* dY, std::size_t rows, std::size_t in,
                            std::size_t out, double* dW, double* db) {
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = X + r * in;
        const double* g = dY + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            if (g[o] == 0.0) continue;
            axpy_ref(g[o], x, dW + o * in, in);
            db[o] += g[o];
        }
    }
}

void affine_grad_input_ref(const double* dY, std::size_t rows, std::size_t out, const double* W,
                           std::size_t in, double* dX) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* dx = dX + r * in;
        std::fill(dx, dx + in, 0.0);
        const double* g = dY + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            if (g[o] == 0.0) continue;
            axpy_ref(g[o], W + o * in, dx, in);
        }
    }
}

void relu_ref(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_mask_ref(const double* pre, double* g, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (!(pre[i] > 0.0)) g[i] = 0.0;
}

}  // namespace

const KernelTable& scalar_kernels() {
    static const KernelTable table{dot_ref,
                                   axpy_ref,
                                   affine_rows_ref,
                                   affine_grad_params_ref,
                                   affine_grad_input_ref,
                                   relu_ref,
                                   relu_mask_ref};
    return table;
}

}  // namespace wncs::simd
