#pragma once

// Dense double-precision kernels used by the network layers.
//
// Every kernel has a portable scalar reference and, on x86-64, an AVX2/FMA
// variant. The variant is picked once at startup from CPUID; set the
// environment variable WNCS_SIMD=scalar to force the reference path.
// Results of the two paths agree to rounding (summation order differs), and
// each path is bit-reproducible on its own.

#include <cstddef>
#include <span>
#include <string_view>

namespace wncs::simd {

enum class Isa { scalar, avx2 };

// Row-major matrices throughout: X is rows x in, W is out x in.
struct KernelTable {
    double (*dot)(const double* a, const double* b, std::size_t n);
    // y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    // Y[r, o] = bias[o] + sum_i X[r, i] * W[o, i]
    void (*affine_rows)(const double* X, std::size_t rows, std::size_t in, const double* W,
                        std::size_t out, const double* bias, double* Y);
    // dW[o, i] += sum_r dY[r, o] * X[r, i];  db[o] += sum_r dY[r, o]
    void (*affine_grad_params)(const double* X, const double* dY, std::size_t rows,
                               std::size_t in, std::size_t out, double* dW, double* db);
    // dX[r, i] = sum_o dY[r, o] * W[o, i]
    void (*affine_grad_input)(const double* dY, std::size_t rows, std::size_t out,
                              const double* W, std::size_t in, double* dX);
    // y = max(x, 0)
    void (*relu)(const double* x, double* y, std::size_t n);
    // g = (pre > 0) ? g : 0
    void (*relu_mask)(const double* pre, double* g, std::size_t n);
};

const KernelTable& scalar_kernels();
bool avx2_available();
// Throws std::runtime_error if the CPU (or the build) lacks AVX2/FMA.
const KernelTable& avx2_kernels();

const KernelTable& kernels(Isa isa);
Isa active_isa();
void set_active_isa(Isa isa);
std::string_view isa_name(Isa isa);

inline const KernelTable& active() { return kernels(active_isa()); }

inline double dot(std::span<const double> a, std::span<const double> b) {
    return active().dot(a.data(), b.data(), a.size());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    active().axpy(alpha, x.data(), y.data(), x.size());
}

}  // namespace wncs::simd
