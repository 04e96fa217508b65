#include "wncs/simd.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace wncs::simd {

#if WNCS_HAVE_AVX2
namespace detail {
const KernelTable& avx2_table();
}
#endif

bool avx2_available() {
#if WNCS_HAVE_AVX2 && (defined(__x86_64__) || defined(__i386__))
    static const bool ok = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
#else
    return false;
#endif
}

const KernelTable& avx2_kernels() {
#if WNCS_HAVE_AVX2
    if (avx2_available()) return detail::avx2_table();
#endif
    throw std::runtime_error("AVX2/FMA kernels are not available on this CPU or build");
}

const KernelTable& kernels(Isa isa) {
    return isa == Isa::avx2 ? avx2_kernels() : scalar_kernels();
}

namespace {

Isa detect() {
    if (const char* env = std::getenv("WNCS_SIMD")) {
        if (std::string(env) == "scalar") return Isa::scalar;
    }
    return avx2_available() ? Isa::avx2 : Isa::scalar;
}

std::atomic<Isa>& current() {
    static std::atomic<Isa> isa{detect()};
    return isa;
}

}  // namespace

Isa active_isa() { return current().load(std::memory_order_relaxed); }

void set_active_isa(Isa isa) {
    if (isa == Isa::avx2 && !avx2_available())
        throw std::runtime_error("cannot select AVX2 kernels: not supported here");
    current().store(isa, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

}  // namespace wncs::simd
