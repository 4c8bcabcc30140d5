#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstdlib>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace branchspec {

using cplx = std::complex<double>;

inline constexpr double pi = std::numbers::pi;
inline constexpr cplx I{0.0, 1.0};
inline const double half_log_2pi = 0.5 * std::log(2.0 * pi);

// Error hierarchy. Every module throws one of these so the CLI can map
// numerical failures to a single exit code.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct PoleError : NumericalError {
    using NumericalError::NumericalError;
};
struct RegimeError : NumericalError {
    using NumericalError::NumericalError;
};
struct SectorError : NumericalError {
    using NumericalError::NumericalError;
};
struct NoConvergence : NumericalError {
    using NumericalError::NumericalError;
};
struct DegenerateError : NumericalError {
    using NumericalError::NumericalError;
};

// log(e^a + e^b) without overflow.
inline cplx log_add(cplx a, cplx b) {
    if (a.real() < b.real()) std::swap(a, b);
    if (std::isinf(b.real()) && b.real() < 0) return a;
    return a + std::log(1.0 + std::exp(b - a));
}

// log(1 + z) accurate for small |z|.
inline cplx log1p(cplx z) {
    if (std::abs(z) < 1e-4) return z * (1.0 - z * (0.5 - z * (1.0 / 3 - z * 0.25)));
    return std::log(1.0 + z);
}

inline double wrap_pi(double a) {
    return std::remainder(a, 2.0 * pi);
}

// Worker count: BRANCHSPEC_THREADS caps hardware_concurrency.
inline unsigned thread_count() {
    unsigned n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("BRANCHSPEC_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
    }
    return n;
}

// Calls fn(i) for i in [0, n). Results must be written to preallocated slots
// so the output order never depends on scheduling.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    unsigned workers = std::min<std::size_t>(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::atomic<bool> failed{false};
    auto work = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n || failed.load()) return;
            try {
                fn(i);
            } catch (...) {
                if (!failed.exchange(true)) err = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace branchspec
