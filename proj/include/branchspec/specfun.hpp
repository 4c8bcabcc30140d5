#pragma once

#include "branchspec/common.hpp"

namespace branchspec {

enum class StirlingRegime { MinusBranch, PlusBranch };

namespace detail {

inline constexpr double lanczos_g = 7.0;
inline constexpr double lanczos_p[9] = {
    0.99999999999980993,  676.5203681218851,     -1259.1392167224028,
    771.32342877765313,   -176.61502916214059,   12.507343278686905,
    -0.13857109526572012, 9.9843695780195716e-6, 1.5056327351493116e-7};

inline constexpr double pole_tol = 1e-14;

// Lanczos sum, valid for Re z >= 1/2.
inline cplx log_gamma_right(cplx z) {
    z -= 1.0;
    cplx x = lanczos_p[0];
    for (int i = 1; i < 9; ++i) x += lanczos_p[i] / (z + double(i));
    cplx t = z + lanczos_g + 0.5;
    return half_log_2pi + (z + 0.5) * std::log(t) - t + std::log(x);
}

inline void check_pole(cplx z) {
    if (z.real() <= 0.5) {
        double n = std::round(z.real());
        if (n <= 0 && std::abs(z - n) < pole_tol)
            throw PoleError("log_gamma: argument at a nonpositive integer");
    }
}

}  // namespace detail

// log Gamma on the branch that is analytic off (-inf, 0] and real on the
// positive axis. For Re z < 1/2 the reflection formula is used with
// log sin(pi z) continued from the upper half-plane.
inline cplx log_gamma(cplx z) {
    detail::check_pole(z);
    if (z.real() >= 0.5) return detail::log_gamma_right(z);
    if (z.imag() < 0) return std::conj(log_gamma(std::conj(z)));
    cplx w = std::exp(2.0 * pi * I * z);
    cplx log_sin = -pi * I * z + std::log(0.5 * I) + std::log(1.0 - w);
    return std::log(pi) - log_sin - detail::log_gamma_right(1.0 - z);
}

namespace detail {

// Stirling exponent without remainder, for log(Gamma(1/2 -+ i mu/h)/sqrt(2 pi)).
inline cplx stirling_core(cplx mu, double h, StirlingRegime r) {
    const double lh = std::log(h);
    cplx w = I * mu / h;
    if (r == StirlingRegime::MinusBranch) return w - w * std::log(-I * mu) + w * lh;
    return -w + w * std::log(I * mu) - w * lh;
}

// Remainder without the sector check; used internally where the exact value
// of O_-(h/mu) is wanted off the Stirling sector as well.
inline cplx remainder_direct(cplx mu, double h, StirlingRegime r) {
    cplx z = r == StirlingRegime::MinusBranch ? 0.5 - I * mu / h : 0.5 + I * mu / h;
    return log_gamma(z) - half_log_2pi - stirling_core(mu, h, r);
}

// Off the imaginary axis the symmetric part O_+ + O_- = -log1p(e^{-+2 pi mu/h})
// is known in closed form, and only the antisymmetric part is taken from
// log_gamma. Direct subtraction would bury the exponentially small symmetric
// part under rounding of log_gamma.
inline cplx remainder_unchecked(cplx mu, double h, StirlingRegime r) {
    if (std::abs(mu.real()) < 0.5 * h) return remainder_direct(mu, h, r);
    cplx e = mu.real() > 0 ? std::exp(-2.0 * pi * mu / h) : std::exp(2.0 * pi * mu / h);
    cplx sum = -log1p(e);
    cplx diff = remainder_direct(mu, h, StirlingRegime::MinusBranch) -
                remainder_direct(mu, h, StirlingRegime::PlusBranch);
    if (mu.imag() == 0) diff = cplx(0.0, diff.imag());
    return r == StirlingRegime::MinusBranch ? 0.5 * (sum + diff) : 0.5 * (sum - diff);
}

inline void check_stirling(cplx mu, double h, StirlingRegime r) {
    if (!(h > 0)) throw RegimeError("stirling: h must be positive");
    if (std::abs(mu) / h < 2.0) throw RegimeError("stirling: |mu|/h < 2");
    double axis = r == StirlingRegime::MinusBranch ? -pi / 2 : pi / 2;
    if (std::abs(wrap_pi(std::arg(mu) - axis)) < 0.2)
        throw RegimeError("stirling: mu inside the excluded cone");
}

}  // namespace detail

inline cplx stirling_log_gamma(cplx mu, double h, StirlingRegime r) {
    detail::check_stirling(mu, h, r);
    return detail::stirling_core(mu, h, r);
}

inline cplx stirling_remainder(cplx mu, double h, StirlingRegime r) {
    detail::check_stirling(mu, h, r);
    return detail::remainder_unchecked(mu, h, r);
}

// log(2 cosh w), principal-ish branch, overflow free.
inline cplx log_2cosh(cplx w) {
    if (w.real() < 0) w = -w;
    return w + std::log(1.0 + std::exp(-2.0 * w));
}

inline double reflection_residual(cplx mu, double h) {
    cplx s = log_gamma(0.5 + I * mu / h) + log_gamma(0.5 - I * mu / h) +
             log_2cosh(pi * mu / h) - std::log(2.0 * pi);
    return std::abs(std::exp(s) - 1.0);
}

}  // namespace branchspec
