#pragma once

#include <array>

#include "branchspec/specfun.hpp"

namespace branchspec {

struct TransitionMatrix {
    cplx a23, a24, a13, a14;
    cplx mu;
    double h = 1.0;
    // Log-space copies. Linear entries overflow once Re mu/h passes ~225.
    cplx log_a23, log_a24, log_a13, log_a14;

    // |det - 1| measured against the size of the two products, so that the
    // check stays meaningful when both products are astronomically large.
    double det_residual() const {
        cplx p = log_a23 + log_a14;
        cplx q = log_a24 + log_a13;
        double s = std::max({0.0, p.real(), q.real()});
        return std::abs(std::exp(p - s) - std::exp(q - s) - std::exp(-s));
    }
};

inline TransitionMatrix exact_matrix(cplx mu, double h) {
    if (!(h > 0)) throw std::invalid_argument("exact_matrix: h must be positive");
    TransitionMatrix t;
    t.mu = mu;
    t.h = h;
    const double lh = std::log(h);
    cplx w = I * mu / h;
    // 1/Gamma is entire; at a pole the entry is zero and its log is -inf.
    auto inv_gamma_log = [](cplx z) {
        try {
            return -log_gamma(z);
        } catch (const PoleError&) {
            return cplx(-INFINITY, 0.0);
        }
    };
    t.log_a23 = half_log_2pi + w * lh + pi * mu / (2 * h) + I * (pi / 4) + inv_gamma_log(0.5 - w);
    t.log_a14 = half_log_2pi - w * lh + pi * mu / (2 * h) - I * (pi / 4) + inv_gamma_log(0.5 + w);
    t.log_a24 = pi * mu / h - I * (pi / 2);
    t.log_a13 = pi * mu / h + I * (pi / 2);
    t.a23 = std::exp(t.log_a23);
    t.a14 = std::exp(t.log_a14);
    t.a24 = -std::exp(pi * mu / h + I * (pi / 2));
    t.a13 = std::exp(pi * mu / h + I * (pi / 2));
    return t;
}

enum class Entry { A23, A14 };
enum class Sector { RightReal, UpperHalf, LeftReal, LowerHalf };

inline constexpr double sector_margin = 0.1;

// Sector membership with the fixed angular margin.
inline bool in_sector(cplx mu, Sector s) {
    double a = std::arg(mu);
    switch (s) {
        case Sector::RightReal: return std::abs(a) <= pi / 2 - sector_margin;
        case Sector::LeftReal: return std::abs(wrap_pi(a - pi)) <= pi / 2 - sector_margin;
        case Sector::UpperHalf: return std::abs(wrap_pi(a + pi / 2)) >= sector_margin;
        case Sector::LowerHalf: return std::abs(wrap_pi(a - pi / 2)) >= sector_margin;
    }
    return false;
}

// Log of the large-|mu|/h tableau entry with the O(h/mu) remainders dropped.
inline cplx asymptotic_entry(Entry e, cplx mu, double h, Sector s) {
    if (!(h > 0) || std::abs(mu) / h < 5.0 * (1 - 1e-12)) throw SectorError("asymptotic_entry: |mu|/h < 5");
    if (!in_sector(mu, s)) throw SectorError("asymptotic_entry: mu outside sector");
    const cplx ih = I / h;
    const double q = pi * h / 4;
    switch (s) {
        case Sector::RightReal: {
            cplx L = std::log(mu);
            if (e == Entry::A23) return ih * (mu * L - I * pi * mu - mu + q);
            return ih * (-mu * L - I * pi * mu + mu - q);
        }
        case Sector::LeftReal: {
            cplx L = std::log(-mu);
            if (e == Entry::A23) return ih * (mu * L - mu + q);
            return ih * (-mu * L + mu - q);
        }
        case Sector::UpperHalf: {
            cplx L = std::log(mu / I);
            if (e == Entry::A23) return ih * (mu * L - I * pi * mu / 2.0 - mu + q);
            cplx base = ih * (-mu * L - I * pi * mu / 2.0 + mu - q);
            return log_add(base + ih * (I * pi * mu), base - ih * (I * pi * mu));
        }
        case Sector::LowerHalf: {
            cplx L = std::log(I * mu);
            if (e == Entry::A14) return ih * (-mu * L - I * pi * mu / 2.0 + mu - q);
            cplx base = ih * (mu * L - I * pi * mu / 2.0 - mu + q);
            return log_add(base + ih * (I * pi * mu), base - ih * (I * pi * mu));
        }
    }
    return {};
}

struct RenormalizedCoeffs {
    std::array<cplx, 4> d{};  // d1..d4
    cplx c23, c24, c13, c14;
    cplx log_c23, log_c24, log_c13, log_c14;
    double h = 1.0;

    cplx theta(int j, int k) const { return d[j - 1] - d[k - 1]; }

    // log det of the c-matrix minus the predicted phase -(i/h)(d1+d2-d3-d4).
    cplx log_det_phase() const {
        return -(I / h) * (d[0] + d[1] - d[2] - d[3]);
    }
};

inline RenormalizedCoeffs renormalize(const TransitionMatrix& tm, const std::array<cplx, 4>& d) {
    RenormalizedCoeffs r;
    r.d = d;
    r.h = tm.h;
    auto shift = [&](int j, int k) { return -(I / tm.h) * (d[j - 1] - d[k - 1]); };
    r.log_c23 = tm.log_a23 + shift(2, 3);
    r.log_c24 = tm.log_a24 + shift(2, 4);
    r.log_c13 = tm.log_a13 + shift(1, 3);
    r.log_c14 = tm.log_a14 + shift(1, 4);
    r.c23 = std::exp(r.log_c23);
    r.c24 = std::exp(r.log_c24);
    r.c13 = std::exp(r.log_c13);
    r.c14 = std::exp(r.log_c14);
    return r;
}

}  // namespace branchspec
