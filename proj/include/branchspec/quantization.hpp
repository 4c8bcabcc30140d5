#pragma once

#include <functional>
#include <optional>
#include <utility>

#include "branchspec/transition.hpp"

namespace branchspec {

struct SemiclassicalParams {
    double h = 0.01;
    double epsilon = 0.0;
    bool strict = false;

    // h^2/eps, zero in the unperturbed limit.
    double alpha2() const { return epsilon > 0 ? h * h / epsilon : 0.0; }
    double eps_total() const { return epsilon + alpha2(); }

    void validate() const {
        if (!(h > 0)) throw std::invalid_argument("h must be positive");
        if (epsilon < 0) throw std::invalid_argument("epsilon must be nonnegative");
        if (strict && epsilon > 0) {
            if (epsilon / (h * h) < 10) throw std::invalid_argument("strict regime: eps/h^2 < 10");
            if (epsilon / std::sqrt(h) > 0.1) throw std::invalid_argument("strict regime: eps/sqrt(h) > 0.1");
        }
    }
};

// Polynomial with complex coefficients, c[k] multiplies mu^k.
struct Polynomial {
    std::vector<cplx> c;

    cplx operator()(cplx x) const {
        cplx r = 0;
        for (auto it = c.rbegin(); it != c.rend(); ++it) r = r * x + *it;
        return r;
    }
    cplx deriv(cplx x) const {
        cplx r = 0;
        for (std::size_t k = c.size(); k-- > 1;) r = r * x + double(k) * c[k];
        return r;
    }
};

// Bivariate polynomial, c[i][j] multiplies tau^i mu^j.
struct Polynomial2 {
    std::vector<std::vector<cplx>> c;

    cplx operator()(cplx tau, cplx mu) const {
        cplx r = 0, tp = 1;
        for (const auto& row : c) {
            cplx s = 0;
            for (auto it = row.rbegin(); it != row.rend(); ++it) s = s * mu + *it;
            r += tp * s;
            tp *= tau;
        }
        return r;
    }
};

// The two actions of the global condition. Throughout this module they are
// the shifted actions that already contain the Floquet, Maslov and pi h/2
// contributions; see fold_actions for the one place raw actions appear.
struct ActionModel {
    Polynomial S12, S34;
    std::string description;
    bool physical = false;

    // Im S = O(eps + h^2/eps) on the real axis. The constant is generous on
    // purpose; it only guards against obviously unphysical inputs.
    bool check_physical(const SemiclassicalParams& p, double C = 10.0) const {
        double bound = C * p.eps_total() + 1e-14;
        for (double x : {-0.1, 0.0, 0.1})
            if (std::abs(S12(x).imag()) > bound || std::abs(S34(x).imag()) > bound) return false;
        return true;
    }
};

enum class Regime { Case1Large, Case2Large, Case1Small, Case2Small };
enum class Label { L1, L1p, L1m, L2, L3, L4, L4p, L4m };

inline bool is_case1(Regime r) { return r == Regime::Case1Large || r == Regime::Case1Small; }
inline bool is_small(Regime r) { return r == Regime::Case1Small || r == Regime::Case2Small; }

inline const char* to_string(Regime r) {
    switch (r) {
        case Regime::Case1Large: return "Case1Large";
        case Regime::Case2Large: return "Case2Large";
        case Regime::Case1Small: return "Case1Small";
        case Regime::Case2Small: return "Case2Small";
    }
    return "?";
}

inline const char* to_string(Label l) {
    switch (l) {
        case Label::L1: return "1";
        case Label::L1p: return "1+";
        case Label::L1m: return "1-";
        case Label::L2: return "2";
        case Label::L3: return "3";
        case Label::L4: return "4";
        case Label::L4p: return "4+";
        case Label::L4m: return "4-";
    }
    return "?";
}

struct Term {
    Label label;
    cplx log_value;
    double rate;  // h Re log_value
};

struct TermSet {
    Regime regime;
    std::vector<Term> terms;

    const Term* find(Label l) const {
        for (const auto& t : terms)
            if (t.label == l) return &t;
        return nullptr;
    }
    const Term& get(Label l) const {
        if (auto* t = find(l)) return *t;
        throw std::out_of_range(std::string("term not present: ") + to_string(l));
    }
    double max_rate() const {
        double m = -INFINITY;
        for (const auto& t : terms) m = std::max(m, t.rate);
        return m;
    }
};

// Fixed regime constants: sector opening 1/C_sector, small disc radius C_small*h.
inline constexpr double C_sector = 8.0;
inline constexpr double C_small = 10.0;

inline bool case1_admissible(cplx mu) {
    if (mu == 0.0) return true;
    return std::abs(wrap_pi(std::arg(mu) - pi / 2)) <= pi - 1.0 / C_sector;
}
inline bool case2_admissible(cplx mu) {
    if (mu == 0.0) return true;
    return std::abs(wrap_pi(std::arg(mu) + pi / 2)) <= pi - 1.0 / C_sector;
}

inline Regime choose_regime(cplx mu, const SemiclassicalParams& p) {
    bool small = std::abs(mu) <= C_small * p.h;
    if (case1_admissible(mu)) return small ? Regime::Case1Small : Regime::Case1Large;
    return small ? Regime::Case2Small : Regime::Case2Large;
}

inline bool regime_admissible(cplx mu, const SemiclassicalParams& p, Regime r) {
    bool small = std::abs(mu) <= C_small * p.h;
    if (is_small(r) != small) return false;
    return is_case1(r) ? case1_admissible(mu) : case2_admissible(mu);
}

inline TermSet term_set(cplx mu, const SemiclassicalParams& p, const ActionModel& am, Regime r,
                        bool check = true) {
    if (check && !regime_admissible(mu, p, r))
        throw RegimeError(std::string("term_set: regime not admissible: ") + to_string(r));
    const double h = p.h;
    const cplx w = I * mu / h;
    const double lh = std::log(h);
    const cplx s12 = (I / h) * am.S12(mu);
    const cplx s34 = (I / h) * am.S34(mu);
    const cplx half = pi * mu / (2 * h);
    TermSet ts{r, {}};
    auto add = [&](Label l, cplx v) { ts.terms.push_back({l, v, h * v.real()}); };
    if (is_case1(r)) {
        cplx lg = log_gamma(0.5 - w);
        add(Label::L1, s12 + s34 + half_log_2pi + w * lh + I * (pi / 4) - lg);
        add(Label::L2, s12 + half);
        add(Label::L3, s34 + half);
        cplx a4 = lg - half_log_2pi - w * lh - I * (pi / 4);
        add(Label::L4p, a4 + 2.0 * half);
        add(Label::L4m, a4 - 2.0 * half);
    } else {
        cplx lg = log_gamma(0.5 + w);
        cplx a1 = s12 + s34 + lg - half_log_2pi + w * lh + I * (pi / 4);
        add(Label::L1p, a1 + 2.0 * half);
        add(Label::L1m, a1 - 2.0 * half);
        add(Label::L2, s12 + half);
        add(Label::L3, s34 + half);
        add(Label::L4, -lg + half_log_2pi - w * lh - I * (pi / 4));
    }
    return ts;
}

// G = value * exp(offset/h); offset is the largest rate.
struct GValue {
    cplx value;
    double offset;
    Regime regime;
};

inline GValue sum_terms(const TermSet& ts, double h) {
    double off = ts.max_rate();
    cplx v = 0;
    for (const auto& t : ts.terms) v += std::exp(t.log_value - off / h);
    return {v, off, ts.regime};
}

inline GValue eval_G(cplx mu, const SemiclassicalParams& p, const ActionModel& am) {
    return sum_terms(term_set(mu, p, am, choose_regime(mu, p), false), p.h);
}

// log G on a fixed branch of the scale; handy for phase tracking.
inline cplx log_G(cplx mu, const SemiclassicalParams& p, const ActionModel& am) {
    auto g = eval_G(mu, p, am);
    return std::log(g.value) + g.offset / p.h;
}

struct ExponentGeometry {
    double X, Y, Ytilde;
};

inline ExponentGeometry exponent_geometry(cplx mu, double h) {
    cplx om = detail::remainder_unchecked(mu, h, StirlingRegime::MinusBranch);
    cplx op = detail::remainder_unchecked(mu, h, StirlingRegime::PlusBranch);
    double Y = mu.real() * std::arg(-I * mu) - mu.imag() + h * om.real();
    double Yt = mu.real() * std::arg(I * mu) - mu.imag() - h * op.real();
    return {Y + pi / 2 * mu.real(), Y, Yt};
}

// ---------------------------------------------------------------------------
// Global quantization condition and Grushin determinants.

// Scaled complex number: value * exp(log_scale).
struct Scaled {
    cplx value;
    double log_scale;
    cplx full() const { return value * std::exp(log_scale); }
};

inline Scaled scaled_sum(const std::vector<std::pair<cplx, double>>& logs_signs) {
    double m = -INFINITY;
    for (auto& [l, s] : logs_signs) m = std::max(m, l.real());
    cplx v = 0;
    for (auto& [l, s] : logs_signs) v += s * std::exp(l - m);
    return {v, m};
}

// Shifted actions from raw ones: S~12 = S12 + theta12 + 2 pi h theta2 + pi h/2,
// S~34 = S34 + theta34 + 2 pi h theta1 + pi h/2. Only constant terms move.
inline ActionModel fold_actions(const ActionModel& raw, const RenormalizedCoeffs& c,
                                std::pair<double, double> theta, double h) {
    ActionModel t = raw;
    if (t.S12.c.empty()) t.S12.c.push_back(0);
    if (t.S34.c.empty()) t.S34.c.push_back(0);
    t.S12.c[0] += c.theta(1, 2) + 2 * pi * h * theta.second + pi * h / 2;
    t.S34.c[0] += c.theta(3, 4) + 2 * pi * h * theta.first + pi * h / 2;
    return t;
}

// Right side of the global condition
//   c23 e^{2 pi i(t1+t2) + i(S34+S12)/h} + c24 e^{2 pi i t2 + i S12/h}
//   - c13 e^{2 pi i t1 + i S34/h} - c14
// with raw actions taken from am.
inline Scaled quantization_residual(cplx mu, const SemiclassicalParams& p, const ActionModel& am,
                                    const RenormalizedCoeffs& c, std::pair<double, double> theta) {
    const double h = p.h;
    cplx s12 = (I / h) * am.S12(mu), s34 = (I / h) * am.S34(mu);
    cplx f1 = 2 * pi * I * theta.first, f2 = 2 * pi * I * theta.second;
    return scaled_sum({{c.log_c23 + f1 + f2 + s12 + s34, 1.0},
                       {c.log_c24 + f2 + s12, 1.0},
                       {c.log_c13 + f1 + s34, -1.0},
                       {c.log_c14, -1.0}});
}

// theta~1 = theta1 + S34/(2 pi h), theta~2 = theta2 + S12/(2 pi h).
inline std::pair<cplx, cplx> tilde_theta(cplx mu, double h, const ActionModel& raw,
                                         std::pair<double, double> theta) {
    return {theta.first + raw.S34(mu) / (2 * pi * h), theta.second + raw.S12(mu) / (2 * pi * h)};
}

enum class GrushinVariant { UpperGrushin, LowerGrushin };

inline cplx det_E_minus_plus(GrushinVariant v, cplx mu, const SemiclassicalParams& p,
                             const RenormalizedCoeffs& c, std::pair<cplx, cplx> tt) {
    (void)mu;
    (void)p;
    const cplx e1 = 2 * pi * I * tt.first, e2 = 2 * pi * I * tt.second;
    constexpr double floor = -700.0;
    if (v == GrushinVariant::UpperGrushin) {
        if (c.log_c23.real() < floor) throw DegenerateError("det_E_minus_plus: c23 underflows");
        cplx l = c.log_c23;
        return std::exp(e1 + e2) + std::exp(c.log_c24 - l + e2) - std::exp(c.log_c13 - l + e1) -
               std::exp(c.log_c14 - l);
    }
    if (c.log_c14.real() < floor) throw DegenerateError("det_E_minus_plus: c14 underflows");
    cplx l = c.log_c14;
    return std::exp(c.log_c23 - l) + std::exp(c.log_c24 - l - e1) - std::exp(c.log_c13 - l - e2) -
           std::exp(-e1 - e2);
}

// ---------------------------------------------------------------------------
// Bohr-Sommerfeld branches.

enum class BSBranch { Ext, LeftInt, RightInt };

struct SectorEscape : NumericalError {
    using NumericalError::NumericalError;
};

struct BSResult {
    cplx mu;
    bool converged = false;
    int iterations = 0;
    double residual = INFINITY;
};

inline constexpr double bs_sector_C = 8.0;
inline constexpr double bs_min_re_over_h = 2.0;

// Branch function minus its right side; zero at a root.
inline cplx bs_function(BSBranch b, cplx mu, int k, const SemiclassicalParams& p, const ActionModel& am) {
    const double h = p.h;
    cplx om = detail::remainder_unchecked(mu, h, StirlingRegime::MinusBranch);
    if (b == BSBranch::Ext)
        return am.S12(mu) + am.S34(mu) + 2.0 * mu * (std::log(-mu) - 1.0) + pi * h / 2 + 2.0 * I * h * om -
               2 * pi * (k + 0.5) * h;
    cplx S = b == BSBranch::RightInt ? am.S12(mu) : am.S34(mu);
    return mu * std::log(mu) - mu + pi * h / 4 + S + I * h * om - 2 * pi * h * (k + 0.5);
}

inline bool bs_in_sector(BSBranch b, cplx mu, double h) {
    double x = b == BSBranch::Ext ? -mu.real() : mu.real();
    return x >= bs_min_re_over_h * h && std::abs(mu.imag()) <= x / bs_sector_C;
}

// Real-axis seed: scan the real part of the branch function on the sector and
// bisect the first sign change nearest to the expected root.
inline std::optional<double> bs_seed(BSBranch b, int k, const SemiclassicalParams& p, const ActionModel& am,
                                     double xmax = 0.5) {
    const double h = p.h;
    auto g = [&](double x) {
        double m = b == BSBranch::Ext ? -x : x;
        cplx S = b == BSBranch::Ext ? am.S12(m) + am.S34(m)
                                    : (b == BSBranch::RightInt ? am.S12(m) : am.S34(m));
        double lead = b == BSBranch::Ext ? -2 * x * (std::log(x) - 1) + pi * h / 2
                                         : x * std::log(x) - x + pi * h / 4;
        return lead + S.real() - 2 * pi * h * (k + 0.5);
    };
    double x0 = bs_min_re_over_h * h;
    const int n = 4000;
    double prev = g(x0);
    for (int i = 1; i <= n; ++i) {
        double x1 = x0 + (xmax - x0) * i / n;
        double cur = g(x1);
        if ((prev <= 0) != (cur <= 0)) {
            double lo = x0 + (xmax - x0) * (i - 1) / n, hi = x1, glo = prev;
            for (int it = 0; it < 80; ++it) {
                double mid = 0.5 * (lo + hi);
                double gm = g(mid);
                if ((gm <= 0) == (glo <= 0)) lo = mid, glo = gm;
                else hi = mid;
            }
            return b == BSBranch::Ext ? -0.5 * (lo + hi) : 0.5 * (lo + hi);
        }
        prev = cur;
    }
    return std::nullopt;
}

inline BSResult bohr_sommerfeld_solve(BSBranch b, int k, const SemiclassicalParams& p, const ActionModel& am,
                                      std::optional<cplx> guess = std::nullopt) {
    p.validate();
    cplx mu;
    if (guess) {
        mu = *guess;
    } else {
        auto s = bs_seed(b, k, p, am);
        if (!s) throw SectorEscape("bohr_sommerfeld_solve: no real seed inside the sector");
        mu = *s;
    }
    BSResult r;
    for (int it = 0; it < 60; ++it) {
        if (!bs_in_sector(b, mu, p.h)) throw SectorEscape("bohr_sommerfeld_solve: iterate left the sector");
        cplx f = bs_function(b, mu, k, p, am);
        r.mu = mu;
        r.iterations = it;
        r.residual = std::abs(f);
        if (r.residual <= 1e-12) {
            r.converged = true;
            return r;
        }
        cplx d = 1e-6 * std::abs(mu);
        cplx df = (bs_function(b, mu + d, k, p, am) - bs_function(b, mu - d, k, p, am)) / (2.0 * d);
        mu -= f / df;
    }
    r.mu = mu;
    r.residual = std::abs(bs_function(b, mu, k, p, am));
    r.converged = r.residual <= 1e-12;
    return r;
}

// ---------------------------------------------------------------------------
// Two-dimensional assembly z = g(tau_k) + i eps K(tau_k, mu).

struct Spectrum2DPoint {
    cplx z;
    int k;
    cplx mu;
};

inline std::vector<Spectrum2DPoint> assemble_2d_spectrum(
    std::pair<int, int> k_range, const Polynomial& g, const Polynomial2& K, double S0, int k0,
    const SemiclassicalParams& p, const std::function<std::vector<cplx>(double tau)>& mu_roots) {
    const double h = p.h;
    std::vector<int> ks;
    for (int k = k_range.first; k <= k_range.second; ++k) {
        double tau = h * (k - k0 / 4.0) - S0 / (2 * pi);
        if (std::abs(tau) <= 0.3) ks.push_back(k);
    }
    for (std::size_t i = 0; i + 1 < ks.size(); ++i) {
        double t0 = h * (ks[i] - k0 / 4.0) - S0 / (2 * pi);
        if (g.deriv(t0).real() <= 0 || g(t0 + h).real() <= g(t0).real())
            throw std::invalid_argument("assemble_2d_spectrum: g not increasing on the tau range");
    }
    std::vector<std::vector<Spectrum2DPoint>> per(ks.size());
    parallel_for(ks.size(), [&](std::size_t i) {
        int k = ks[i];
        double tau = h * (k - k0 / 4.0) - S0 / (2 * pi);
        for (cplx mu : mu_roots(tau)) {
            cplx w = K(tau, mu);
            per[i].push_back({g(tau) + I * p.epsilon * w, k, mu});
        }
    });
    std::vector<Spectrum2DPoint> out;
    for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
    return out;
}

// Exceptional rectangle [-a,a] + i[-b,b] in the mu (or w) plane.
struct Box {
    double a = 0, b = 0;
    bool contains(cplx z) const { return std::abs(z.real()) <= a && std::abs(z.imag()) <= b; }
};

inline Box exceptional_box(const SemiclassicalParams& p, double C) {
    double e = p.eps_total();
    if (e <= 0) return {0, 0};
    return {C * e, C * e / std::abs(std::log(e))};
}

// Upper bound (eps/h + h/eps) |ln(eps + h^2/eps)| for the box census.
inline double box_census_scale(const SemiclassicalParams& p) {
    if (p.epsilon <= 0) return 0;
    return (p.epsilon / p.h + p.h / p.epsilon) * std::abs(std::log(p.eps_total()));
}

}  // namespace branchspec
