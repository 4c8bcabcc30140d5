#pragma once

#include <map>
#include <optional>

#include "branchspec/quantization.hpp"

namespace branchspec {

// ---------------------------------------------------------------------------
// Implicit curves y ln(1/|x+iy|) = F(x+iy).

enum class CurveSide { Upper, Lower };

struct ImplicitCurveProblem {
    std::function<double(cplx)> F;
    CurveSide side = CurveSide::Upper;
    // When positive the left side is y * fixed_log instead of y ln(1/|mu|).
    double fixed_log = 0.0;
};

struct CurveSolution {
    double y;
    double residual;
    int iterations;
};

namespace detail {

inline double curve_lhs(const ImplicitCurveProblem& p, double x, double y) {
    if (p.fixed_log > 0) return y * p.fixed_log;
    double r = std::hypot(x, y);
    if (r == 0) return 0.0;
    return y * std::log(1.0 / r);
}

inline double curve_lhs_dy(const ImplicitCurveProblem& p, double x, double y) {
    if (p.fixed_log > 0) return p.fixed_log;
    double r2 = x * x + y * y;
    if (r2 == 0) return INFINITY;
    return -0.5 * std::log(r2) - y * y / r2;
}

// Solution of Y - ln Y = Z by fixed-point iteration from Y0 = Z + ln Z.
inline double solve_Y_minus_logY(double Z) {
    double Y = Z + std::log(Z);
    for (int i = 0; i < 100; ++i) {
        double Yn = Z + std::log(Y);
        if (std::abs(Yn - Y) <= 1e-15 * Y) return Yn;
        Y = Yn;
    }
    return Y;
}

}  // namespace detail

// Small solution of y ln(1/y) = z, z in (0, 1/e).
inline double solve_ylogy(double z) {
    if (z <= 0) return 0.0;
    return std::exp(-detail::solve_Y_minus_logY(std::log(1.0 / z)));
}

// Seed from the two asymptotic regimes.
inline double curve_seed(const ImplicitCurveProblem& p, double x) {
    double F = p.F(cplx(x, 0.0));
    if (p.fixed_log > 0) return F / p.fixed_log;
    double ax = std::abs(x);
    if (ax > 0 && std::abs(F) <= ax * std::log(1.0 / ax)) return F / std::log(1.0 / ax);
    if (F == 0) return 0.0;
    double y = solve_ylogy(std::min(std::abs(F), 0.3));
    return F > 0 ? y : -y;
}

inline CurveSolution solve_curve_detailed(const ImplicitCurveProblem& p, double x) {
    if (!(std::abs(x) <= 0.3 + 1e-12)) throw std::invalid_argument("solve_curve: |x| > 0.3");
    if (x != 0 && std::abs(x) < 1e-8) throw std::invalid_argument("solve_curve: 0 < |x| < 1e-8");
    auto g = [&](double y) { return detail::curve_lhs(p, x, y) - p.F(cplx(x, y)); };
    double y = curve_seed(p, x);
    if (x == 0 && y == 0) {
        double F0 = p.F(0.0);
        if (F0 == 0) return {0.0, 0.0, 0};
        y = p.side == CurveSide::Upper ? 1e-6 : -1e-6;
    }
    double gy = g(y);
    for (int it = 0; it < 60; ++it) {
        double Fabs = std::abs(p.F(cplx(x, y)));
        if (std::abs(gy) <= 1e-12 * std::max(1.0, Fabs)) return {y, std::abs(gy), it};
        double d = 1e-7 * std::max({std::abs(y), std::abs(x), 1e-9});
        double dF = (p.F(cplx(x, y + d)) - p.F(cplx(x, y - d))) / (2 * d);
        double dg = detail::curve_lhs_dy(p, x, y) - dF;
        double step = gy / dg;
        // damping: never jump across y = 0 by more than the current size when x = 0
        double lam = 1.0;
        for (int k = 0; k < 30; ++k) {
            double yn = y - lam * step;
            // stay in the working disc; far-field roots are spurious
            if ((x == 0 && yn * y <= 0) || std::hypot(x, yn) > 0.5) {
                lam *= 0.5;
                continue;
            }
            double gn = g(yn);
            if (std::abs(gn) < std::abs(gy) || k == 29) {
                y = yn;
                gy = gn;
                break;
            }
            lam *= 0.5;
        }
    }
    if (std::abs(gy) <= 1e-12 * std::max(1.0, std::abs(p.F(cplx(x, y))))) return {y, std::abs(gy), 60};
    throw NoConvergence("solve_curve: no convergence after 60 damped Newton steps");
}

inline constexpr double curve_F_bound = 0.2;

// As above, but a root where |F| exceeds the working bound is not a point of
// the curve and raises RegimeError.
inline CurveSolution solve_curve_checked(const ImplicitCurveProblem& p, double x) {
    auto r = solve_curve_detailed(p, x);
    if (std::abs(p.F(cplx(x, r.y))) > curve_F_bound) throw RegimeError("solve_curve: |F| above the working bound");
    return r;
}

inline double solve_curve(const ImplicitCurveProblem& p, double x) { return solve_curve_detailed(p, x).y; }

// ---------------------------------------------------------------------------
// The curves Gamma_{j,k}.

enum class CurveLabel { G12, G13, G14p, G14m, G24p, G24m, G34p, G34m };

inline const char* to_string(CurveLabel c) {
    switch (c) {
        case CurveLabel::G12: return "1,2";
        case CurveLabel::G13: return "1,3";
        case CurveLabel::G14p: return "1,4+";
        case CurveLabel::G14m: return "1,4-";
        case CurveLabel::G24p: return "2,4+";
        case CurveLabel::G24m: return "2,4-";
        case CurveLabel::G34p: return "3,4+";
        case CurveLabel::G34m: return "3,4-";
    }
    return "?";
}

// Label of the same curve in the second case under 1+-<->4+-, 2<->3.
inline std::string case2_label(CurveLabel c) {
    switch (c) {
        case CurveLabel::G12: return "4,3";
        case CurveLabel::G13: return "4,2";
        case CurveLabel::G14p: return "4,1+";
        case CurveLabel::G14m: return "4,1-";
        case CurveLabel::G24p: return "3,1+";
        case CurveLabel::G24m: return "3,1-";
        case CurveLabel::G34p: return "2,1+";
        case CurveLabel::G34m: return "2,1-";
    }
    return "?";
}

// Rate pieces b_j with r_j = alpha_j y L + b_j, alpha = (1, 0, 0, -1, -1) for
// labels (1, 2, 3, 4+, 4-). Large: L = ln(1/|mu|) and Q = Y; small:
// L = ln(1/h) and Q = h Re log(Gamma(1/2 - i mu/h)/sqrt(2 pi)).
struct RatePieces {
    double L, b1, b2, b3, b4p, b4m;
};

inline RatePieces rate_pieces(cplx mu, const SemiclassicalParams& p, const ActionModel& am, bool small) {
    const double h = p.h;
    double Q, L;
    if (small) {
        Q = h * (log_gamma(0.5 - I * mu / h).real() - half_log_2pi);
        L = std::log(1.0 / h);
    } else {
        Q = exponent_geometry(mu, h).Y;
        L = std::log(1.0 / std::abs(mu));
    }
    double s12 = am.S12(mu).imag(), s34 = am.S34(mu).imag(), x = mu.real();
    return {L, -s12 - s34 - Q, -s12 + pi / 2 * x, -s34 + pi / 2 * x, pi * x + Q, -pi * x + Q};
}

inline double curve_F(CurveLabel c, const RatePieces& r) {
    switch (c) {
        case CurveLabel::G12: return r.b2 - r.b1;
        case CurveLabel::G13: return r.b3 - r.b1;
        case CurveLabel::G14p: return 0.5 * (r.b4p - r.b1);
        case CurveLabel::G14m: return 0.5 * (r.b4m - r.b1);
        case CurveLabel::G24p: return r.b4p - r.b2;
        case CurveLabel::G24m: return r.b4m - r.b2;
        case CurveLabel::G34p: return r.b4p - r.b3;
        case CurveLabel::G34m: return r.b4m - r.b3;
    }
    return 0;
}

inline bool small_regime(cplx mu, double h) { return std::abs(mu) <= C_small * h; }

// Regime used for a sample at abscissa x: decided on the real axis so that a
// whole vertical line uses one representation.
inline bool small_at(double x, double h) { return std::abs(x) <= C_small * h; }

inline ImplicitCurveProblem curve_problem(CurveLabel c, const SemiclassicalParams& p, const ActionModel& am,
                                          bool small) {
    ImplicitCurveProblem prob;
    prob.F = [c, &p, &am, small](cplx mu) { return curve_F(c, rate_pieces(mu, p, am, small)); };
    prob.fixed_log = small ? std::log(1.0 / p.h) : 0.0;
    return prob;
}

// Gamma_{1,4+-}, Gamma_{2,4+-}, Gamma_{3,4+-} belong to the half-plane of the sign.
inline bool valid_for_side(CurveLabel c, bool right) {
    switch (c) {
        case CurveLabel::G14p:
        case CurveLabel::G24p:
        case CurveLabel::G34p: return right;
        case CurveLabel::G14m:
        case CurveLabel::G24m:
        case CurveLabel::G34m: return !right;
        default: return true;
    }
}

struct CurveSample {
    double x, y;
    Regime regime;
};

struct SkeletonCurve {
    CurveLabel pair;
    std::vector<CurveSample> samples;
    std::vector<std::pair<double, double>> gaps;  // x-intervals where samples were dropped

    // Linear interpolation in x; nullopt outside the sampled range or in a gap.
    std::optional<double> at(double x) const {
        if (samples.empty() || x < samples.front().x || x > samples.back().x) return std::nullopt;
        auto it = std::lower_bound(samples.begin(), samples.end(), x,
                                   [](const CurveSample& s, double v) { return s.x < v; });
        if (it == samples.begin()) return it->y;
        auto prev = it - 1;
        if (it == samples.end()) return prev->y;
        for (auto& g : gaps)
            if (prev->x < g.second && it->x > g.first) return std::nullopt;
        double t = (x - prev->x) / (it->x - prev->x);
        return prev->y + t * (it->y - prev->y);
    }
};

struct StepRule {
    double factor = 0.25;  // step = factor h / ln(1/<x>_h)
    double refine = 4.0;   // subdivision near marked abscissae
};

inline double bracket_h(double x, double h) { return std::sqrt(h * h + x * x); }

inline double natural_step(double x, double h, const StepRule& r) {
    return r.factor * h / std::log(1.0 / bracket_h(x, h));
}

inline std::vector<double> sample_grid(double a, double b, double h, const StepRule& r,
                                       const std::vector<double>& refine_at = {}) {
    std::vector<double> xs;
    double x = a;
    while (x < b) {
        xs.push_back(x);
        double s = natural_step(x, h, r);
        for (double c : refine_at)
            if (std::abs(x - c) <= 10 * s) s /= r.refine;
        x += s;
    }
    xs.push_back(b);
    return xs;
}

inline SkeletonCurve trace_gamma(CurveLabel c, const SemiclassicalParams& p, const ActionModel& am,
                                 std::pair<double, double> x_range, const StepRule& rule = {},
                                 const std::vector<double>& refine_at = {}) {
    if ((x_range.first < 0 && !valid_for_side(c, false)) || (x_range.second > 0 && !valid_for_side(c, true)))
        throw std::invalid_argument(std::string("trace_gamma: pair ") + to_string(c) + " not defined on this side");
    auto xs = sample_grid(x_range.first, x_range.second, p.h, rule, refine_at);
    std::vector<std::optional<CurveSample>> out(xs.size());
    auto large = curve_problem(c, p, am, false);
    auto small = curve_problem(c, p, am, true);
    parallel_for(xs.size(), [&](std::size_t i) {
        double x = xs[i];
        if (x != 0 && std::abs(x) < 1e-8) x = x > 0 ? 1e-8 : -1e-8;
        bool sm = small_at(x, p.h);
        try {
            double y = solve_curve_checked(sm ? small : large, x).y;
            cplx mu(x, y);
            if (!case1_admissible(mu)) return;
            out[i] = CurveSample{x, y, sm ? Regime::Case1Small : Regime::Case1Large};
        } catch (const NumericalError&) {
        }
    });
    SkeletonCurve curve{c, {}, {}};
    std::optional<double> gap_start;
    double last_x = xs.front();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (out[i]) {
            if (gap_start) curve.gaps.push_back({*gap_start, xs[i]});
            gap_start.reset();
            curve.samples.push_back(*out[i]);
            last_x = xs[i];
        } else if (!gap_start) {
            gap_start = curve.samples.empty() ? xs[i] : last_x;
        }
    }
    if (gap_start) curve.gaps.push_back({*gap_start, xs.back()});
    return curve;
}

// ---------------------------------------------------------------------------
// Crossings of Gamma_{1,4-} with the curves A and B.

struct Crossings {
    std::optional<cplx> mu_A, mu_B;          // None when hidden or out of range
    std::optional<double> re_A_raw, re_B_raw;  // abscissae even when hidden
};

namespace detail {

// First sign change of f on a uniform grid; grid points where f throws are
// skipped, and the bracket is then refined by bisection.
inline std::optional<double> bisect_sign_change(const std::function<double(double)>& f, double a, double b, int n) {
    auto safe = [&](double x) -> std::optional<double> {
        try {
            return f(x);
        } catch (const NumericalError&) {
            return std::nullopt;
        }
    };
    std::optional<double> fprev;
    double xprev = a;
    for (int i = 0; i <= n; ++i) {
        double x = a + (b - a) * i / n;
        auto fx = safe(x);
        if (!fx) {
            fprev.reset();
            continue;
        }
        if (*fx == 0) return x;
        if (fprev && ((*fprev < 0) != (*fx < 0))) {
            double lo = xprev, hi = x, flo = *fprev;
            for (int k = 0; k < 100 && hi - lo > 1e-15; ++k) {
                double m = 0.5 * (lo + hi);
                auto fm = safe(m);
                if (!fm) return std::nullopt;
                if ((*fm < 0) == (flo < 0)) {
                    lo = m;
                    flo = *fm;
                } else {
                    hi = m;
                }
            }
            return 0.5 * (lo + hi);
        }
        fprev = fx;
        xprev = x;
    }
    return std::nullopt;
}

}  // namespace detail

inline Crossings find_crossings(const SemiclassicalParams& p, const ActionModel& am,
                                std::pair<double, double> x_range = {-0.3, 0.3}) {
    auto y14 = [&](double x) {
        if (x != 0 && std::abs(x) < 1e-8) x = x > 0 ? 1e-8 : -1e-8;
        return solve_curve_checked(curve_problem(CurveLabel::G14m, p, am, small_at(x, p.h)), x).y;
    };
    auto D = [&](double x) {
        cplx mu(x, y14(x));
        return (am.S12(mu) - am.S34(mu)).imag();
    };
    Crossings c;
    auto probe = [&](double sign, std::optional<double>& raw) -> std::optional<cplx> {
        auto f = [&](double x) { return -2 * pi * x - sign * D(x); };
        auto x = detail::bisect_sign_change(f, x_range.first, x_range.second, 400);
        if (!x) return std::nullopt;
        raw = *x;
        try {
            cplx mu(*x, y14(*x));
            if (!case1_admissible(mu)) return std::nullopt;  // hidden
            return mu;
        } catch (const NumericalError&) {
            return std::nullopt;
        }
    };
    c.mu_A = probe(1.0, c.re_A_raw);
    c.mu_B = probe(-1.0, c.re_B_raw);
    return c;
}

// ---------------------------------------------------------------------------
// Skeleton and body.

struct Diamond {
    cplx center;
    double half_width;
    bool contains(cplx z) const {
        return std::abs(z.real() - center.real()) + std::abs(z.imag() - center.imag()) <= half_width;
    }
};

struct SkeletonPiece {
    SkeletonCurve curve;
    double x_lo, x_hi;  // active abscissae of this curve in S'
};

struct Skeleton {
    std::vector<SkeletonPiece> s_prime;
    std::optional<std::pair<double, double>> gamma_vertical;  // imaginary-axis segment [y0, y1]
    std::vector<Diamond> diamonds;
    std::optional<cplx> mu_A, mu_B;
    bool left_uses_A = true;
    double body_constant = 10.0;
    double h = 0.0;
    bool conjugated = false;  // second-case skeleton, stored in the mirrored frame

    // Lowest active curve value at x.
    std::optional<double> lower(double x) const {
        std::optional<double> m;
        for (auto& pc : s_prime) {
            if (x < pc.x_lo || x > pc.x_hi) continue;
            if (auto y = pc.curve.at(x)) m = m ? std::min(*m, *y) : *y;
        }
        return m;
    }
};

inline double disc_radius(cplx mu, double h, double C) { return C * h / std::log(1.0 / bracket_h(std::abs(mu), h)); }

inline double be_width(cplx mu, double h, double C) {
    double L = std::log(1.0 / bracket_h(std::abs(mu), h));
    return C * h * std::log(L) / L;
}

struct Body {
    Skeleton skeleton;
    double C = 10.0;
    bool has_Be = false;
    Box exceptional;

    // Distance from z to the active part of S'.
    double distance_to_sprime(cplx z, double window) const {
        double best = INFINITY;
        for (auto& pc : skeleton.s_prime) {
            const auto& s = pc.curve.samples;
            double lo = std::max(pc.x_lo, z.real() - window), hi = std::min(pc.x_hi, z.real() + window);
            if (lo > hi || s.empty()) continue;
            auto it = std::lower_bound(s.begin(), s.end(), lo, [](const CurveSample& a, double v) { return a.x < v; });
            if (it != s.begin()) --it;
            for (; it != s.end() && it->x <= hi + window; ++it) {
                auto nx = it + 1;
                cplx a(it->x, it->y);
                bool seg = nx != s.end();
                if (seg) {
                    for (auto& g : pc.curve.gaps)
                        if (it->x < g.second && nx->x > g.first) seg = false;
                }
                if (it->x < pc.x_lo || it->x > pc.x_hi) seg = false;
                if (seg && (nx->x < pc.x_lo || nx->x > pc.x_hi)) seg = false;
                if (!seg) {
                    if (it->x >= pc.x_lo && it->x <= pc.x_hi) best = std::min(best, std::abs(z - a));
                    continue;
                }
                cplx b(nx->x, nx->y);
                cplx d = b - a;
                double t = std::clamp(((z - a) * std::conj(d)).real() / std::norm(d), 0.0, 1.0);
                best = std::min(best, std::abs(z - (a + t * d)));
            }
        }
        return best;
    }

    bool in_discs(cplx z) const {
        double h = skeleton.h;
        // radius is evaluated at z; the skeleton point differs by at most the radius
        double r = disc_radius(z, h, C);
        double d = distance_to_sprime(z, 2 * r);
        if (d > 2 * r) return false;
        return d <= r;
    }

    bool in_Bv(cplx z) const {
        for (auto& dm : skeleton.diamonds)
            if (dm.contains(z)) return true;
        if (skeleton.gamma_vertical && z.real() == 0.0)
            return z.imag() >= skeleton.gamma_vertical->first && z.imag() <= skeleton.gamma_vertical->second;
        return false;
    }

    bool in_Be(cplx z) const {
        if (!has_Be) return false;
        double h = skeleton.h;
        if (std::abs(z.real()) >= h) return false;
        auto lo = skeleton.lower(z.real());
        if (!lo || z.imag() > *lo) return false;
        double w = be_width(z, h, C);
        return distance_to_sprime(z, 2 * w) <= w;
    }

    bool contains(cplx z) const { return in_discs(z) || in_Bv(z) || in_Be(z); }
};

struct SkeletonOptions {
    std::pair<double, double> x_range{-0.3, 0.3};
    StepRule step;
};

inline Skeleton assemble_skeleton(const SemiclassicalParams& p, const ActionModel& am, double C_body,
                                  const SkeletonOptions& opt = {}) {
    const double h = p.h;
    Skeleton sk;
    sk.h = h;
    sk.body_constant = C_body;
    auto cr = find_crossings(p, am, opt.x_range);
    sk.mu_A = cr.mu_A;
    sk.mu_B = cr.mu_B;

    // Which crossing governs the left half-plane.
    double xl = opt.x_range.first;
    std::optional<double> x_split;
    if (cr.re_A_raw && *cr.re_A_raw <= 0) {
        sk.left_uses_A = true;
        x_split = *cr.re_A_raw;
    } else if (cr.re_B_raw && *cr.re_B_raw <= 0) {
        sk.left_uses_A = false;
        x_split = *cr.re_B_raw;
    } else {
        // no crossing in range: the sign of Im(S12 - S34) at 0 decides
        cplx s = am.S12(0.0) - am.S34(0.0);
        sk.left_uses_A = s.imag() >= 0;
        x_split = xl;
    }
    std::vector<double> marks;
    if (x_split) marks.push_back(*x_split);
    marks.push_back(0.0);

    auto tr = [&](CurveLabel c, double a, double b) {
        return trace_gamma(c, p, am, {a, b}, opt.step, marks);
    };
    double xr = opt.x_range.second;
    sk.s_prime.push_back({tr(CurveLabel::G24p, 0.0, xr), 0.0, xr});
    sk.s_prime.push_back({tr(CurveLabel::G34p, 0.0, xr), 0.0, xr});
    double xs = std::max(*x_split, xl);
    if (xs > xl) sk.s_prime.push_back({tr(CurveLabel::G14m, xl, xs), xl, xs});
    if (sk.left_uses_A) {
        sk.s_prime.push_back({tr(CurveLabel::G34m, xs, 0.0), xs, 0.0});
        sk.s_prime.push_back({tr(CurveLabel::G13, xs, 0.0), xs, 0.0});
    } else {
        sk.s_prime.push_back({tr(CurveLabel::G24m, xs, 0.0), xs, 0.0});
        sk.s_prime.push_back({tr(CurveLabel::G12, xs, 0.0), xs, 0.0});
    }

    // Vertical segment from 0 up to the lower part of S' on the imaginary axis.
    double top = INFINITY;
    bool found = false;
    for (auto& pc : sk.s_prime) {
        if (pc.x_lo > 0 || pc.x_hi < 0) continue;
        if (auto y = pc.curve.at(0.0)) {
            top = std::min(top, *y);
            found = true;
        }
    }
    if (found && top > 0) {
        sk.gamma_vertical = std::make_pair(0.0, top);
        for (int k = 0;; ++k) {
            cplx c(0, (k + 0.5) * h);
            double w = disc_radius(c, h, C_body);
            if (c.imag() - w > top) break;
            sk.diamonds.push_back({c, w});
        }
    }
    return sk;
}

inline Body make_body(const Skeleton& sk, const SemiclassicalParams& p, double C) {
    Body b;
    b.skeleton = sk;
    b.C = C;
    b.has_Be = sk.gamma_vertical.has_value();
    b.exceptional = exceptional_box(p, C);
    return b;
}

// Model with S'(nu) = conj S(conj nu); its first-case skeleton mirrors the
// second-case skeleton of the original model.
inline ActionModel mirrored_model(const ActionModel& am) {
    ActionModel m = am;
    for (auto& c : m.S12.c) c = std::conj(c);
    for (auto& c : m.S34.c) c = std::conj(c);
    m.description = am.description + " (mirrored)";
    return m;
}

// Both cases; membership is checked in the case whose sector contains the point.
struct SkeletonPair {
    Skeleton case1, case2;  // case2 stored in the mirrored frame
    Body body1, body2;

    bool contains(cplx z) const {
        if (case1_admissible(z) && body1.contains(z)) return true;
        if (case2_admissible(z) && body2.contains(std::conj(z))) return true;
        return false;
    }
};

inline SkeletonPair assemble(const SemiclassicalParams& p, const ActionModel& am, double C_body,
                             const SkeletonOptions& opt = {}) {
    SkeletonPair sp;
    sp.case1 = assemble_skeleton(p, am, C_body, opt);
    ActionModel mm = mirrored_model(am);
    sp.case2 = assemble_skeleton(p, mm, C_body, opt);
    sp.case2.conjugated = true;
    sp.body1 = make_body(sp.case1, p, C_body);
    sp.body2 = make_body(sp.case2, p, C_body);
    return sp;
}

}  // namespace branchspec
