#pragma once

#include <map>
#include <optional>

#include "branchspec/skeleton.hpp"

namespace branchspec {

struct OnContourZero : NumericalError {
    using NumericalError::NumericalError;
};
struct NotAdmissible : NumericalError {
    using NumericalError::NumericalError;
};
struct CellBudgetExceeded : NumericalError {
    using NumericalError::NumericalError;
};

// f(z) = value * exp(log_scale). Plain functions use log_scale = 0.
using ScaledFn = std::function<Scaled(cplx)>;

inline ScaledFn plain(std::function<cplx(cplx)> f) {
    return [f = std::move(f)](cplx z) { return Scaled{f(z), 0.0}; };
}

// Largest sampling step for phase tracking of G: a quarter turn at the
// steepest phase gradient a term can have on |mu| <= 1/2.
inline double G_max_step(const SemiclassicalParams& p, const ActionModel& am) {
    auto dmax = [](const Polynomial& P) {
        double s = 0;
        for (std::size_t k = 1; k < P.c.size(); ++k) s += k * std::abs(P.c[k]) * std::pow(0.5, double(k - 1));
        return s;
    };
    double grad = (std::abs(std::log(0.5 / p.h)) + pi / 2 + 2 + dmax(am.S12) + dmax(am.S34)) / p.h;
    return (pi / 4) / grad;
}

// G normalized by its largest term.
inline ScaledFn G_function(const SemiclassicalParams& p, const ActionModel& am) {
    return [p, am](cplx mu) {
        auto g = eval_G(mu, p, am);
        return Scaled{g.value, g.offset / p.h};
    };
}

struct Contour {
    std::vector<cplx> vertices;  // closed, positively oriented; last edge returns to the first vertex

    static Contour rectangle(cplx lo, cplx hi) {
        return {{lo, cplx(hi.real(), lo.imag()), hi, cplx(lo.real(), hi.imag())}};
    }

    // Checks the simplicity and edge-length invariants.
    void validate() const {
        const std::size_t n = vertices.size();
        if (n < 3) throw std::invalid_argument("Contour: fewer than 3 vertices");
        for (std::size_t i = 0; i < n; ++i)
            if (std::abs(vertices[(i + 1) % n] - vertices[i]) <= 0) throw std::invalid_argument("Contour: zero edge");
        auto cross = [](cplx a, cplx b) { return a.real() * b.imag() - a.imag() * b.real(); };
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 2; j < n; ++j) {
                if (i == 0 && j == n - 1) continue;
                cplx a = vertices[i], b = vertices[(i + 1) % n], c = vertices[j], d = vertices[(j + 1) % n];
                double d1 = cross(b - a, c - a), d2 = cross(b - a, d - a);
                double d3 = cross(d - c, a - c), d4 = cross(d - c, b - c);
                if (((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0)))
                    throw std::invalid_argument("Contour: self-intersecting");
            }
        double area = 0;
        for (std::size_t i = 0; i < n; ++i) area += cross(vertices[i], vertices[(i + 1) % n]);
        if (area <= 0) throw std::invalid_argument("Contour: not positively oriented");
    }
};

namespace detail {

inline constexpr double contour_zero_tol = 1e-13;

// arg(b/a) for scaled values; scales do not affect the argument.
inline double arg_ratio(const Scaled& a, const Scaled& b) { return std::arg(b.value / a.value); }

inline void check_nonzero(const Scaled& v) {
    if (!(std::abs(v.value) > contour_zero_tol) || !std::isfinite(std::abs(v.value)))
        throw OnContourZero("winding_count: |f| vanishes (or is not finite) on the contour");
}

// Argument increment along [a, b] with every step below thr.
inline double edge_increment(const ScaledFn& f, cplx a, cplx b, const Scaled& fa, const Scaled& fb, double thr,
                             int depth) {
    cplx m = 0.5 * (a + b);
    Scaled fm = f(m);
    check_nonzero(fm);
    double d1 = arg_ratio(fa, fm), d2 = arg_ratio(fm, fb);
    if (std::abs(d1) < thr && std::abs(d2) < thr && std::abs(arg_ratio(fa, fb)) < thr &&
        std::abs(d1 + d2 - arg_ratio(fa, fb)) < 1e-9)
        return d1 + d2;
    if (depth > 48) throw OnContourZero("winding_count: argument not resolved along an edge");
    return edge_increment(f, a, m, fa, fm, thr, depth + 1) + edge_increment(f, m, b, fm, fb, thr, depth + 1);
}

// Inserts vertices so that no edge is longer than max_step.
inline std::vector<cplx> densify(const std::vector<cplx>& pts, bool closed, double max_step) {
    if (!std::isfinite(max_step)) return pts;
    std::vector<cplx> out;
    std::size_t n = closed ? pts.size() : pts.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
        cplx a = pts[i], b = pts[(i + 1) % pts.size()];
        int m = std::max(1, (int)std::ceil(std::abs(b - a) / max_step));
        for (int k = 0; k < m; ++k) out.push_back(a + (b - a) * (double(k) / m));
    }
    if (!closed) out.push_back(pts.back());
    return out;
}

inline double path_increment(const ScaledFn& f, const std::vector<cplx>& pts0, bool closed, double thr,
                             double max_step) {
    auto pts = densify(pts0, closed, max_step);
    std::vector<Scaled> v(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        v[i] = f(pts[i]);
        check_nonzero(v[i]);
    }
    double total = 0;
    std::size_t n = closed ? pts.size() : pts.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = (i + 1) % pts.size();
        total += edge_increment(f, pts[i], pts[j], v[i], v[j], thr, 0);
    }
    return total;
}

}  // namespace detail

// Total change of arg f along a polyline, stable across two refinement levels.
// max_step bounds the initial sampling so that no full turn can hide between
// two samples; it must come from a bound on |d arg f/dz|.
inline double argument_change(const ScaledFn& f, const std::vector<cplx>& pts, bool closed = false,
                              double max_step = INFINITY) {
    double thr = pi / 2;
    double prev = detail::path_increment(f, pts, closed, thr, max_step);
    for (int lvl = 0; lvl < 6; ++lvl) {
        thr *= 0.5;
        double cur = detail::path_increment(f, pts, closed, thr, max_step);
        if (std::abs(cur - prev) < 1e-6) return cur;
        prev = cur;
    }
    throw OnContourZero("argument_change: unstable under refinement");
}

inline int winding_count(const ScaledFn& f, const Contour& c, double max_step = INFINITY) {
    c.validate();
    double w = argument_change(f, c.vertices, true, max_step) / (2 * pi);
    long r = std::lround(w);
    if (std::abs(w - r) > 1e-6) throw OnContourZero("winding_count: non-integer winding");
    return static_cast<int>(r);
}

struct Rect {
    cplx lo, hi;
    double width() const { return hi.real() - lo.real(); }
    double height() const { return hi.imag() - lo.imag(); }
    double diameter() const { return std::hypot(width(), height()); }
    bool contains(cplx z) const {
        return z.real() >= lo.real() && z.real() <= hi.real() && z.imag() >= lo.imag() && z.imag() <= hi.imag();
    }
    Rect grown(double d) const { return {lo - cplx(d, d), hi + cplx(d, d)}; }
};

// Winding count on a rectangle, shifting the edges outward by h/100 (up to 3
// times) when f vanishes on the boundary.
inline int rect_count(const ScaledFn& f, Rect r, double h, double max_step = INFINITY, Rect* used = nullptr) {
    for (int attempt = 0;; ++attempt) {
        try {
            int n = winding_count(f, Contour::rectangle(r.lo, r.hi), max_step);
            if (used) *used = r;
            return n;
        } catch (const OnContourZero&) {
            if (attempt == 3) throw;
            r = r.grown(h / 100);
        }
    }
}

// ---------------------------------------------------------------------------
// Zero sets.

enum class ZeroMethod { Winding, GridNewton };

inline const char* to_string(ZeroMethod m) { return m == ZeroMethod::Winding ? "winding" : "grid_newton"; }

struct ZeroRecord {
    cplx location;
    bool validated = false;  // isolated by a cell with winding number 1
    double residual = INFINITY;
};

struct ZeroSet {
    std::vector<ZeroRecord> zeros;
    ZeroMethod method = ZeroMethod::Winding;
};

struct NewtonResult {
    cplx z;
    bool converged;
    double residual;  // |value| of f at z, i.e. |f| relative to its own scale (largest term for G)
};

// Newton with central differences of step ds; values are brought to a common
// scale. Stops when the step is below 1e-14 max(|z|, ds); a stalled iteration
// (double roots) is accepted when the residual is below 1e-9.
inline NewtonResult newton_polish(const ScaledFn& f, cplx z, double ds, int max_iter = 60) {
    auto common = [](const Scaled& a, double ls) { return a.value * std::exp(a.log_scale - ls); };
    double scale = std::max(std::abs(z), ds);
    for (int it = 0; it < max_iter; ++it) {
        Scaled f0 = f(z), fp = f(z + ds), fm = f(z - ds);
        double ls = std::max({f0.log_scale, fp.log_scale, fm.log_scale});
        cplx v0 = common(f0, ls), vp = common(fp, ls), vm = common(fm, ls);
        cplx d = (vp - vm) / (2.0 * ds);
        if (v0 == 0.0) return {z, true, 0.0};
        if (d == 0.0 || !std::isfinite(std::abs(d))) return {z, false, INFINITY};
        cplx step = v0 / d;
        if (std::abs(step) > 10 * scale) return {z, false, INFINITY};
        z -= step;
        if (std::abs(step) <= 1e-14 * std::max(std::abs(z), ds)) return {z, true, std::abs(f(z).value)};
    }
    double r = std::abs(f(z).value);
    return {z, r <= 1e-9, r};
}

struct LocateOptions {
    double min_diameter_over_h = 1.0 / 50;
    std::size_t cell_budget = 100000;
    double initial_cell_over_h = 16;
    double residual_tol = 1e-9;
    int tiling_retries = 3;
    double max_step = INFINITY;  // phase-tracking step bound, see G_max_step  // shifted initial tilings tried when a tile edge carries a zero
};

namespace detail {

struct Cell {
    Rect r;
    int count;
};

inline std::array<Rect, 4> quarter(const Rect& r, double t) {
    double xm = r.lo.real() + t * r.width(), ym = r.lo.imag() + (1 - t) * r.height();
    return {Rect{r.lo, cplx(xm, ym)}, Rect{cplx(xm, r.lo.imag()), cplx(r.hi.real(), ym)},
            Rect{cplx(r.lo.real(), ym), cplx(xm, r.hi.imag())}, Rect{cplx(xm, ym), r.hi}};
}

}  // namespace detail

// Recursive quadrisection by winding number, then Newton polish.
inline ZeroSet locate_zeros(const ScaledFn& f, Rect region, const SemiclassicalParams& p,
                            const LocateOptions& opt = {}) {
    const double h = p.h;
    ZeroSet out;
    out.method = ZeroMethod::Winding;

    // initial tiling
    int nx = std::max(1, (int)std::ceil(region.width() / (opt.initial_cell_over_h * h)));
    int ny = std::max(1, (int)std::ceil(region.height() / (opt.initial_cell_over_h * h)));
    std::vector<Rect> tiles;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) {
            cplx lo(region.lo.real() + region.width() * i / nx, region.lo.imag() + region.height() * j / ny);
            cplx hi(region.lo.real() + region.width() * (i + 1) / nx,
                    region.lo.imag() + region.height() * (j + 1) / ny);
            tiles.push_back({lo, hi});
        }
    // Shared edges of the tiling must not carry zeros: counts are taken on the
    // exact tiles and a failure aborts rather than silently shifting.
    std::vector<int> counts(tiles.size(), 0);
    std::vector<std::string> errors(tiles.size());
    parallel_for(tiles.size(), [&](std::size_t i) {
        try {
            counts[i] = winding_count(f, Contour::rectangle(tiles[i].lo, tiles[i].hi), opt.max_step);
        } catch (const NumericalError& e) {
            errors[i] = e.what();
        }
    });
    std::vector<detail::Cell> level;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (!errors[i].empty()) {
            // retry with a slightly shifted tiling of the whole region
            if (opt.tiling_retries <= 0) throw OnContourZero(errors[i]);
            LocateOptions o2 = opt;
            o2.initial_cell_over_h *= 1.0137;
            --o2.tiling_retries;
            return locate_zeros(f, region, p, o2);
        }
        if (counts[i] > 0) level.push_back({tiles[i], counts[i]});
    }

    std::size_t budget = tiles.size();
    std::vector<detail::Cell> leaves;
    const double ds = h * 1e-3;
    while (!level.empty()) {
        std::vector<std::vector<detail::Cell>> next(level.size());
        std::vector<std::optional<detail::Cell>> leaf(level.size());
        std::vector<std::string> err(level.size());
        budget += 4 * level.size();
        if (budget > opt.cell_budget) throw CellBudgetExceeded("locate_zeros: cell budget exceeded");
        parallel_for(level.size(), [&](std::size_t i) {
            const auto& c = level[i];
            if (c.r.diameter() <= opt.min_diameter_over_h * h) {
                leaf[i] = c;
                return;
            }
            if (c.count == 1 && c.r.diameter() <= h) {
                auto nr = newton_polish(f, 0.5 * (c.r.lo + c.r.hi), ds);
                if (nr.converged && c.r.contains(nr.z) && nr.residual <= opt.residual_tol) {
                    leaf[i] = c;
                    return;
                }
            }
            for (int attempt = 0; attempt < 8; ++attempt) {
                double t = 0.5 + 0.0131 * attempt;
                auto q = detail::quarter(c.r, t);
                std::vector<detail::Cell> kids;
                int sum = 0;
                try {
                    for (auto& r : q) {
                        int n = winding_count(f, Contour::rectangle(r.lo, r.hi), opt.max_step);
                        sum += n;
                        if (n > 0) kids.push_back({r, n});
                    }
                } catch (const OnContourZero&) {
                    continue;
                }
                if (sum != c.count) continue;  // count conservation
                next[i] = std::move(kids);
                return;
            }
            err[i] = "locate_zeros: count conservation failed";
        });
        std::vector<detail::Cell> nl;
        for (std::size_t i = 0; i < level.size(); ++i) {
            if (!err[i].empty()) throw NumericalError(err[i]);
            if (leaf[i]) leaves.push_back(*leaf[i]);
            for (auto& k : next[i]) nl.push_back(k);
        }
        level = std::move(nl);
    }

    std::vector<ZeroRecord> recs(leaves.size());
    parallel_for(leaves.size(), [&](std::size_t i) {
        const auto& c = leaves[i];
        auto nr = newton_polish(f, 0.5 * (c.r.lo + c.r.hi), ds);
        ZeroRecord z;
        z.location = nr.converged ? nr.z : 0.5 * (c.r.lo + c.r.hi);
        z.residual = nr.residual;
        z.validated = nr.converged && c.count == 1 && c.r.grown(c.r.diameter()).contains(nr.z);
        recs[i] = z;
    });
    for (std::size_t i = 0; i < leaves.size(); ++i)
        for (int m = 0; m < leaves[i].count; ++m) out.zeros.push_back(recs[i]);
    std::sort(out.zeros.begin(), out.zeros.end(), [](const ZeroRecord& a, const ZeroRecord& b) {
        if (a.location.real() != b.location.real()) return a.location.real() < b.location.real();
        return a.location.imag() < b.location.imag();
    });
    return out;
}

// Oracle: Newton from every node of a grid, deduplicated.
inline ZeroSet grid_newton_zeros(const ScaledFn& f, Rect region, double spacing, double ds,
                                 double residual_tol = 1e-9) {
    int nx = std::max(2, (int)std::ceil(region.width() / spacing) + 1);
    int ny = std::max(2, (int)std::ceil(region.height() / spacing) + 1);
    std::vector<std::optional<ZeroRecord>> found(std::size_t(nx) * ny);
    Rect big = region.grown(spacing);
    parallel_for(found.size(), [&](std::size_t k) {
        int i = int(k % nx), j = int(k / nx);
        cplx z0(big.lo.real() + big.width() * i / (nx - 1), big.lo.imag() + big.height() * j / (ny - 1));
        auto nr = newton_polish(f, z0, ds);
        if (nr.converged && nr.residual <= residual_tol && region.contains(nr.z))
            found[k] = ZeroRecord{nr.z, false, nr.residual};
    });
    ZeroSet out;
    out.method = ZeroMethod::GridNewton;
    double tol = std::max(1e-9 * spacing, 1e-14);
    for (auto& z : found) {
        if (!z) continue;
        bool dup = false;
        for (auto& e : out.zeros)
            if (std::abs(e.location - z->location) <= 1e3 * tol) dup = true;
        if (!dup) out.zeros.push_back(*z);
    }
    std::sort(out.zeros.begin(), out.zeros.end(), [](const ZeroRecord& a, const ZeroRecord& b) {
        if (a.location.real() != b.location.real()) return a.location.real() < b.location.real();
        return a.location.imag() < b.location.imag();
    });
    return out;
}

// ---------------------------------------------------------------------------
// Admissible curves and the phase sum.

// Dominance label on a J interval; L4 stands for a4+ + a4-.
enum class Dominant { A1, A2, A3, A4p, A4m, A4 };

inline const char* to_string(Dominant d) {
    switch (d) {
        case Dominant::A1: return "1";
        case Dominant::A2: return "2";
        case Dominant::A3: return "3";
        case Dominant::A4p: return "4+";
        case Dominant::A4m: return "4-";
        case Dominant::A4: return "4";
    }
    return "?";
}

struct ArcInterval {
    double s0, s1;  // arclength bounds
};

struct AdmissibleCurve {
    std::vector<cplx> path;                 // polyline
    std::vector<ArcInterval> J;             // J_0 .. J_M
    std::vector<Dominant> nu;               // label per J
    std::vector<ArcInterval> I;             // I_1 .. I_M
    std::vector<bool> I_touches_Be;         // per I

    double length() const {
        double s = 0;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) s += std::abs(path[i + 1] - path[i]);
        return s;
    }
    cplx at(double s) const {
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            double l = std::abs(path[i + 1] - path[i]);
            if (s <= l || i + 2 == path.size()) return path[i] + (path[i + 1] - path[i]) * std::min(s / l, 1.0);
            s -= l;
        }
        return path.back();
    }
    std::vector<cplx> sub(double s0, double s1) const {
        std::vector<cplx> pts{at(s0)};
        double acc = 0;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
            acc += std::abs(path[i + 1] - path[i]);
            if (acc > s0 && acc < s1) pts.push_back(path[i + 1]);
        }
        pts.push_back(at(s1));
        return pts;
    }
};

// log of the dominant term (first case). L4 is log(a4+ + a4-).
inline cplx dominant_log(Dominant d, cplx mu, const SemiclassicalParams& p, const ActionModel& am) {
    auto ts = term_set(mu, p, am, choose_regime(mu, p), false);
    if (!is_case1(ts.regime)) ts = term_set(mu, p, am, std::abs(mu) <= C_small * p.h ? Regime::Case1Small : Regime::Case1Large, false);
    switch (d) {
        case Dominant::A1: return ts.get(Label::L1).log_value;
        case Dominant::A2: return ts.get(Label::L2).log_value;
        case Dominant::A3: return ts.get(Label::L3).log_value;
        case Dominant::A4p: return ts.get(Label::L4p).log_value;
        case Dominant::A4m: return ts.get(Label::L4m).log_value;
        case Dominant::A4: return log_add(ts.get(Label::L4p).log_value, ts.get(Label::L4m).log_value);
    }
    return 0;
}

inline double dominant_rate(Dominant d, cplx mu, const SemiclassicalParams& p, const ActionModel& am) {
    return p.h * dominant_log(d, mu, p, am).real();
}

// Rates of the competitors of d.
inline std::vector<double> other_rates(Dominant d, cplx mu, const SemiclassicalParams& p, const ActionModel& am) {
    std::vector<Dominant> all;
    switch (d) {
        case Dominant::A4: all = {Dominant::A1, Dominant::A2, Dominant::A3}; break;
        case Dominant::A4p: all = {Dominant::A1, Dominant::A2, Dominant::A3, Dominant::A4m}; break;
        case Dominant::A4m: all = {Dominant::A1, Dominant::A2, Dominant::A3, Dominant::A4p}; break;
        default:
            for (auto o : {Dominant::A1, Dominant::A2, Dominant::A3, Dominant::A4p, Dominant::A4m})
                if (o != d) all.push_back(o);
    }
    std::vector<double> r;
    for (auto o : all) r.push_back(dominant_rate(o, mu, p, am));
    return r;
}

inline constexpr int dominance_samples = 20;

// Checks the admissibility clauses; throws NotAdmissible naming the clause.
inline void verify_admissible(const AdmissibleCurve& c, const SemiclassicalParams& p, const ActionModel& am,
                              double C) {
    const double h = p.h;
    if (c.J.size() != c.nu.size() || c.J.size() != c.I.size() + 1 || c.I_touches_Be.size() != c.I.size())
        throw NotAdmissible("partition: sizes of J, nu, I do not match");
    double L = c.length();
    if (std::abs(c.J.front().s0) > 1e-15 || std::abs(c.J.back().s1 - L) > 1e-12 * std::max(1.0, L))
        throw NotAdmissible("endpoints: curve must start and end in a J interval");
    for (std::size_t k = 0; k < c.I.size(); ++k) {
        if (std::abs(c.I[k].s0 - c.J[k].s1) > 1e-15 || std::abs(c.I[k].s1 - c.J[k + 1].s0) > 1e-15)
            throw NotAdmissible("partition: intervals are not contiguous");
        cplx mid = c.at(0.5 * (c.I[k].s0 + c.I[k].s1));
        double lg = std::log(1.0 / bracket_h(std::abs(mid), h));
        double bound = c.I_touches_Be[k] ? C * h * std::log(lg) / lg : C * h / lg;
        if (c.I[k].s1 - c.I[k].s0 > bound) throw NotAdmissible("I interval longer than C h/ln(1/<mu>_h)");
    }
    const double tol = h * std::log(std::log(1.0 / h));
    for (std::size_t k = 0; k < c.J.size(); ++k)
        for (int s = 0; s <= dominance_samples; ++s) {
            cplx mu = c.at(c.J[k].s0 + (c.J[k].s1 - c.J[k].s0) * s / dominance_samples);
            double r = dominant_rate(c.nu[k], mu, p, am);
            for (double o : other_rates(c.nu[k], mu, p, am))
                if (r < o - tol) throw NotAdmissible("dominance fails on a J interval");
        }
}

struct PhaseSum {
    double estimate, direct, discrepancy;
};

// Estimate from the dominant terms on the J intervals against the argument
// change of G along the whole curve (both in units of 2 pi).
inline PhaseSum phase_sum_count(const AdmissibleCurve& c, const SemiclassicalParams& p, const ActionModel& am,
                                double C = 10.0) {
    verify_admissible(c, p, am, C);
    double est = 0;
    for (std::size_t k = 0; k < c.J.size(); ++k) {
        auto pts = c.sub(c.J[k].s0, c.J[k].s1);
        if (c.nu[k] == Dominant::A4) {
            // the sum a4+ + a4- is tracked like any analytic function
            auto f = [&](cplx mu) { return Scaled{std::exp(cplx(0, dominant_log(Dominant::A4, mu, p, am).imag())), 0.0}; };
            est += argument_change(f, pts, false, G_max_step(p, am)) / (2 * pi);
        } else {
            est += (dominant_log(c.nu[k], pts.back(), p, am) - dominant_log(c.nu[k], pts.front(), p, am)).imag() /
                   (2 * pi);
        }
    }
    double direct = argument_change(G_function(p, am), c.path, false, G_max_step(p, am)) / (2 * pi);
    return {est, direct, std::abs(est - direct)};
}

// Builds the partition of a polyline from the pointwise dominant term:
// I intervals of width w(mu) = C_I h/ln(1/<mu>_h) are centered where the
// dominant label changes.
// An I interval that meets B_e of the given body is widened to C_I h lnln/ln
// and flagged.
inline AdmissibleCurve make_admissible(const std::vector<cplx>& path, const SemiclassicalParams& p,
                                       const ActionModel& am, double C_I, bool use_a4_sum = false,
                                       const Body* body = nullptr, int samples = 4000) {
    AdmissibleCurve c;
    c.path = path;
    double L = c.length();
    auto label_at = [&](double s) {
        cplx mu = c.at(s);
        Dominant best = Dominant::A1;
        double br = -INFINITY;
        std::vector<Dominant> cands = use_a4_sum
                                          ? std::vector<Dominant>{Dominant::A1, Dominant::A2, Dominant::A3, Dominant::A4}
                                          : std::vector<Dominant>{Dominant::A1, Dominant::A2, Dominant::A3,
                                                                  Dominant::A4p, Dominant::A4m};
        for (auto d : cands) {
            double r = dominant_rate(d, mu, p, am);
            if (r > br) br = r, best = d;
        }
        return best;
    };
    std::vector<Dominant> lab(samples + 1);
    for (int i = 0; i <= samples; ++i) lab[i] = label_at(L * i / samples);
    std::vector<double> switches;
    std::vector<Dominant> seq{lab[0]};
    for (int i = 1; i <= samples; ++i)
        if (lab[i] != lab[i - 1]) {
            switches.push_back(L * (i - 0.5) / samples);
            seq.push_back(lab[i]);
        }
    double s = 0;
    for (std::size_t k = 0; k < switches.size(); ++k) {
        cplx mu = c.at(switches[k]);
        bool be = false;
        if (body) {
            double wb = be_width(mu, p.h, C_I);
            for (int j = -5; j <= 5 && !be; ++j) be = body->in_Be(c.at(std::clamp(switches[k] + wb * j / 10, 0.0, L)));
        }
        double w = be ? be_width(mu, p.h, C_I) : C_I * p.h / std::log(1.0 / bracket_h(std::abs(mu), p.h));
        double a = std::max(s, switches[k] - w / 2), b = std::min(L, switches[k] + w / 2);
        c.J.push_back({s, a});
        c.nu.push_back(seq[k]);
        c.I.push_back({a, b});
        c.I_touches_Be.push_back(be);
        s = b;
    }
    c.J.push_back({s, L});
    c.nu.push_back(seq.back());
    return c;
}

// ---------------------------------------------------------------------------
// Bijection between located and predicted zeros.

struct MatchedPair {
    cplx zero, predicted;
    double distance, bound;
};

struct MatchReport {
    std::vector<MatchedPair> pairs;
    std::vector<cplx> unmatched_zeros, unmatched_predicted;
    std::size_t violations = 0;  // pairs with distance > bound
};

struct BijectionFailure : NumericalError {
    MatchReport report;
    BijectionFailure(const std::string& m, MatchReport r) : NumericalError(m), report(std::move(r)) {}
};

// Greedy nearest-neighbour assignment; pairs farther apart than max_pair are
// never matched. Throws BijectionFailure when some point stays unmatched.
inline MatchReport match_bijection(const ZeroSet& zeros, const ZeroSet& predicted,
                                   const std::function<double(cplx)>& rate, double max_pair) {
    struct Cand {
        double d;
        std::size_t i, j;
    };
    std::vector<Cand> cands;
    for (std::size_t i = 0; i < zeros.zeros.size(); ++i)
        for (std::size_t j = 0; j < predicted.zeros.size(); ++j) {
            double d = std::abs(zeros.zeros[i].location - predicted.zeros[j].location);
            if (d <= max_pair) cands.push_back({d, i, j});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.d != b.d) return a.d < b.d;
        return a.i != b.i ? a.i < b.i : a.j < b.j;
    });
    std::vector<bool> ui(zeros.zeros.size()), uj(predicted.zeros.size());
    MatchReport rep;
    for (auto& c : cands) {
        if (ui[c.i] || uj[c.j]) continue;
        ui[c.i] = uj[c.j] = true;
        cplx z = zeros.zeros[c.i].location;
        double b = rate(predicted.zeros[c.j].location);
        rep.pairs.push_back({z, predicted.zeros[c.j].location, c.d, b});
        if (c.d > b) ++rep.violations;
    }
    for (std::size_t i = 0; i < ui.size(); ++i)
        if (!ui[i]) rep.unmatched_zeros.push_back(zeros.zeros[i].location);
    for (std::size_t j = 0; j < uj.size(); ++j)
        if (!uj[j]) rep.unmatched_predicted.push_back(predicted.zeros[j].location);
    if (!rep.unmatched_zeros.empty() || !rep.unmatched_predicted.empty()) {
        std::string m = "match_bijection: unmatched points:";
        for (auto z : rep.unmatched_zeros) m += " zero(" + std::to_string(z.real()) + "," + std::to_string(z.imag()) + ")";
        for (auto z : rep.unmatched_predicted)
            m += " predicted(" + std::to_string(z.real()) + "," + std::to_string(z.imag()) + ")";
        throw BijectionFailure(m, rep);
    }
    return rep;
}

// In the right half-plane G = a4+ [(1 + a2/a4+)(1 + a3/a4+) + exp(-2 pi mu/h)]
// exactly. For a root mu0 of one factor this returns log|delta| of the
// nearest zero mu0 + delta of G from the local quadratic model, valid far
// below double resolution.
inline double log_bijection_offset(cplx mu0, bool root_of_a2, const SemiclassicalParams& p, const ActionModel& am) {
    const double h = p.h;
    auto ratio = [&](cplx mu, Label l) {
        auto ts = term_set(mu, p, am, Regime::Case1Large, false);
        return 1.0 + std::exp(ts.get(l).log_value - ts.get(Label::L4p).log_value);
    };
    Label lf = root_of_a2 ? Label::L2 : Label::L3, lg = root_of_a2 ? Label::L3 : Label::L2;
    cplx d = 1e-6 * std::abs(mu0);
    cplx phi1 = (ratio(mu0 + d, lf) - ratio(mu0 - d, lf)) / (2.0 * d);
    cplx psi0 = ratio(mu0, lg);
    cplx psi1 = (ratio(mu0 + d, lg) - ratio(mu0 - d, lg)) / (2.0 * d);
    cplx lE = -2 * pi * mu0 / h;
    // phi1 psi1 u^2 + phi1 psi0 e^{-lE/2} u + 1 = 0 with delta = e^{lE/2} u
    cplx a = phi1 * psi1, b = phi1 * psi0 * std::exp(-lE / 2.0);
    if (std::abs(b) > 1e8 * std::sqrt(std::abs(a)) || std::abs(a) == 0) {
        // linear regime: delta = -E/(phi1 psi0)
        return lE.real() - std::log(std::abs(phi1 * psi0));
    }
    cplx disc = std::sqrt(b * b - 4.0 * a);
    cplx u1 = (-b + disc) / (2.0 * a), u2 = (-b - disc) / (2.0 * a);
    cplx u = std::abs(u1) < std::abs(u2) ? u1 : u2;
    return lE.real() / 2 + std::log(std::abs(u));
}

// Located zeros of G against the roots of 1 + a2/a4+ and 1 + a3/a4+ in the
// strip lo <= Re mu <= hi. Predictions come from the whole branch sector
// |Im mu| <= Re mu/8; completeness is required on the inner part
// |Im mu| <= Re mu/10 of the strip so that no root is lost at the sector edge.
struct StripBijection {
    MatchReport report;
    std::size_t zeros_inner = 0, predicted_inner = 0, unmatched_inner = 0;
    double max_log_excess = -INFINITY;  // max of log|delta| - log(bound), delta from the local model
    double max_raw_excess = -INFINITY;  // max of raw distance - bound in double precision
    bool pass(double raw_floor = 1e-12) const {
        return unmatched_inner == 0 && max_log_excess <= 0 && max_raw_excess <= raw_floor && zeros_inner > 0;
    }
};

inline double bijection_bound(cplx mu, double h, double C = 10.0) {
    return C * (h / std::log(1.0 / std::abs(mu))) * std::exp(-pi * mu.real() / h);
}

inline StripBijection check_bijection(const SemiclassicalParams& p, const ActionModel& am, double lo, double hi,
                                      double C = 10.0) {
    const double h = p.h, m = 2 * h;
    auto inner = [&](cplx z) { return z.real() >= lo && z.real() <= hi && std::abs(z.imag()) <= z.real() / 10; };
    LocateOptions opt;
    opt.max_step = G_max_step(p, am);
    double ymax = (hi + m) / bs_sector_C;
    Rect region{cplx(lo - m, -ymax), cplx(hi + m, ymax)};
    ZeroSet zs = locate_zeros(G_function(p, am), region, p, opt);

    ZeroSet pred;
    std::vector<bool> from_a2;
    for (BSBranch b : {BSBranch::RightInt, BSBranch::LeftInt}) {
        const Polynomial& S = b == BSBranch::RightInt ? am.S12 : am.S34;
        auto kval = [&](double x) { return (x * std::log(x) - x + S(x).real() + pi * h / 4) / (2 * pi * h) - 0.5; };
        double k1 = kval(lo - m), k2 = kval(hi + m);
        int ka = (int)std::floor(std::min(k1, k2)) - 2, kb = (int)std::ceil(std::max(k1, k2)) + 2;
        for (int k = ka; k <= kb; ++k) {
            try {
                auto r = bohr_sommerfeld_solve(b, k, p, am);
                if (r.converged && region.contains(r.mu)) {
                    pred.zeros.push_back({r.mu, true, r.residual});
                    from_a2.push_back(b == BSBranch::RightInt);
                }
            } catch (const NumericalError&) {
            }
        }
    }

    StripBijection out;
    auto rate = [&](cplx mu) { return bijection_bound(mu, h, C); };
    try {
        out.report = match_bijection(zs, pred, rate, h);
    } catch (const BijectionFailure& e) {
        out.report = e.report;
    }
    for (auto& z : zs.zeros) out.zeros_inner += inner(z.location);
    for (auto& z : pred.zeros) out.predicted_inner += inner(z.location);
    for (auto z : out.report.unmatched_zeros) out.unmatched_inner += inner(z);
    for (auto z : out.report.unmatched_predicted) out.unmatched_inner += inner(z);
    for (auto& pr : out.report.pairs) {
        if (!inner(pr.predicted) && !inner(pr.zero)) continue;
        std::size_t j = 0;
        while (pred.zeros[j].location != pr.predicted) ++j;
        double lb = std::log(pr.bound);
        out.max_log_excess = std::max(out.max_log_excess, log_bijection_offset(pr.predicted, from_a2[j], p, am) - lb);
        out.max_raw_excess = std::max(out.max_raw_excess, pr.distance - pr.bound);
    }
    return out;
}

}  // namespace branchspec
