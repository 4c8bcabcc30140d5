#include <gtest/gtest.h>

#include <random>

#include "branchspec/skeleton.hpp"

using namespace branchspec;

namespace {

ImplicitCurveProblem const_problem(double F) {
    ImplicitCurveProblem p;
    p.F = [F](cplx) { return F; };
    return p;
}

double resid(const ImplicitCurveProblem& p, double x, double y) {
    return std::abs(y * std::log(1.0 / std::hypot(x, y)) - p.F(cplx(x, y)));
}

ActionModel random_physical(std::mt19937_64& rng, double eps) {
    std::uniform_real_distribution<double> U(-1, 1);
    ActionModel am;
    am.S12.c = {cplx(U(rng), eps * U(rng)), cplx(0.5 * U(rng), eps * U(rng))};
    am.S34.c = {cplx(U(rng), eps * U(rng)), cplx(0.5 * U(rng), eps * U(rng))};
    am.description = "random";
    am.physical = true;
    return am;
}

ActionModel imaginary_constants(double s12, double s34) {
    ActionModel am;
    am.S12.c = {cplx(0, s12)};
    am.S34.c = {cplx(0, s34)};
    return am;
}

// Measured constants of the two asymptotic regimes of solve_curve.
struct SweepConstants {
    double c22 = 0, c23 = 0, max_residual = 0;
};

SweepConstants solver_sweep() {
    SweepConstants s;
    for (double ax : {0.1, 0.03, 0.01, 1e-3, 1e-4, 1e-5})
        for (double sx : {-1.0, 1.0})
            for (double t : {-1.0, -0.5, -0.1, 0.1, 0.5, 1.0})
                for (double lip : {0.0, 0.3}) {
                    double x = sx * ax, L = std::log(1.0 / ax);
                    double F0 = t * ax * L;
                    if (std::abs(F0) > 0.2) continue;  // outside the working bound on |F|
                    ImplicitCurveProblem p;
                    p.F = [F0, lip](cplx mu) { return F0 + lip * mu.imag(); };
                    auto r = solve_curve_detailed(p, x);
                    s.max_residual = std::max(s.max_residual, r.residual / std::max(1.0, std::abs(F0)));
                    s.c22 = std::max(s.c22, std::abs(r.y - F0 / L) * L * L / std::abs(F0));
                }
    for (double x : {0.0, 1e-8, -1e-8, 1e-7, 1e-6})
        for (double aF : {1e-2, 3e-3, 1e-3, 1e-4, 1e-5})
            for (double sF : {-1.0, 1.0}) {
                if (x != 0 && aF < 10 * std::abs(x) * std::log(1.0 / std::abs(x))) continue;
                double F = sF * aF;
                auto p = const_problem(F);
                auto r = solve_curve_detailed(p, x);
                s.max_residual = std::max(s.max_residual, r.residual);
                double L = std::log(1.0 / aF);
                s.c23 = std::max(s.c23, std::abs(r.y * L / F - 1) * L / std::log(L));
            }
    return s;
}

}  // namespace

TEST(SolveCurve, ZeroRightSide) {
    auto p = const_problem(0.0);
    for (double x : {-0.3, -0.01, 1e-8, 0.05, 0.3}) EXPECT_EQ(solve_curve(p, x), 0.0);
}

TEST(SolveCurve, ConstantAtOrigin) {
    auto p = const_problem(1e-3);
    double y = solve_curve(p, 0.0);
    EXPECT_NEAR(y, 0.0001096730961143779758660467528, 1e-17);
    double L = std::log(1e3);
    EXPECT_LE(std::abs(y * L / 1e-3 - 1), std::log(L) / L);
}

TEST(SolveCurve, LipschitzAgainstSimplified) {
    ImplicitCurveProblem full;
    full.F = [](cplx mu) { return 0.01 + 0.1 * mu.imag(); };
    auto simple = const_problem(0.01);
    double x = 0.05;
    double yf = solve_curve(full, x), ys = solve_curve(simple, x);
    EXPECT_LE(resid(full, x, yf), 1e-12);
    double L = std::log(1.0 / std::abs(cplx(x, yf)));
    EXPECT_GT(yf, ys);
    EXPECT_LE(std::abs(yf - ys), yf / L);
}

TEST(SolveCurve, Preconditions) {
    auto p = const_problem(0.01);
    EXPECT_THROW(solve_curve(p, 0.31), std::invalid_argument);
    EXPECT_THROW(solve_curve(p, 1e-9), std::invalid_argument);
    // y ln(1/y) never exceeds 1/e
    EXPECT_THROW(solve_curve(const_problem(1.0), 0.0), NoConvergence);
}

TEST(SolveCurve, SweepConstants) {
    auto s = solver_sweep();
    EXPECT_LE(s.max_residual, 1e-12);
    EXPECT_LE(s.c22, 5.0);
    EXPECT_LE(s.c23, 5.0);
}

TEST(SolveCurve, YlogYInverse) {
    for (double z : {1e-12, 1e-6, 1e-3, 0.1, 0.3}) {
        double y = solve_ylogy(z);
        EXPECT_NEAR(y * std::log(1 / y), z, 1e-15 + 1e-13 * z);
        EXPECT_LT(y, std::exp(-1.0));
    }
}

TEST(Trace, ResidualAndSlope) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(3);
    auto am = random_physical(rng, p.epsilon);
    for (auto c : {CurveLabel::G24p, CurveLabel::G34p, CurveLabel::G14m, CurveLabel::G13}) {
        auto cv = trace_gamma(c, p, am, {c == CurveLabel::G14m || c == CurveLabel::G13 ? -0.3 : 0.0,
                                         c == CurveLabel::G14m || c == CurveLabel::G13 ? 0.0 : 0.3});
        ASSERT_GT(cv.samples.size(), 100u);
        double max_slope_c = 0;
        for (std::size_t i = 0; i < cv.samples.size(); ++i) {
            const auto& s = cv.samples[i];
            bool sm = is_small(s.regime);
            auto prob = curve_problem(c, p, am, sm);
            double lhs = sm ? s.y * std::log(1 / p.h) : s.y * std::log(1 / std::abs(cplx(s.x, s.y)));
            EXPECT_LE(std::abs(lhs - prob.F(cplx(s.x, s.y))), 1e-10);
            if (i > 0) {
                const auto& q = cv.samples[i - 1];
                double L = std::log(1 / bracket_h(std::abs(cplx(s.x, s.y)), p.h));
                max_slope_c = std::max(max_slope_c, std::abs((s.y - q.y) / (s.x - q.x)) * L);
            }
        }
        EXPECT_LE(max_slope_c, 10.0) << to_string(c);
    }
}

TEST(Trace, SpacingRule) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto am = imaginary_constants(0.01, 0.02);
    auto cv = trace_gamma(CurveLabel::G34p, p, am, {0.0, 0.3});
    for (std::size_t i = 1; i < cv.samples.size(); ++i) {
        double x = cv.samples[i - 1].x;
        EXPECT_LE(cv.samples[i].x - x, p.h / (4 * std::log(1 / bracket_h(x, p.h))) * (1 + 1e-12));
    }
}

TEST(Trace, RatesAgreeOnCurve) {
    // a point of Gamma_{j,k} equalizes the exact rates r_j and r_k
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(5);
    auto am = random_physical(rng, p.epsilon);
    struct Pair {
        CurveLabel c;
        Label a, b;
    };
    for (auto pr : {Pair{CurveLabel::G24p, Label::L2, Label::L4p}, Pair{CurveLabel::G34p, Label::L3, Label::L4p},
                    Pair{CurveLabel::G14m, Label::L1, Label::L4m}, Pair{CurveLabel::G13, Label::L1, Label::L3}}) {
        for (double x : {-0.2, -0.004, 0.004, 0.15}) {
            if (!valid_for_side(pr.c, x > 0)) continue;
            // in the left half-plane Gamma_{1,3} only lives within O(eps) of the axis
            if (pr.c == CurveLabel::G13 && x < -0.1) continue;
            bool sm = small_at(x, p.h);
            double y = solve_curve(curve_problem(pr.c, p, am, sm), x);
            auto ts = term_set(cplx(x, y), p, am, sm ? Regime::Case1Small : Regime::Case1Large, false);
            EXPECT_NEAR(ts.get(pr.a).rate, ts.get(pr.b).rate, 1e-11) << to_string(pr.c) << " x=" << x;
        }
    }
}

TEST(Trace, SideOfPair) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto am = imaginary_constants(0.01, 0.02);
    EXPECT_THROW(trace_gamma(CurveLabel::G34p, p, am, {-0.1, 0.1}), std::invalid_argument);
    EXPECT_THROW(trace_gamma(CurveLabel::G14m, p, am, {0.0, 0.1}), std::invalid_argument);
    EXPECT_NO_THROW(trace_gamma(CurveLabel::G13, p, am, {-0.01, 0.01}));
}

TEST(Trace, CoincidingLabels) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(9);
    auto am = random_physical(rng, p.epsilon);
    auto a = trace_gamma(CurveLabel::G13, p, am, {0.0, 0.3});
    auto b = trace_gamma(CurveLabel::G24p, p, am, {0.0, 0.3});
    ASSERT_EQ(a.samples.size(), b.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_NEAR(a.samples[i].y, b.samples[i].y, 1e-12);
}

TEST(Trace, OrderFollowsActions) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto above = imaginary_constants(0.01, 0.02);
    double y34 = solve_curve(curve_problem(CurveLabel::G34p, p, above, false), 0.1);
    double y24 = solve_curve(curve_problem(CurveLabel::G24p, p, above, false), 0.1);
    EXPECT_GT(y34, y24);
    auto below = imaginary_constants(0.02, 0.01);
    y34 = solve_curve(curve_problem(CurveLabel::G34p, p, below, false), 0.1);
    y24 = solve_curve(curve_problem(CurveLabel::G24p, p, below, false), 0.1);
    EXPECT_LT(y34, y24);
}

TEST(Trace, RealActionsEnvelope) {
    SemiclassicalParams p{1e-3, 1e-2, false};
    ActionModel am;
    am.S12.c = {0.2, 0.5};
    am.S34.c = {-0.1, 0.3};
    double e = p.eps_total();
    auto cv = trace_gamma(CurveLabel::G34p, p, am, {0.0, 0.3});
    for (auto& s : cv.samples) {
        double env = e * std::max(1 / std::log(1 / std::max(std::abs(s.x), 1e-300)), 1 / std::log(1 / e));
        EXPECT_LE(std::abs(s.y), env);
    }
}

TEST(Trace, ForbiddenRegionLeavesGap) {
    // strongly negative actions push the curve into the cone around -i R+
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto am = imaginary_constants(-0.05, -0.05);
    auto cv = trace_gamma(CurveLabel::G34p, p, am, {0.0, 0.05});
    ASSERT_FALSE(cv.gaps.empty());
    EXPECT_EQ(cv.gaps.front().first, 0.0);
    for (auto& s : cv.samples) EXPECT_TRUE(case1_admissible(cplx(s.x, s.y)));
    EXPECT_FALSE(cv.at(0.5 * (cv.gaps.front().first + cv.gaps.front().second)).has_value());
}

TEST(Crossings, SymmetricActions) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto am = imaginary_constants(0.01, 0.01);
    auto c = find_crossings(p, am);
    ASSERT_TRUE(c.mu_A && c.mu_B);
    EXPECT_NEAR(c.mu_A->real(), 0.0, 1e-12);
    EXPECT_NEAR(c.mu_B->real(), 0.0, 1e-12);
}

TEST(Crossings, ConstantOffset) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    double delta = 1e-3;
    auto am = imaginary_constants(0.01 + 2 * pi * delta, 0.01);
    auto c = find_crossings(p, am);
    ASSERT_TRUE(c.mu_A && c.mu_B);
    EXPECT_NEAR(c.mu_A->real(), -delta, 1e-12);
    EXPECT_NEAR(c.mu_B->real(), delta, 1e-12);
}

TEST(Crossings, SignsAndSizes) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    double e = p.eps_total();
    std::mt19937_64 rng(21);
    int both = 0;
    for (int m = 0; m < 10; ++m) {
        auto am = random_physical(rng, p.epsilon);
        auto c = find_crossings(p, am);
        if (!(c.mu_A && c.mu_B)) continue;
        ++both;
        EXPECT_LE(c.mu_A->real() * c.mu_B->real(), 0.0);
        double ra = std::abs(c.mu_A->real()), rb = std::abs(c.mu_B->real());
        EXPECT_LE(std::max(ra, rb), 10 * std::min(ra, rb) + 1e-15);
        for (cplx mu : {*c.mu_A, *c.mu_B}) {
            EXPECT_LE(std::abs(mu.real()), 10 * e);
            EXPECT_LE(std::abs(mu.imag()), 10 * e / std::abs(std::log(e)));
        }
    }
    EXPECT_GE(both, 5);
}

TEST(Skeleton, TripleCrossings) {
    // r1 = r2 and r2 = r4+ force r1 = r4+
    SemiclassicalParams p{1e-3, 3e-2, false};
    ActionModel am;
    am.S12.c = {cplx(0, 0.02), cplx(0, -0.2)};
    am.S34.c = {cplx(0, 0.01)};
    auto d = [&](double x) {
        return solve_curve(curve_problem(CurveLabel::G12, p, am, false), x) -
               solve_curve(curve_problem(CurveLabel::G24p, p, am, false), x);
    };
    auto x = detail::bisect_sign_change(d, 0.011, 0.3, 200);
    ASSERT_TRUE(x.has_value());
    double y12 = solve_curve(curve_problem(CurveLabel::G12, p, am, false), *x);
    double y14 = solve_curve(curve_problem(CurveLabel::G14p, p, am, false), *x);
    EXPECT_NEAR(y12, y14, 1e-9);
}

TEST(Skeleton, LeftHalfOrdering) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(2);
    for (int m = 0; m < 5; ++m) {
        auto am = random_physical(rng, p.epsilon);
        auto sk = assemble_skeleton(p, am, 10.0);
        auto split = sk.left_uses_A ? sk.mu_A : sk.mu_B;
        if (!split) continue;
        CurveLabel lo = sk.left_uses_A ? CurveLabel::G34m : CurveLabel::G24m;
        CurveLabel up = sk.left_uses_A ? CurveLabel::G13 : CurveLabel::G12;
        for (int i = 1; i < 10; ++i) {
            double x = split->real() * i / 10.0;
            if (std::abs(x) < 1e-8) continue;
            bool sm = small_at(x, p.h);
            double a = solve_curve(curve_problem(lo, p, am, sm), x);
            double b = solve_curve(curve_problem(up, p, am, sm), x);
            EXPECT_LE(a, b + 1e-12);
        }
    }
}

TEST(Skeleton, RealActionsTinyEps) {
    SemiclassicalParams p{1e-3, 1e-4, false};
    ActionModel am;
    am.S12.c = {cplx(0.2, 1e-5), 0.5};
    am.S34.c = {cplx(-0.1, 2e-5), 0.3};
    auto sk = assemble_skeleton(p, am, 10.0);
    double e = p.eps_total();
    for (auto& pc : sk.s_prime)
        for (auto& s : pc.curve.samples) {
            if (s.x < pc.x_lo || s.x > pc.x_hi) continue;
            double env = e * std::max(1 / std::log(1 / bracket_h(s.x, p.h)), 1 / std::log(1 / e));
            EXPECT_LE(std::abs(s.y), env) << to_string(pc.curve.pair) << " x=" << s.x;
        }
}

TEST(Skeleton, VerticalSegmentPresent) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    double s = 10 * p.h * std::log(1 / p.h);
    auto am = imaginary_constants(s, 1.5 * s);
    auto sk = assemble_skeleton(p, am, 10.0);
    ASSERT_TRUE(sk.gamma_vertical.has_value());
    EXPECT_GT(sk.gamma_vertical->second, 0.0);
    ASSERT_FALSE(sk.diamonds.empty());
    EXPECT_NEAR(sk.diamonds.front().center.imag(), 0.5 * p.h, 1e-18);
    for (std::size_t k = 0; k < sk.diamonds.size(); ++k)
        EXPECT_NEAR(sk.diamonds[k].center.imag(), (k + 0.5) * p.h, 1e-15);
}

TEST(Skeleton, VerticalSegmentAbsentBelowAxis) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto am = imaginary_constants(-0.03, -0.02);
    auto sk = assemble_skeleton(p, am, 10.0);
    EXPECT_FALSE(sk.gamma_vertical.has_value());
    EXPECT_TRUE(sk.diamonds.empty());
}

TEST(Body, MonotoneInC) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(4);
    auto am = random_physical(rng, p.epsilon);
    auto sk = assemble_skeleton(p, am, 10.0);
    auto b2 = make_body(sk, p, 2.0), b10 = make_body(sk, p, 10.0);
    std::uniform_real_distribution<double> X(-0.3, 0.3), Y(-0.03, 0.05);
    int in2 = 0, in10 = 0;
    for (int i = 0; i < 4000; ++i) {
        cplx z(X(rng), Y(rng));
        bool a = b2.contains(z), b = b10.contains(z);
        if (a) {
            EXPECT_TRUE(b);
        }
        in2 += a;
        in10 += b;
    }
    EXPECT_LT(in2, in10);
    EXPECT_LT(in10, 4000);
}

TEST(Body, MembershipDeterministic) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(8);
    auto am = random_physical(rng, p.epsilon);
    auto a = assemble(p, am, 10.0), b = assemble(p, am, 10.0);
    std::uniform_real_distribution<double> X(-0.3, 0.3), Y(-0.05, 0.05);
    for (int i = 0; i < 2000; ++i) {
        cplx z(X(rng), Y(rng));
        EXPECT_EQ(a.contains(z), b.contains(z));
    }
}

TEST(Body, ExceptionalBox) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto box = exceptional_box(p, 10.0);
    double e = p.eps_total();
    EXPECT_DOUBLE_EQ(box.a, 10 * e);
    EXPECT_DOUBLE_EQ(box.b, 10 * e / std::abs(std::log(e)));
}

TEST(Skeleton, CasesAgreeOnOverlap) {
    SemiclassicalParams p{1e-3, 3e-2, false};
    std::mt19937_64 rng(13);
    auto am = random_physical(rng, p.epsilon);
    auto sp = assemble(p, am, 10.0);
    int compared = 0;
    for (double x = -0.29; x <= 0.29; x += 0.0037) {
        std::vector<double> y1, y2;
        for (auto& pc : sp.case1.s_prime)
            if (x >= pc.x_lo && x <= pc.x_hi)
                if (auto y = pc.curve.at(x)) y1.push_back(*y);
        for (auto& pc : sp.case2.s_prime)
            if (x >= pc.x_lo && x <= pc.x_hi)
                if (auto y = pc.curve.at(x)) y2.push_back(-*y);
        if (y1.size() != 2 || y2.size() != 2) continue;
        std::sort(y1.begin(), y1.end());
        std::sort(y2.begin(), y2.end());
        double bound = 10 * p.h / std::log(1 / bracket_h(x, p.h)) * std::exp(-2 * pi * std::abs(x) / p.h) + 1e-8;
        for (int i = 0; i < 2; ++i) EXPECT_LE(std::abs(y1[i] - y2[i]), bound) << "x=" << x;
        ++compared;
    }
    EXPECT_GT(compared, 50);
}

TEST(Skeleton, SumCurveCloseToPlusCurve) {
    // |a3| = |a4+ + a4-| versus |a3| = |a4+| in the right half-plane
    SemiclassicalParams p{1e-3, 3e-2, false};
    auto am = imaginary_constants(0.01, 0.02);
    for (double x : {1e-3, 2e-3, 5e-3, 0.02, 0.1}) {
        double yp = solve_curve(curve_problem(CurveLabel::G34p, p, am, small_at(x, p.h)), x);
        auto g = [&](double y) {
            auto ts = term_set(cplx(x, y), p, am, small_at(x, p.h) ? Regime::Case1Small : Regime::Case1Large, false);
            return ts.get(Label::L3).log_value.real() -
                   log_add(ts.get(Label::L4p).log_value, ts.get(Label::L4m).log_value).real();
        };
        double lo = yp - 1e-3, hi = yp + 1e-3;
        ASSERT_LT(g(lo) * g(hi), 0.0);
        for (int i = 0; i < 200; ++i) {
            double m = 0.5 * (lo + hi);
            if ((g(m) < 0) == (g(lo) < 0)) {
                lo = m;
            } else {
                hi = m;
            }
        }
        double bound = 10 * p.h / std::log(1 / bracket_h(x, p.h)) * std::exp(-2 * pi * x / p.h) + 1e-15;
        EXPECT_LE(std::abs(0.5 * (lo + hi) - yp), bound) << "x=" << x;
    }
}
