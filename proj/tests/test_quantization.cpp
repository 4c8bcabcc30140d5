#include <gtest/gtest.h>

#include <random>

#include "branchspec/quantization.hpp"

using namespace branchspec;

namespace {

ActionModel zero_model() {
    ActionModel am;
    am.S12.c = {0.0};
    am.S34.c = {0.0};
    return am;
}

ActionModel random_model(std::mt19937& rng, double im_scale) {
    std::uniform_real_distribution<double> u(-1, 1);
    ActionModel am;
    am.S12.c = {cplx(0.05 * u(rng), im_scale * u(rng)), cplx(0.5 * u(rng), 0.1 * u(rng)), cplx(u(rng), 0)};
    am.S34.c = {cplx(0.05 * u(rng), im_scale * u(rng)), cplx(0.5 * u(rng), 0.1 * u(rng)), cplx(u(rng), 0)};
    return am;
}

double rel_log_diff(cplx la, cplx lb) { return std::abs(std::exp(la - lb) - 1.0); }

cplx log_scaled(const Scaled& s) { return std::log(s.value) + s.log_scale; }

}  // namespace

TEST(Params, Validation) {
    SemiclassicalParams p{0.01, 0.0, false};
    EXPECT_EQ(p.alpha2(), 0.0);
    EXPECT_NO_THROW(p.validate());
    SemiclassicalParams q{1e-3, 3e-2, false};
    EXPECT_NEAR(q.alpha2(), 1e-6 / 3e-2, 1e-18);
    q.strict = true;
    EXPECT_THROW(q.validate(), std::invalid_argument);  // eps/sqrt(h) ~ 0.95
    SemiclassicalParams r{1e-4, 1e-3, true};
    EXPECT_NO_THROW(r.validate());
    EXPECT_THROW((SemiclassicalParams{-1.0, 0.0, false}.validate()), std::invalid_argument);
}

TEST(Polynomial, ValueAndDerivative) {
    Polynomial p{{1.0, cplx(0, 2), 3.0}};
    cplx x(0.3, -0.2);
    EXPECT_LT(std::abs(p(x) - (1.0 + cplx(0, 2) * x + 3.0 * x * x)), 1e-15);
    EXPECT_LT(std::abs(p.deriv(x) - (cplx(0, 2) + 6.0 * x)), 1e-15);
    Polynomial2 K{{{0.0, 1.0}, {2.0}}};  // mu + 2 tau
    EXPECT_LT(std::abs(K(0.5, cplx(0.1, 0.2)) - cplx(1.1, 0.2)), 1e-15);
}

TEST(Regime, Choice) {
    SemiclassicalParams p{1e-3, 0.0, false};
    EXPECT_EQ(choose_regime(0.1, p), Regime::Case1Large);
    EXPECT_EQ(choose_regime(cplx(0, 0.003), p), Regime::Case1Small);
    EXPECT_EQ(choose_regime(cplx(0, -0.1), p), Regime::Case2Large);
    EXPECT_EQ(choose_regime(cplx(0, -0.003), p), Regime::Case2Small);
    EXPECT_EQ(choose_regime(cplx(-0.1, -0.01), p), Regime::Case1Large);
    EXPECT_THROW(term_set(cplx(0, -0.1), p, zero_model(), Regime::Case1Large), RegimeError);
}

TEST(TermSet, LabelsAndRates) {
    SemiclassicalParams p{0.01, 0.0, false};
    auto am = zero_model();
    auto ts = term_set(0.2, p, am, Regime::Case1Large);
    ASSERT_EQ(ts.terms.size(), 5u);
    for (Label l : {Label::L1, Label::L2, Label::L3, Label::L4p, Label::L4m}) EXPECT_NE(ts.find(l), nullptr);
    EXPECT_EQ(ts.find(Label::L4), nullptr);
    EXPECT_NEAR(ts.get(Label::L2).rate, pi / 2 * 0.2, 1e-14);
    EXPECT_NEAR(ts.get(Label::L3).rate, pi / 2 * 0.2, 1e-14);
    EXPECT_NEAR(ts.get(Label::L4p).rate, pi * 0.2 + exponent_geometry(0.2, 0.01).Y, 1e-12);
    for (auto& t : ts.terms) EXPECT_NEAR(t.rate, p.h * t.log_value.real(), 1e-12);

    auto ts2 = term_set(cplx(0, -0.2), p, am, Regime::Case2Large);
    for (Label l : {Label::L1p, Label::L1m, Label::L2, Label::L3, Label::L4}) EXPECT_NE(ts2.find(l), nullptr);
}

TEST(TermSet, RateIdentityRandom) {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    SemiclassicalParams p{0.005, 0.0, false};
    for (int n = 0; n < 100; ++n) {
        auto am = random_model(rng, 0.02);
        cplx mu(u(rng), u(rng));
        Regime r = choose_regime(mu, p);
        if (!is_case1(r)) continue;
        auto ts = term_set(mu, p, am, r);
        double lhs = ts.get(Label::L2).rate + ts.get(Label::L3).rate;
        double rhs = ts.get(Label::L1).rate + ts.get(Label::L4p).rate;
        EXPECT_NEAR(lhs, rhs, 1e-12);
        // a1 a4+ = a2 a3 in log space, modulo 2 pi i
        cplx d = ts.get(Label::L1).log_value + ts.get(Label::L4p).log_value - ts.get(Label::L2).log_value -
                 ts.get(Label::L3).log_value;
        EXPECT_LT(std::abs(std::exp(d) - 1.0), 1e-12);
    }
}

TEST(TermSet, CoshZerosOfA4) {
    SemiclassicalParams p{0.01, 0.0, false};
    cplx mu(0, 3.5 * p.h);
    auto ts = term_set(mu, p, zero_model(), choose_regime(mu, p));
    cplx a4 = std::exp(ts.get(Label::L4p).log_value) + std::exp(ts.get(Label::L4m).log_value);
    EXPECT_LE(std::abs(a4), 1e-10 * std::abs(std::exp(ts.get(Label::L4p).log_value)));
}

TEST(TermSet, OverlapConsistency) {
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> u(-0.4, 0.4);
    SemiclassicalParams p{0.01, 0.0, false};
    auto am = random_model(rng, 0.01);
    for (int n = 0; n < 200; ++n) {
        cplx mu(u(rng), u(rng));
        if (!case1_admissible(mu) || !case2_admissible(mu) || std::abs(mu) < 0.01) continue;
        auto A = term_set(mu, p, am, Regime::Case1Large, false);
        auto B = term_set(mu, p, am, Regime::Case2Large, false);
        auto ga = sum_terms(A, p.h), gb = sum_terms(B, p.h);
        double scale = std::max(A.max_rate(), B.max_rate());
        cplx va = ga.value * std::exp((ga.offset - scale) / p.h);
        cplx vb = gb.value * std::exp((gb.offset - scale) / p.h);
        EXPECT_LE(std::abs(va - vb), std::max(1e-6, std::exp(-2 * pi * std::abs(mu.real()) / p.h))) << mu;
    }
    // the fixed sample point
    auto A = sum_terms(term_set(0.05, p, zero_model(), Regime::Case1Large, false), p.h);
    auto B = sum_terms(term_set(0.05, p, zero_model(), Regime::Case2Large, false), p.h);
    EXPECT_LE(std::abs(A.value * std::exp((A.offset - B.offset) / p.h) - B.value), 1e-6 * std::abs(B.value));
}

TEST(TermSet, FactorizedForm) {
    SemiclassicalParams p{0.01, 0.0, false};
    std::mt19937 rng(9);
    auto am = random_model(rng, 0.01);
    for (cplx mu : {cplx(0.15, 0.01), cplx(-0.1, 0.03), cplx(0.3, -0.05)}) {
        auto ts = term_set(mu, p, am, Regime::Case1Large);
        auto g = sum_terms(ts, p.h);
        double off = g.offset / p.h;
        cplx l4 = ts.get(Label::L4p).log_value, l2 = ts.get(Label::L2).log_value, l3 = ts.get(Label::L3).log_value;
        cplx f = std::exp(l4 - off) * (1.0 + std::exp(l2 - l4)) * (1.0 + std::exp(l3 - l4)) +
                 std::exp(ts.get(Label::L4m).log_value - off);
        EXPECT_LE(std::abs(f - g.value), 1e-12 * std::abs(g.value) + 1e-14);
    }
}

TEST(EvalG, ConjugateSymmetryForZeroActions) {
    SemiclassicalParams p{0.01, 0.0, false};
    auto am = zero_model();
    for (cplx mu : {cplx(0.05, 0.02), cplx(0.1, -0.03), cplx(-0.2, 0.1), cplx(0.25, 0.2)}) {
        double a = std::real(log_G(mu, p, am)), b = std::real(log_G(std::conj(mu), p, am));
        EXPECT_NEAR(a, b, 1e-8 * std::abs(a));
    }
}

TEST(EvalG, ScaledRepresentation) {
    SemiclassicalParams p{0.001, 0.0, false};
    auto g = eval_G(0.4, p, zero_model());
    EXPECT_TRUE(std::isfinite(g.value.real()));
    EXPECT_GT(g.offset, 0.5);  // e^{offset/h} is far beyond double range
}

TEST(ExponentGeometry, Relations) {
    const double h = 0.01;
    for (cplx mu : {cplx(0.1, 0.02), cplx(0.2, -0.05), cplx(-0.15, 0.03), cplx(-0.3, -0.1)}) {
        auto g = exponent_geometry(mu, h);
        EXPECT_NEAR(g.X - g.Y, pi / 2 * mu.real(), 1e-15);
        double s = mu.real() > 0 ? 1.0 : -1.0;
        EXPECT_NEAR(g.Ytilde - g.Y, s * pi * mu.real(), h * std::exp(-2 * pi * std::abs(mu.real()) / h) + 1e-14);
    }
}

// The residual with raw actions is -e^{-i theta14/h} F with F built from the
// shifted actions: one factor -i relates the condition to F, the other comes
// from the pi h/2 shift.
TEST(Residual, ProportionalToF) {
    std::mt19937 rng(21);
    std::uniform_real_distribution<double> u(-1, 1);
    const double h = 0.01;
    SemiclassicalParams p{h, 0.0, false};
    for (int n = 0; n < 20; ++n) {
        auto raw = random_model(rng, 0.005);
        std::array<cplx, 4> d;
        for (auto& x : d) x = cplx(0.05 * u(rng), 0.2 * h * u(rng));
        if (n < 5) d = {0.0, 0.0, 0.0, 0.0};
        std::pair<double, double> th{u(rng), u(rng)};
        cplx mu(0.3 * u(rng), 0.2 * u(rng));
        auto c = renormalize(exact_matrix(mu, h), d);
        auto tilde = fold_actions(raw, c, th, h);
        cplx logF = log_G(mu, p, tilde) + pi * mu / (2 * h);
        cplx pred = logF + I * pi - (I / h) * c.theta(1, 4);
        EXPECT_LE(rel_log_diff(log_scaled(quantization_residual(mu, p, raw, c, th)), pred), 1e-9) << mu;
    }
}

TEST(Residual, IntegerFloquetShift) {
    const double h = 0.02;
    SemiclassicalParams p{h, 0.0, false};
    std::mt19937 rng(4);
    auto raw = random_model(rng, 0.01);
    cplx mu(0.1, 0.03);
    auto c = renormalize(exact_matrix(mu, h), {0.01, -0.02, 0.0, 0.03});
    auto a = log_scaled(quantization_residual(mu, p, raw, c, {0.3, 0.7}));
    auto b = log_scaled(quantization_residual(mu, p, raw, c, {1.3, 0.7}));
    EXPECT_LE(rel_log_diff(a, b), 1e-12);
}

TEST(Grushin, ParenthesisIdentities) {
    std::mt19937 rng(13);
    std::uniform_real_distribution<double> u(-1, 1);
    const double h = 0.02;
    SemiclassicalParams p{h, 0.0, false};
    for (int n = 0; n < 20; ++n) {
        auto raw = random_model(rng, 0.005);
        std::array<cplx, 4> d;
        for (auto& x : d) x = cplx(0.05 * u(rng), 0.1 * h * u(rng));
        std::pair<double, double> th{u(rng), u(rng)};
        cplx mu(0.2 * u(rng), 0.1 * u(rng));
        auto c = renormalize(exact_matrix(mu, h), d);
        auto tt = tilde_theta(mu, h, raw, th);
        cplx P = quantization_residual(mu, p, raw, c, th).full();
        cplx up = det_E_minus_plus(GrushinVariant::UpperGrushin, mu, p, c, tt);
        cplx lo = det_E_minus_plus(GrushinVariant::LowerGrushin, mu, p, c, tt);
        double scale = std::abs(c.c23 * std::exp(2 * pi * I * (tt.first + tt.second))) + std::abs(c.c14) +
                       std::abs(c.c24 * std::exp(2 * pi * I * tt.second)) + std::abs(c.c13 * std::exp(2 * pi * I * tt.first));
        EXPECT_LE(std::abs(up * c.c23 - P), 1e-12 * scale);
        EXPECT_LE(std::abs(lo * c.c14 * std::exp(2 * pi * I * (tt.first + tt.second)) - P), 1e-12 * scale);
    }
}

TEST(Grushin, Degenerate) {
    RenormalizedCoeffs c;
    c.log_c23 = -800.0;
    c.log_c14 = 0.0;
    SemiclassicalParams p{0.01, 0.0, false};
    EXPECT_THROW(det_E_minus_plus(GrushinVariant::UpperGrushin, 0.0, p, c, {0.0, 0.0}), DegenerateError);
    EXPECT_NO_THROW(det_E_minus_plus(GrushinVariant::LowerGrushin, 0.0, p, c, {0.0, 0.0}));
}

TEST(BohrSommerfeld, LeftIntSpacing) {
    SemiclassicalParams p{0.01, 0.0, false};
    auto am = zero_model();
    // mu ln mu - mu + pi h/4 = 2 pi h (k + 1/2) near mu = 0.1 gives k ~ -5.6
    auto r = bohr_sommerfeld_solve(BSBranch::LeftInt, -6, p, am);
    ASSERT_TRUE(r.converged);
    EXPECT_LE(r.residual, 1e-12);
    EXPECT_NEAR(r.mu.real(), 0.1, 0.03);
    auto r2 = bohr_sommerfeld_solve(BSBranch::LeftInt, -5, p, am);
    double spacing = std::abs(r2.mu - r.mu);
    double pred = 2 * pi * p.h / std::log(1 / r.mu.real());
    EXPECT_NEAR(spacing, pred, 0.15 * pred);
    // root of 1 + a3/a4+
    auto ts = term_set(r.mu, p, am, Regime::Case1Large);
    cplx q = 1.0 + std::exp(ts.get(Label::L3).log_value - ts.get(Label::L4p).log_value);
    EXPECT_LE(std::abs(q), 1e-9);
}

TEST(BohrSommerfeld, ExtRealActionsNearlyReal) {
    SemiclassicalParams p{0.01, 0.0, false};
    auto am = zero_model();
    am.S12.c = {0.02, 0.2};
    am.S34.c = {-0.01, 0.1};
    int found = 0;
    for (int k = -3; k <= 8; ++k) {
        try {
            auto r = bohr_sommerfeld_solve(BSBranch::Ext, k, p, am);
            if (!r.converged) continue;
            ++found;
            double x = -r.mu.real();
            EXPECT_LE(std::abs(r.mu.imag()), 10 * p.h * std::exp(-2 * pi * x / p.h) / std::log(1 / x) + 1e-15);
            auto ts = term_set(r.mu, p, am, Regime::Case1Large, false);
            double off = std::max(ts.get(Label::L1).rate, ts.get(Label::L4m).rate) / p.h;
            cplx s = std::exp(ts.get(Label::L1).log_value - off) + std::exp(ts.get(Label::L4m).log_value - off);
            EXPECT_LE(std::abs(s), 1e-9);
        } catch (const SectorEscape&) {
        }
    }
    EXPECT_GT(found, 3);
}

TEST(BohrSommerfeld, MonotoneInK) {
    SemiclassicalParams p{0.005, 0.0, false};
    auto am = zero_model();
    am.S12.c = {-0.3, 4.0};
    std::vector<cplx> roots;
    for (int k = -5; k <= 10; ++k) {
        try {
            auto r = bohr_sommerfeld_solve(BSBranch::RightInt, k, p, am);
            if (r.converged && r.mu.real() >= 0.05) roots.push_back(r.mu);
        } catch (const SectorEscape&) {
        }
    }
    ASSERT_GE(roots.size(), 3u);
    for (std::size_t i = 0; i + 1 < roots.size(); ++i) {
        ASSERT_GT((std::log(roots[i]) + am.S12.deriv(roots[i])).real(), 0.0);
        EXPECT_GT(roots[i + 1].real(), roots[i].real());
    }
}

TEST(BohrSommerfeld, ExtGeneratingFunctionContinuousAtZero) {
    auto am = zero_model();
    am.S12.c = {0.02, 0.2};
    // (function) - 2 mu ln(-mu) stays bounded and converges as mu -> 0-
    std::vector<double> vals;
    for (double x : {1e-2, 1e-3, 1e-4, 1e-5}) {
        cplx mu = -x;
        cplx f = am.S12(mu) + am.S34(mu) + 2.0 * mu * (std::log(-mu) - 1.0) - 2.0 * mu * std::log(-mu);
        vals.push_back(f.real());
    }
    EXPECT_NEAR(vals.back(), 0.02, 1e-4);
    for (std::size_t i = 1; i < vals.size(); ++i) EXPECT_LT(std::abs(vals[i] - 0.02), std::abs(vals[i - 1] - 0.02) + 1e-12);
}

TEST(BohrSommerfeld, SectorEscape) {
    SemiclassicalParams p{0.01, 0.0, false};
    EXPECT_THROW(bohr_sommerfeld_solve(BSBranch::RightInt, 0, p, zero_model(), cplx(-0.1, 0)), SectorEscape);
}

TEST(Assemble2D, UnperturbedLadder) {
    SemiclassicalParams p{0.01, 0.0, false};
    Polynomial g{{0.0, 1.0}};
    Polynomial2 K{{{0.0, 1.0}}};
    auto pts = assemble_2d_spectrum({-40, 40}, g, K, 0.0, 0, p, [](double) { return std::vector<cplx>{cplx(0.1, 0.02)}; });
    ASSERT_EQ(pts.size(), 61u);
    for (auto& pt : pts) {
        EXPECT_DOUBLE_EQ(pt.z.imag(), 0.0);
        EXPECT_NEAR(pt.z.real(), p.h * pt.k, 1e-15);
        EXPECT_LE(std::abs(pt.z.real()), 0.3 + 1e-12);
    }
    for (std::size_t i = 1; i < pts.size(); ++i) EXPECT_LT(pts[i - 1].k, pts[i].k);
}

TEST(Assemble2D, DirectEmbedding) {
    SemiclassicalParams p{0.01, 0.05, false};
    Polynomial g{{0.0, 1.0}};
    Polynomial2 K{{{0.0, 1.0}}};
    auto pts = assemble_2d_spectrum({0, 5}, g, K, 0.0, 0, p, [](double tau) {
        return std::vector<cplx>{cplx(tau, 0.01), cplx(-tau, 0.02)};
    });
    ASSERT_EQ(pts.size(), 12u);
    for (auto& pt : pts) EXPECT_LT(std::abs(pt.z - (p.h * pt.k + I * p.epsilon * pt.mu)), 1e-15);
}

TEST(Assemble2D, RejectsDecreasingG) {
    SemiclassicalParams p{0.01, 0.0, false};
    Polynomial g{{0.0, -1.0}};
    Polynomial2 K{{{0.0, 1.0}}};
    EXPECT_THROW(assemble_2d_spectrum({0, 5}, g, K, 0.0, 0, p, [](double) { return std::vector<cplx>{}; }),
                 std::invalid_argument);
}
