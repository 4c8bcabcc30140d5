#include <gtest/gtest.h>

#include <branchspec/schrodinger.hpp>

using namespace branchspec;

namespace {

OperatorSpec oscillator(int N = 300) {
    OperatorSpec s;
    s.V = {{0, 0, 1}};
    s.W = {{0}};
    s.h = 0.01;
    s.L = 3;
    s.N = N;
    return s;
}

OperatorSpec double_well(RealPoly W, double h = 0.01, int N = 300) {
    OperatorSpec s;
    s.V = {{0, 0, -1, 0, 1}};
    s.W = std::move(W);
    s.h = h;
    s.epsilon = 0.8;
    s.L = 2.5;
    s.N = N;
    return s;
}

bool contains_close(const std::vector<cplx>& v, cplx z, double tol) {
    for (auto w : v)
        if (std::abs(w - z) <= tol) return true;
    return false;
}

}  // namespace

TEST(Discretize, BoxGroundState) {
    OperatorSpec s;
    s.V = {{2.0}};  // constant shift keeps the wall check satisfied
    s.W = {{0}};
    s.h = 0.5;
    s.L = 1.5;
    s.N = 200;
    auto sp = solve_operator(s);
    double expect = 2.0 + s.h * s.h * std::pow(pi / (2 * s.L), 2);
    EXPECT_NEAR(sp.eigenvalues.front().real(), expect, 1e-6 * expect);
}

TEST(Discretize, SecondDerivativeKillsConstants) {
    for (int N : {16, 64, 301}) {
        auto D2 = cheb_d2(N, 2.5);
        for (int i = 0; i <= N; ++i) {
            long double s = 0, mag = 0;
            for (int j = 0; j <= N; ++j) {
                s += D2[std::size_t(i) * (N + 1) + j];
                mag += std::abs(D2[std::size_t(i) * (N + 1) + j]);
            }
            EXPECT_LE(std::abs(double(s)), 1e-9 * std::max(1.0, double(mag)));
        }
    }
}

TEST(Discretize, SecondDerivativeOfQuadratic) {
    int N = 40;
    double L = 2.0;
    auto x = cgl_nodes(N, L);
    auto D2 = cheb_d2(N, L);
    for (int i = 0; i <= N; ++i) {
        double s = 0;
        for (int j = 0; j <= N; ++j) s += D2[std::size_t(i) * (N + 1) + j] * (x[j] * x[j] * x[j] + x[j] * x[j]);
        EXPECT_NEAR(s, 6 * x[i] + 2, 1e-8);
    }
}

TEST(Discretize, ParityCommutes) {
    auto s = double_well({{0, 0, 1}}, 0.01, 120);
    auto A = discretize(s);
    int n = A.n;
    double worst = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) worst = std::max(worst, std::abs(A(i, j) - A(n - 1 - i, n - 1 - j)));
    EXPECT_LE(worst, 1e-12 * A.frobenius());
}

TEST(Discretize, ImaginaryPartIsExactlyThePerturbation) {
    // The collocation D2 is not symmetric, so the anti-Hermitian part of the
    // matrix is not diag(eps W). What holds exactly is that eps enters only
    // through i eps W on the diagonal.
    auto s = double_well({{0, 0.12, 1}}, 0.01, 100);
    auto A = discretize(s);
    auto s0 = s;
    s0.epsilon = 0;
    auto A0 = discretize(s0);
    auto x = cgl_nodes(s.N, s.L);
    for (int i = 0; i < A.n; ++i)
        for (int j = 0; j < A.n; ++j) {
            cplx d = A(i, j) - A0(i, j);
            cplx want = i == j ? cplx(0, s.epsilon * s.W(x[i + 1])) : cplx(0);
            EXPECT_EQ(d, want);
        }
}

TEST(Discretize, RejectsLowWalls) {
    auto s = oscillator();
    s.L = 0.5;
    EXPECT_THROW(discretize(s), std::invalid_argument);
    s = oscillator();
    s.N = 8;
    EXPECT_THROW(discretize(s), std::invalid_argument);
}

TEST(Eigensolve, HarmonicOscillator) {
    auto sp = solve_operator(oscillator());
    for (int k = 0; k <= 10; ++k) {
        double e = 0.01 * (2 * k + 1);
        EXPECT_NEAR(sp.eigenvalues[k].real(), e, 1e-8 * e);
        EXPECT_NEAR(sp.eigenvalues[k].imag(), 0.0, 1e-8 * e);
    }
}

TEST(Eigensolve, RotatedOscillator) {
    // x^2 + i eps x^2 = (1 + i eps) x^2 has eigenvalues h (2k+1) sqrt(1 + i eps)
    auto s = oscillator();
    s.W = {{0, 0, 1}};
    s.epsilon = 0.1;
    auto sp = resolved_spectrum(s, 40);
    for (int k = 0; k < 10; ++k) {
        cplx e = s.h * (2 * k + 1) * std::sqrt(cplx(1, s.epsilon));
        EXPECT_LE(std::abs(sp.eigenvalues[k] - e), 1e-9 * std::abs(e));
    }
}

TEST(Eigensolve, CompanionCubeRoots) {
    DenseMatrix C(3);
    C(0, 2) = 1;
    C(1, 0) = 1;
    C(2, 1) = 1;
    auto sp = eigensolve(C);
    ASSERT_EQ(sp.eigenvalues.size(), 3u);
    for (int k = 0; k < 3; ++k) {
        cplx r = std::polar(1.0, 2 * pi * k / 3);
        EXPECT_TRUE(contains_close(sp.eigenvalues, r, 1e-12)) << k;
    }
}

TEST(Eigensolve, BackwardErrorOfRandomPairs) {
    auto s = double_well({{0, 0, 1}}, 0.01, 200);
    auto A = discretize(s);
    auto sp = eigensolve(A);
    double nA = A.frobenius();
    for (std::size_t k = 0; k < sp.eigenvalues.size(); k += 17)
        EXPECT_LE(detail::inverse_iteration_residual(A, sp.eigenvalues[k], nA), 1e-8 * nA);
}

TEST(Filter, OscillatorKeepsLowModes) {
    auto s1 = solve_operator(oscillator(300));
    auto s2 = solve_operator(oscillator(340));
    auto f = spurious_filter(s1, s2);
    EXPECT_GT(f.dropped, 200u);
    EXPECT_EQ(f.retained() + f.dropped, s1.eigenvalues.size());
    for (int k = 0; k < 30; ++k) EXPECT_TRUE(contains_close(f.eigenvalues, s1.eigenvalues[k], 0.0)) << k;
}

TEST(Filter, IdentityAtZeroDelta) {
    auto s = solve_operator(oscillator(120));
    auto f = spurious_filter(s, s);
    EXPECT_EQ(f.dropped, 0u);
    EXPECT_EQ(f.eigenvalues, s.eigenvalues);
}

TEST(Filter, ResolutionConvergence) {
    auto s = oscillator(300);
    s.W = {{0, 1}};
    s.epsilon = 0.05;
    auto a = resolved_spectrum(s, 40);
    s.N = 340;
    auto b = resolved_spectrum(s, 40);
    std::size_t n = std::min<std::size_t>(20, std::min(a.retained(), b.retained()));
    ASSERT_GE(n, 20u);
    for (std::size_t k = 0; k < n; ++k) EXPECT_TRUE(contains_close(b.eigenvalues, a.eigenvalues[k], 1e-6)) << k;
}

TEST(Filter, SmallEpsilonContinuity) {
    auto s = oscillator();
    s.W = {{0, 0.3, 1}};
    s.epsilon = 1e-6;
    auto a = resolved_spectrum(s, 40);
    s.epsilon = 0;
    auto b = resolved_spectrum(s, 40);
    ASSERT_GE(a.retained(), 30u);
    for (std::size_t k = 0; k < a.retained(); ++k)
        EXPECT_TRUE(contains_close(b.eigenvalues, a.eigenvalues[k], 1e-4)) << k;
}

TEST(Filter, NumericalRangeContainment) {
    for (RealPoly W : {RealPoly{{0, 0, 1}}, RealPoly{{0, 0.12, 1}}}) {
        auto s = double_well(W);
        auto sp = resolved_spectrum(s, 40);
        auto x = cgl_nodes(s.N, s.L);
        double wmin = INFINITY, wmax = -INFINITY;
        for (double xi : x) {
            wmin = std::min(wmin, W(xi));
            wmax = std::max(wmax, W(xi));
        }
        ASSERT_GT(sp.retained(), 0u);
        for (auto z : sp.eigenvalues) {
            EXPECT_GE(z.imag(), s.epsilon * wmin - 1e-6);
            EXPECT_LE(z.imag(), s.epsilon * wmax + 1e-6);
        }
    }
}

TEST(PhaseSpace, AreaOfOscillator) {
    // {xi^2 + x^2 <= E} is a disc of area pi E
    RealPoly V{{0, 0, 1}};
    EXPECT_NEAR(phase_space_area(V, 3, 0, 0.5), pi * 0.5, 1e-4);
    EXPECT_NEAR(weyl_count(V, 3, 0.01, 0, 0.21), 10.5, 1e-2);
}

TEST(Branches, EvenPerturbationPairs) {
    auto s = double_well({{0, 0, 1}});
    auto r = branch_structure_report(resolved_spectrum(s, 40), s);
    ASSERT_GE(r.pairs.size(), 3u);
    EXPECT_TRUE(r.unpaired.empty());
    for (const auto& p : r.pairs) EXPECT_LE(p.gap, 1e-6);
    EXPECT_EQ(r.im_negative, 0u);
}

TEST(Branches, OddPerturbationSplitsBySign) {
    auto s = double_well({{0, 0, 0, 1}});
    auto r = branch_structure_report(resolved_spectrum(s, 40), s);
    ASSERT_GT(r.im_positive, 0u);
    EXPECT_EQ(r.im_positive, r.im_negative);
    ASSERT_EQ(r.below_clusters.size(), 2u);
    EXPECT_LT(r.below_clusters[0].hi, 0.0);
    EXPECT_GT(r.below_clusters[1].lo, 0.0);
}

TEST(Branches, ShiftedPerturbationTwoPositiveClusters) {
    auto s = double_well({{0, 0.12, 1}});
    auto r = branch_structure_report(resolved_spectrum(s, 40), s);
    ASSERT_EQ(r.below_clusters.size(), 2u);
    EXPECT_GT(r.below_clusters[0].lo, 0.0);
    EXPECT_GT(r.below_clusters[1].lo - r.below_clusters[0].hi, s.epsilon / 20);
}
