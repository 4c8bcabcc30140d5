#pragma once

// Chebyshev collocation for (hD)^2 + V + i eps W on [-L, L] with Dirichlet
// ends, and a dense nonsymmetric eigensolver on top of LAPACK.

#include <lapacke.h>

#include <map>
#include <random>

#include "common.hpp"

namespace branchspec {

// Real polynomial, c[k] multiplies x^k.
struct RealPoly {
    std::vector<double> c;

    double operator()(double x) const {
        double r = 0;
        for (auto it = c.rbegin(); it != c.rend(); ++it) r = r * x + *it;
        return r;
    }
};

struct OperatorSpec {
    RealPoly V, W;
    double h = 0.001;
    double epsilon = 0.0;
    double L = 2.5;
    int N = 800;
    // Top of the energy window the run is meant to resolve.
    double window_max = 0.5;

    void validate() const {
        if (!(h > 0) || !(epsilon >= 0) || !(L > 0)) throw std::invalid_argument("operator: need h > 0, eps >= 0, L > 0");
        if (N < 16) throw std::invalid_argument("operator: N must be at least 16");
        double need = 2.0 * window_max;
        if (V(L) < need || V(-L) < need)
            throw std::invalid_argument("operator: V(+-L) below twice the window energy");
    }
};

// Row-major dense complex matrix.
struct DenseMatrix {
    int n = 0;
    std::vector<cplx> a;

    DenseMatrix() = default;
    explicit DenseMatrix(int n_) : n(n_), a(std::size_t(n_) * n_) {}
    cplx& operator()(int i, int j) { return a[std::size_t(i) * n + j]; }
    cplx operator()(int i, int j) const { return a[std::size_t(i) * n + j]; }

    double frobenius() const {
        double s = 0;
        for (const auto& v : a) s += std::norm(v);
        return std::sqrt(s);
    }
};

struct Spectrum {
    std::vector<cplx> eigenvalues;
    std::vector<bool> resolved;
    int N = 0;
    double L = 0, h = 0, epsilon = 0;
    std::size_t dropped = 0;

    std::size_t retained() const { return std::count(resolved.begin(), resolved.end(), true); }
};

inline std::vector<double> cgl_nodes(int N, double L) {
    std::vector<double> x(N + 1);
    for (int j = 0; j <= N; ++j) x[j] = L * std::cos(pi * j / N);
    // exact antisymmetry keeps parity checks at rounding level
    for (int j = 0; j < N - j; ++j) x[N - j] = -x[j];
    if (N % 2 == 0) x[N / 2] = 0.0;
    return x;
}

// Second derivative matrix on all N+1 nodes, row-major.
inline std::vector<double> cheb_d2(int N, double L) {
    const int M = N + 1;
    std::vector<double> D(std::size_t(M) * M, 0.0);
    auto ang = [&](int j) { return pi * j / N; };
    for (int i = 0; i < M; ++i) {
        double ci = (i == 0 || i == N) ? 2.0 : 1.0;
        long double rowsum = 0;
        for (int j = 0; j < M; ++j) {
            if (i == j) continue;
            double cj = (j == 0 || j == N) ? 2.0 : 1.0;
            // cos a_i - cos a_j without cancellation
            double dx = -2.0 * std::sin(0.5 * (ang(i) + ang(j))) * std::sin(0.5 * (ang(i) - ang(j)));
            double v = (ci / cj) * (((i + j) % 2) ? -1.0 : 1.0) / dx;
            D[std::size_t(i) * M + j] = v;
            rowsum += v;
        }
        D[std::size_t(i) * M + i] = -static_cast<double>(rowsum);
    }
    std::vector<double> D2(std::size_t(M) * M, 0.0);
    for (int i = 0; i < M; ++i) {
        double* out = &D2[std::size_t(i) * M];
        for (int k = 0; k < M; ++k) {
            double d = D[std::size_t(i) * M + k];
            const double* row = &D[std::size_t(k) * M];
            for (int j = 0; j < M; ++j) out[j] += d * row[j];
        }
        long double off = 0;
        for (int j = 0; j < M; ++j)
            if (j != i) off += out[j];
        out[i] = -static_cast<double>(off);
    }
    double s = 1.0 / (L * L);
    for (auto& v : D2) v *= s;
    return D2;
}

inline DenseMatrix discretize(const OperatorSpec& spec) {
    spec.validate();
    const int N = spec.N, M = N + 1;
    auto x = cgl_nodes(N, spec.L);
    auto D2 = cheb_d2(N, spec.L);
    DenseMatrix A(N - 1);
    double h2 = spec.h * spec.h;
    for (int i = 1; i < N; ++i) {
        for (int j = 1; j < N; ++j) A(i - 1, j - 1) = -h2 * D2[std::size_t(i) * M + j];
        A(i - 1, i - 1) += cplx(spec.V(x[i]), spec.epsilon * spec.W(x[i]));
    }
    return A;
}

namespace detail {

inline std::vector<cplx> zgeev_values(DenseMatrix A) {
    std::vector<cplx> w(A.n);
    lapack_int info = LAPACKE_zgeev(LAPACK_ROW_MAJOR, 'N', 'N', A.n, reinterpret_cast<lapack_complex_double*>(A.a.data()),
                                    A.n, reinterpret_cast<lapack_complex_double*>(w.data()), nullptr, A.n, nullptr, A.n);
    if (info > 0) throw NoConvergence("eigensolve: QR iteration did not converge");
    if (info < 0) throw std::invalid_argument("eigensolve: bad argument to zgeev " + std::to_string(info));
    return w;
}

// Shifted inverse iteration. Any unit x certifies lam up to ||Ax - lam x||,
// so the smallest residual over the steps is returned; for strongly
// non-normal matrices later steps can lose accuracy.
inline double inverse_iteration_residual(const DenseMatrix& A, cplx lam, double normA, int steps = 3) {
    const int n = A.n;
    DenseMatrix B = A;
    cplx shift = lam + cplx(1e-12, 1e-12) * normA;
    for (int i = 0; i < n; ++i) B(i, i) -= shift;
    std::vector<lapack_int> piv(n);
    lapack_int info = LAPACKE_zgetrf(LAPACK_ROW_MAJOR, n, n, reinterpret_cast<lapack_complex_double*>(B.a.data()), n,
                                     piv.data());
    if (info < 0) throw std::invalid_argument("eigensolve: bad argument to zgetrf");
    if (info > 0) return 0.0;  // exactly singular shift: lam is an eigenvalue to working precision
    std::vector<cplx> x(n);
    std::mt19937_64 rng(0x5eed + n);
    std::normal_distribution<double> nd;
    for (auto& v : x) v = cplx(nd(rng), nd(rng));
    double best = INFINITY;
    for (int it = 0; it < steps; ++it) {
        LAPACKE_zgetrs(LAPACK_ROW_MAJOR, 'N', n, 1, reinterpret_cast<const lapack_complex_double*>(B.a.data()), n,
                       piv.data(), reinterpret_cast<lapack_complex_double*>(x.data()), 1);
        double s = 0;
        for (auto& v : x) s += std::norm(v);
        s = 1.0 / std::sqrt(s);
        for (auto& v : x) v *= s;
        double r = 0;
        for (int i = 0; i < n; ++i) {
            cplx acc = -lam * x[i];
            for (int j = 0; j < n; ++j) acc += A(i, j) * x[j];
            r += std::norm(acc);
        }
        best = std::min(best, std::sqrt(r));
    }
    return best;
}

}  // namespace detail

struct EigenOptions {
    int backward_checks = 10;
    double backward_tol = 1e-8;
    std::uint64_t seed = 1;
};

inline Spectrum eigensolve(const DenseMatrix& A, const EigenOptions& opt = {}) {
    if (A.n < 1 || A.n > 2000) throw std::invalid_argument("eigensolve: size must be in [1, 2000]");
    auto w = detail::zgeev_values(A);
    double normA = A.frobenius();
    std::mt19937_64 rng(opt.seed);
    int checks = std::min(opt.backward_checks, A.n);
    for (int c = 0; c < checks; ++c) {
        std::size_t k = std::uniform_int_distribution<std::size_t>(0, w.size() - 1)(rng);
        double r = detail::inverse_iteration_residual(A, w[k], normA);
        if (r > opt.backward_tol * normA) throw NumericalError("eigensolve: backward error check failed");
    }
    std::sort(w.begin(), w.end(), [](cplx a, cplx b) {
        return a.real() != b.real() ? a.real() < b.real() : a.imag() < b.imag();
    });
    Spectrum s;
    s.eigenvalues = std::move(w);
    s.resolved.assign(s.eigenvalues.size(), true);
    s.N = A.n + 1;
    return s;
}

inline Spectrum solve_operator(const OperatorSpec& spec, const EigenOptions& opt = {}) {
    Spectrum s = eigensolve(discretize(spec), opt);
    s.N = spec.N;
    s.L = spec.L;
    s.h = spec.h;
    s.epsilon = spec.epsilon;
    return s;
}

// Keeps the eigenvalues of s1 that reappear in s2 within 1e-6 (1 + |lam|).
// Matching is one to one, nearest first.
inline Spectrum spurious_filter(const Spectrum& s1, const Spectrum& s2, double tol = 1e-6) {
    std::multimap<double, std::size_t> by_re;
    for (std::size_t j = 0; j < s2.eigenvalues.size(); ++j) by_re.emplace(s2.eigenvalues[j].real(), j);
    std::vector<bool> used(s2.eigenvalues.size(), false);
    Spectrum out = s1;
    out.eigenvalues.clear();
    out.resolved.clear();
    out.dropped = 0;
    for (std::size_t i = 0; i < s1.eigenvalues.size(); ++i) {
        cplx lam = s1.eigenvalues[i];
        double t = tol * (1.0 + std::abs(lam));
        std::size_t best = SIZE_MAX;
        double bd = t;
        for (auto it = by_re.lower_bound(lam.real() - t); it != by_re.end() && it->first <= lam.real() + t; ++it) {
            if (used[it->second]) continue;
            double d = std::abs(s2.eigenvalues[it->second] - lam);
            if (d <= bd) {
                bd = d;
                best = it->second;
            }
        }
        if (best == SIZE_MAX) {
            ++out.dropped;
            continue;
        }
        used[best] = true;
        out.eigenvalues.push_back(lam);
        out.resolved.push_back(true);
    }
    return out;
}

// Runs N and N + delta and filters.
inline Spectrum resolved_spectrum(const OperatorSpec& spec, int delta, const EigenOptions& opt = {}) {
    OperatorSpec s2 = spec;
    s2.N = spec.N + delta;
    std::vector<Spectrum> runs(2);
    parallel_for(2, [&](std::size_t k) { runs[k] = solve_operator(k == 0 ? spec : s2, opt); });
    return spurious_filter(runs[0], runs[1]);
}

// Area of {a <= xi^2 + V(x) <= b} over [-L, L], by midpoint rule.
inline double phase_space_area(const RealPoly& V, double L, double a, double b, int n = 400000) {
    double dx = 2.0 * L / n, s = 0;
    for (int i = 0; i < n; ++i) {
        double v = V(-L + (i + 0.5) * dx);
        s += std::sqrt(std::max(0.0, b - v)) - std::sqrt(std::max(0.0, a - v));
    }
    return 2.0 * s * dx;
}

inline double weyl_count(const RealPoly& V, double L, double h, double a, double b) {
    return phase_space_area(V, L, a, b) / (2.0 * pi * h);
}

struct EigenPair {
    cplx a, b;
    double gap;
};

struct ImCluster {
    double lo, hi;
    std::size_t count;
};

struct BranchReport {
    std::vector<cplx> below, above;
    std::vector<EigenPair> pairs;
    std::vector<cplx> unpaired;
    std::size_t im_positive = 0, im_negative = 0;
    std::vector<ImCluster> below_clusters, above_clusters;
};

namespace detail {

inline std::vector<ImCluster> cluster_imag(const std::vector<cplx>& z, double gap) {
    std::vector<double> im;
    for (auto v : z) im.push_back(v.imag());
    std::sort(im.begin(), im.end());
    std::vector<ImCluster> out;
    for (double v : im) {
        if (out.empty() || v - out.back().hi > gap)
            out.push_back({v, v, 1});
        else {
            out.back().hi = v;
            ++out.back().count;
        }
    }
    return out;
}

}  // namespace detail

// Below the barrier: mutual nearest neighbours become pairs. Above it: the
// imaginary parts are clustered with gap eps/20.
inline BranchReport branch_structure_report(const Spectrum& s, const OperatorSpec& spec) {
    BranchReport r;
    for (std::size_t i = 0; i < s.eigenvalues.size(); ++i) {
        if (!s.resolved[i]) continue;
        cplx z = s.eigenvalues[i];
        (z.real() < 0 ? r.below : r.above).push_back(z);
    }
    auto& b = r.below;
    std::sort(b.begin(), b.end(), [](cplx x, cplx y) { return x.real() < y.real(); });
    const std::size_t n = b.size();
    std::vector<std::size_t> nn(n, SIZE_MAX);
    for (std::size_t i = 0; i < n; ++i) {
        double best = INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            double d = std::abs(b[j] - b[i]);
            if (d < best) {
                best = d;
                nn[i] = j;
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (nn[i] != SIZE_MAX && nn[nn[i]] == i) {
            if (i < nn[i]) r.pairs.push_back({b[i], b[nn[i]], std::abs(b[i] - b[nn[i]])});
        } else {
            r.unpaired.push_back(b[i]);
        }
    }
    for (auto z : b) (z.imag() >= 0 ? r.im_positive : r.im_negative)++;
    double gap = spec.epsilon > 0 ? spec.epsilon / 20 : 1e-9;
    r.below_clusters = detail::cluster_imag(r.below, gap);
    r.above_clusters = detail::cluster_imag(r.above, gap);
    return r;
}

}  // namespace branchspec
