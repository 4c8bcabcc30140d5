#pragma once

// Exact averaging along the 1:1 harmonic oscillator flow z_j(t) = e^{-it} z_j,
// and the critical point analysis of the reduced average on the sphere.

#include <gmpxx.h>

#include <array>
#include <boost/numeric/odeint.hpp>
#include <functional>
#include <map>
#include <optional>
#include <sstream>

#include "common.hpp"

namespace branchspec {

// Gaussian rational re + i im.
struct QQi {
    mpq_class re{0}, im{0};

    QQi() = default;
    QQi(mpq_class r, mpq_class i = 0) : re(std::move(r)), im(std::move(i)) {}
    QQi(long r) : re(r), im(0) {}

    bool is_zero() const { return sgn(re) == 0 && sgn(im) == 0; }
    QQi conj() const { return {re, -im}; }
    friend QQi operator+(const QQi& a, const QQi& b) { return {a.re + b.re, a.im + b.im}; }
    friend QQi operator-(const QQi& a, const QQi& b) { return {a.re - b.re, a.im - b.im}; }
    friend QQi operator-(const QQi& a) { return {-a.re, -a.im}; }
    friend QQi operator*(const QQi& a, const QQi& b) {
        return {a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re};
    }
    friend bool operator==(const QQi& a, const QQi& b) { return a.re == b.re && a.im == b.im; }
    QQi& operator+=(const QQi& b) { return *this = *this + b; }
    cplx to_cplx() const { return {re.get_d(), im.get_d()}; }
};

inline mpq_class q(long n, long d = 1) {
    mpq_class r(n, d);
    r.canonicalize();
    return r;
}

// Exponents {a1, a2, b1, b2} of z1^a1 z2^a2 zbar1^b1 zbar2^b2.
using ZKey = std::array<int, 4>;

struct BalancedLaurent {
    std::map<ZKey, QQi> terms;

    static BalancedLaurent monomial(ZKey k, QQi c = QQi(1)) {
        BalancedLaurent r;
        if (!c.is_zero()) r.terms[k] = std::move(c);
        return r;
    }
    static BalancedLaurent constant(QQi c) { return monomial({0, 0, 0, 0}, std::move(c)); }

    bool is_zero() const { return terms.empty(); }

    void add(const ZKey& k, const QQi& c) {
        if (c.is_zero()) return;
        auto it = terms.find(k);
        if (it == terms.end()) {
            terms.emplace(k, c);
            return;
        }
        it->second += c;
        if (it->second.is_zero()) terms.erase(it);
    }

    friend BalancedLaurent operator+(BalancedLaurent a, const BalancedLaurent& b) {
        for (const auto& [k, c] : b.terms) a.add(k, c);
        return a;
    }
    friend BalancedLaurent operator-(BalancedLaurent a, const BalancedLaurent& b) {
        for (const auto& [k, c] : b.terms) a.add(k, -c);
        return a;
    }
    friend BalancedLaurent operator*(const QQi& s, const BalancedLaurent& a) {
        BalancedLaurent r;
        if (s.is_zero()) return r;
        for (const auto& [k, c] : a.terms) r.terms.emplace(k, s * c);
        return r;
    }
    friend BalancedLaurent operator*(const BalancedLaurent& a, const BalancedLaurent& b) {
        BalancedLaurent r;
        for (const auto& [ka, ca] : a.terms)
            for (const auto& [kb, cb] : b.terms)
                r.add({ka[0] + kb[0], ka[1] + kb[1], ka[2] + kb[2], ka[3] + kb[3]}, ca * cb);
        return r;
    }
    friend bool operator==(const BalancedLaurent& a, const BalancedLaurent& b) { return a.terms == b.terms; }

    // Frequency of a term under the flow: z^a zbar^b picks up e^{i(|b|-|a|)t}.
    static int frequency(const ZKey& k) { return (k[2] + k[3]) - (k[0] + k[1]); }

    // Negative exponents only as powers of |z_j|^-2.
    bool valid() const {
        for (const auto& [k, c] : terms)
            for (int j = 0; j < 2; ++j)
                if ((k[j] < 0 || k[j + 2] < 0) && k[j] != k[j + 2]) return false;
        return true;
    }
    bool flow_invariant() const {
        for (const auto& [k, c] : terms)
            if (frequency(k) != 0) return false;
        return true;
    }
    BalancedLaurent conj() const {
        BalancedLaurent r;
        for (const auto& [k, c] : terms) r.terms.emplace(ZKey{k[2], k[3], k[0], k[1]}, c.conj());
        return r;
    }
    bool real() const { return conj() == *this; }

    BalancedLaurent part(int freq) const {
        BalancedLaurent r;
        for (const auto& [k, c] : terms)
            if (frequency(k) == freq) r.terms.emplace(k, c);
        return r;
    }

    // d/dz_j (slot j) or d/dzbar_j (slot j + 2).
    BalancedLaurent d(int slot) const {
        BalancedLaurent r;
        for (const auto& [k, c] : terms) {
            if (k[slot] == 0) continue;
            ZKey kk = k;
            --kk[slot];
            r.add(kk, QQi(mpq_class(k[slot])) * c);
        }
        return r;
    }

    cplx operator()(cplx z1, cplx z2) const {
        cplx w1 = std::conj(z1), w2 = std::conj(z2), s = 0;
        for (const auto& [k, c] : terms)
            s += c.to_cplx() * std::pow(z1, k[0]) * std::pow(z2, k[1]) * std::pow(w1, k[2]) * std::pow(w2, k[3]);
        return s;
    }

    std::string str() const {
        if (terms.empty()) return "0";
        std::ostringstream os;
        bool first = true;
        static const char* names[4] = {"z1", "z2", "zb1", "zb2"};
        for (const auto& [k, c] : terms) {
            if (!first) os << " + ";
            first = false;
            os << "(" << c.re.get_str();
            if (sgn(c.im) != 0) os << (sgn(c.im) > 0 ? "+" : "") << c.im.get_str() << "i";
            os << ")";
            for (int j = 0; j < 4; ++j)
                if (k[j] != 0) os << "*" << names[j] << (k[j] != 1 ? "^" + std::to_string(k[j]) : "");
        }
        return os.str();
    }
};

// {f, g} = sum_j d_xi_j f d_x_j g - d_x_j f d_xi_j g, which in z = x + i xi
// becomes 2i sum_j (f_{z_j} g_{zbar_j} - f_{zbar_j} g_{z_j}).
inline BalancedLaurent poisson(const BalancedLaurent& f, const BalancedLaurent& g) {
    BalancedLaurent s;
    for (int j = 0; j < 2; ++j) s = s + (f.d(j) * g.d(j + 2)) - (f.d(j + 2) * g.d(j));
    return QQi(0, 2) * s;
}

// p = (|z1|^2 + |z2|^2) / 2.
inline BalancedLaurent oscillator_p() {
    return BalancedLaurent::monomial({1, 0, 1, 0}, q(1, 2)) + BalancedLaurent::monomial({0, 1, 0, 1}, q(1, 2));
}

// Polynomial in x1, x2, xi1, xi2: exponents {x1, x2, xi1, xi2}.
using XPoly = std::map<std::array<int, 4>, mpq_class>;

inline BalancedLaurent x_power(int j, int n) {
    // ((z + zbar) / 2)^n
    BalancedLaurent r = BalancedLaurent::constant(1);
    BalancedLaurent lin;
    ZKey kz{}, kw{};
    kz[j] = 1;
    kw[j + 2] = 1;
    lin = BalancedLaurent::monomial(kz, q(1, 2)) + BalancedLaurent::monomial(kw, q(1, 2));
    for (int i = 0; i < n; ++i) r = r * lin;
    return r;
}

inline BalancedLaurent xi_power(int j, int n) {
    // ((z - zbar) / 2i)^n
    BalancedLaurent r = BalancedLaurent::constant(1);
    ZKey kz{}, kw{};
    kz[j] = 1;
    kw[j + 2] = 1;
    QQi f(0, q(-1, 2));
    BalancedLaurent lin = BalancedLaurent::monomial(kz, f) + BalancedLaurent::monomial(kw, -f);
    for (int i = 0; i < n; ++i) r = r * lin;
    return r;
}

inline BalancedLaurent to_z(const XPoly& p) {
    BalancedLaurent r;
    for (const auto& [e, c] : p) {
        if (sgn(c) == 0) continue;
        if (e[0] < 0 || e[1] < 0 || e[2] < 0 || e[3] < 0) throw std::invalid_argument("to_z: negative exponent");
        r = r + QQi(c) * (x_power(0, e[0]) * x_power(1, e[1]) * xi_power(0, e[2]) * xi_power(1, e[3]));
    }
    return r;
}

// Time average over the period 2 pi: the frequency zero part.
inline BalancedLaurent flow_average(const BalancedLaurent& p) { return p.part(0); }

// G0 = (1/T) int_0^T (t - T/2) q(exp(t H_p)) dt with T = 2 pi. A term of
// frequency k is multiplied by 1/(ik) = -i/k, so that H_p G0 = q - <q>.
inline BalancedLaurent weighted_average_G0(const BalancedLaurent& p) {
    BalancedLaurent r;
    for (const auto& [k, c] : p.terms) {
        int f = BalancedLaurent::frequency(k);
        if (f != 0) r.add(k, QQi(0, q(-1, f)) * c);
    }
    return r;
}

// Cor(q1, q2; s) = < {q1 o exp(s H_p), q2} >, stored by frequency n as the
// coefficient of e^{ins}.
inline std::map<int, BalancedLaurent> correlation(const BalancedLaurent& q1, const BalancedLaurent& q2) {
    std::map<int, int> freqs;
    for (const auto& [k, c] : q1.terms) freqs[BalancedLaurent::frequency(k)] = 1;
    std::map<int, BalancedLaurent> out;
    for (const auto& [n, unused] : freqs) {
        auto v = flow_average(poisson(q1.part(n), q2));
        if (!v.is_zero()) out[n] = std::move(v);
    }
    return out;
}

// C(q1, q2) = (1/2pi) int_0^{2pi} (s - pi) Cor(q1, q2; s) ds. The Fourier
// coefficients of s - pi are i/k, so a frequency n term gets -i/n.
inline BalancedLaurent correlation_C(const BalancedLaurent& q1, const BalancedLaurent& q2) {
    BalancedLaurent r;
    for (const auto& [n, v] : correlation(q1, q2))
        if (n != 0) r = r + QQi(0, q(-1, n)) * v;
    return r;
}

// --- action-angle form ------------------------------------------------------

struct NotInvariant : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Key {2 p1, 2 p2, k}: rho1^p1 rho2^p2 times cos(k theta) or sin(k theta),
// theta = theta1 - theta2, k >= 0.
struct ActionAngleTerm {
    QQi cos_coef, sin_coef;
};
using ActionAngle = std::map<std::array<int, 3>, ActionAngleTerm>;

// Substitutes z_j = sqrt(2 rho_j) e^{-i theta_j}.
inline ActionAngle to_action_angle(const BalancedLaurent& avg) {
    ActionAngle out;
    for (const auto& [k, c] : avg.terms) {
        int m1 = k[0] - k[2], m2 = k[1] - k[3];
        if (m1 + m2 != 0) throw NotInvariant("to_action_angle: term depends on theta1 + theta2");
        int e1 = k[0] + k[2], e2 = k[1] + k[3];
        // (2 rho)^{e/2} with e1 + e2 even: the power of two is 2^{(e1+e2)/2}
        int tw = (e1 + e2) / 2;
        mpq_class scale = 1;
        if (tw >= 0)
            mpz_mul_2exp(scale.get_num_mpz_t(), scale.get_num_mpz_t(), tw);
        else
            mpz_mul_2exp(scale.get_den_mpz_t(), scale.get_den_mpz_t(), -tw);
        QQi v = QQi(scale) * c;
        // e^{-i m1 theta}
        int kk = std::abs(m1);
        auto& t = out[{e1, e2, kk}];
        t.cos_coef += v;
        if (kk != 0) t.sin_coef += (m1 > 0 ? QQi(0, -1) : QQi(0, 1)) * v;
    }
    for (auto it = out.begin(); it != out.end();)
        it = (it->second.cos_coef.is_zero() && it->second.sin_coef.is_zero()) ? out.erase(it) : std::next(it);
    return out;
}

// --- reduced function on the sphere -----------------------------------------

struct ReducedFunction {
    mpq_class a, b, c;
    mpq_class d() const { return b / 2 - 2 * a; }

    // <q> with g = sqrt(rho (1 - rho)), y = cos theta.
    double operator()(double rho, double theta) const {
        double g2 = rho * (1 - rho), g = std::sqrt(std::max(0.0, g2)), y = std::cos(theta);
        return a.get_d() + d().get_d() * g2 + b.get_d() * g2 * y * y + c.get_d() * g * y;
    }
    // Same function in Hopf coordinates X = 2g cos theta, Y = -2g sin theta,
    // Z = 2 rho - 1 on the unit sphere.
    double on_sphere(double X, double, double Z) const {
        return a.get_d() + d().get_d() * (1 - Z * Z) / 4 + b.get_d() * X * X / 4 + c.get_d() * X / 2;
    }
};

// The q of the barrier-top family as an x-polynomial:
// (2/3) a (x1^4 + x2^4) + b x1^2 x2^2 + (2/3) c (x1^3 x2 + x1 x2^3).
inline XPoly barrier_top_q(const mpq_class& a, const mpq_class& b, const mpq_class& c) {
    XPoly p;
    p[{4, 0, 0, 0}] = q(2, 3) * a;
    p[{0, 4, 0, 0}] = q(2, 3) * a;
    p[{2, 2, 0, 0}] = b;
    p[{3, 1, 0, 0}] = q(2, 3) * c;
    p[{1, 3, 0, 0}] = q(2, 3) * c;
    return p;
}

enum class Region { A, Bplus, Bminus, Cplus, Cminus, D, Eplus, Eminus, F, Boundary, Degenerate };

inline std::string to_string(Region r) {
    static const char* n[] = {"A", "B+", "B-", "C+", "C-", "D", "E+", "E-", "F", "Boundary", "Degenerate"};
    return n[static_cast<int>(r)];
}

enum class Location { HorizontalCircle, VerticalCircle, CrossingCf, CrossingCb, PoleRho0, PoleRho1 };

inline std::string to_string(Location l) {
    static const char* n[] = {"horizontal", "vertical", "Cf", "Cb", "pole_rho0", "pole_rho1"};
    return n[static_cast<int>(l)];
}

struct CriticalPoint {
    Location location;
    double rho, theta;       // position in the (rho, theta) chart; poles use theta = 0
    int sig1, sig2;          // signs, component order as in the classification tables
    mpq_class value;         // critical value of <q>
    bool saddle() const { return sig1 * sig2 < 0; }
};

struct CriticalPointReport {
    Region region;
    bool negated = false;    // d < 0: region label is that of -<q>
    std::vector<CriticalPoint> points;

    std::size_t saddles() const {
        return std::count_if(points.begin(), points.end(), [](const CriticalPoint& p) { return p.saddle(); });
    }
};

struct DegenerateInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline int sign(const mpq_class& v) { return sgn(v) > 0 ? 1 : (sgn(v) < 0 ? -1 : 0); }

// Region of (b, c) for d > 0, or Boundary within tol of one of the four lines.
inline Region region_of(double b, double c, double d, double tol = 1e-9) {
    if (d < 0) return region_of(-b, -c, -d, tol);
    if (std::abs(c - b) <= tol || std::abs(c + b) <= tol || std::abs(c - (b + d)) <= tol ||
        std::abs(c + (b + d)) <= tol)
        return Region::Boundary;
    using std::max, std::min;
    if (b > 0 && -b < c && c < b) return Region::A;
    if (max(b, -b) < c && c < b + d) return Region::Bplus;
    if (-(b + d) < c && c < min(b, -b)) return Region::Bminus;
    if (c > max(b + d, -b)) return Region::Cplus;
    if (c < min(b, -b - d)) return Region::Cminus;
    if (b < 0 && max(b, -b - d) < c && c < min(-b, b + d)) return Region::D;
    if (max(b + d, -b - d) < c && c < -b) return Region::Eplus;
    if (b < c && c < min(-b - d, b + d)) return Region::Eminus;
    if (b < -d && b + d < c && c < -b - d) return Region::F;
    return Region::Boundary;
}

inline CriticalPointReport classify_critical_points(const ReducedFunction& rf) {
    const mpq_class &a = rf.a, &b = rf.b, &c = rf.c;
    const mpq_class d = rf.d();
    if (sgn(d) == 0) throw DegenerateInput("classify: d = b/2 - 2a vanishes");
    if (sgn(c) != 0 && sgn(b) == 0) throw DegenerateInput("classify: c != 0 requires b != 0");
    if (sgn(c) != 0 && sgn(b + d) == 0) throw DegenerateInput("classify: c != 0 requires b + d != 0");

    CriticalPointReport r;
    r.negated = sgn(d) < 0;
    if (sgn(c) == 0) {
        r.region = Region::Degenerate;
    } else {
        r.region = region_of(b.get_d(), c.get_d(), d.get_d());
        if (r.region == Region::Boundary) throw DegenerateInput("classify: parameters lie on a region boundary line");
    }
    const mpq_class bd = b + d;

    r.points.push_back({Location::CrossingCf, 0.5, 0.0, sign(-c - b - d), sign(-b - c), a + bd / 4 + c / 2});
    r.points.push_back({Location::CrossingCb, 0.5, pi, sign(c - b - d), sign(c - b), a + bd / 4 - c / 2});

    // horizontal circle, cos theta = -c/b
    if (sgn(b) != 0) {
        mpq_class y = -c / b;
        if (abs(y) < 1) {
            double th = std::acos(y.get_d());
            mpq_class v = a + d / 4 - c * c / (4 * b);
            r.points.push_back({Location::HorizontalCircle, 0.5, th, sign(b), -sign(d), v});
            r.points.push_back({Location::HorizontalCircle, 0.5, -th, sign(b), -sign(d), v});
        }
    }
    // vertical circle away from the crossings and poles
    if (sgn(c) != 0) {
        mpq_class t = c / bd;
        std::optional<double> theta;
        if (-1 < t && t < 0) theta = 0.0;
        if (0 < t && t < 1) theta = pi;
        if (theta) {
            double g = std::abs(t.get_d()) / 2;
            double s = std::sqrt(1 - 4 * g * g);
            mpq_class v = a - c * c / (4 * bd);
            r.points.push_back({Location::VerticalCircle, (1 - s) / 2, *theta, sign(bd), sign(d), v});
            r.points.push_back({Location::VerticalCircle, (1 + s) / 2, *theta, sign(bd), sign(d), v});
        }
    } else {
        r.points.push_back({Location::PoleRho0, 0.0, 0.0, sign(bd), sign(d), a});
        r.points.push_back({Location::PoleRho1, 1.0, 0.0, sign(bd), sign(d), a});
    }
    return r;
}

// --- numerical verification -------------------------------------------------

struct Mismatch : std::runtime_error {
    std::vector<std::string> discrepancies;
    explicit Mismatch(std::vector<std::string> d)
        : std::runtime_error("grid_verify: " + (d.empty() ? std::string("mismatch") : d.front())),
          discrepancies(std::move(d)) {}
};

struct FoundPoint {
    double rho, theta;
    int sig_rho, sig_theta;
    double value;
};

struct GridVerification {
    std::vector<FoundPoint> found;
    std::size_t matched = 0;
};

namespace detail {

// Gradient and Hessian of <q> in (rho, theta), analytic.
struct Jet {
    double f, fr, ft, frr, frt, ftt;
};

inline Jet jet(const ReducedFunction& rf, double rho, double th) {
    double a = rf.a.get_d(), b = rf.b.get_d(), c = rf.c.get_d(), d = rf.d().get_d();
    double g2 = rho * (1 - rho), g = std::sqrt(g2);
    double g2r = 1 - 2 * rho, g2rr = -2;
    double gr = g2r / (2 * g), grr = (g2rr * g2 - 0.5 * g2r * g2r) / (2 * g2 * g);
    double y = std::cos(th), yt = -std::sin(th), ytt = -y;
    Jet j;
    j.f = a + d * g2 + b * g2 * y * y + c * g * y;
    j.fr = d * g2r + b * g2r * y * y + c * gr * y;
    j.ft = 2 * b * g2 * y * yt + c * g * yt;
    j.frr = d * g2rr + b * g2rr * y * y + c * grr * y;
    j.frt = 2 * b * g2r * y * yt + c * gr * yt;
    j.ftt = 2 * b * g2 * (yt * yt + y * ytt) + c * g * ytt;
    return j;
}

inline int sgn_tol(double v, double tol = 1e-9) { return v > tol ? 1 : (v < -tol ? -1 : 0); }

inline double angle_diff(double a, double b) { return std::abs(wrap_pi(a - b)); }

}  // namespace detail

// Searches a 400 x 400 (rho, theta) grid for local minima of |grad|, refines
// by Newton, and checks the poles in the chart Re/Im zeta. Throws Mismatch if
// the result is not in bijection with the report (positions within 1e-6 and
// equal signatures).
inline GridVerification grid_verify(const ReducedFunction& rf, const CriticalPointReport& rep, int n = 400) {
    // Latitude chart rho = (1 + sin phi)/2 keeps points near the poles on the
    // grid. At a critical point the Hessian signs agree with the rho chart.
    const double plim = pi / 2 - 1e-6;
    auto phi_at = [&](int i) { return -plim + 2 * plim * i / (n - 1); };
    auto th_at = [&](int j) { return -pi + 2 * pi * j / n; };
    auto jet_phi = [&](double phi, double th) {
        double rho = (1 + std::sin(phi)) / 2, r1 = std::cos(phi) / 2, r2 = -std::sin(phi) / 2;
        auto J = detail::jet(rf, rho, th);
        return detail::Jet{J.f, J.fr * r1, J.ft, J.frr * r1 * r1 + J.fr * r2, J.frt * r1, J.ftt};
    };
    std::vector<double> gn(std::size_t(n) * n);
    parallel_for(n, [&](std::size_t i) {
        for (int j = 0; j < n; ++j) {
            // gradient length in the round metric d phi^2 + cos^2 phi d theta^2
            double ph = phi_at(int(i));
            auto J = jet_phi(ph, th_at(j));
            gn[i * n + j] = std::hypot(J.fr, J.ft / std::cos(ph));
        }
    });
    std::vector<FoundPoint> found;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double v = gn[std::size_t(i) * n + j];
            bool is_min = true;
            for (int di = -1; di <= 1 && is_min; ++di)
                for (int dj = -1; dj <= 1; ++dj) {
                    if (!di && !dj) continue;
                    int ii = i + di, jj = (j + dj + n) % n;
                    if (ii < 0 || ii >= n) continue;
                    if (gn[std::size_t(ii) * n + jj] < v) {
                        is_min = false;
                        break;
                    }
                }
            if (!is_min) continue;
            double ph = phi_at(i), t = th_at(j);
            bool ok = false;
            for (int it = 0; it < 60; ++it) {
                auto J = jet_phi(ph, t);
                double det = J.frr * J.ftt - J.frt * J.frt;
                if (det == 0) break;
                double dp = (J.ftt * J.fr - J.frt * J.ft) / det;
                double dt = (J.frr * J.ft - J.frt * J.fr) / det;
                ph -= dp;
                t -= dt;
                if (!(std::abs(ph) < pi / 2)) break;
                if (std::hypot(dp, dt) < 1e-14) {
                    ok = true;
                    break;
                }
            }
            if (!ok) continue;
            double r = (1 + std::sin(ph)) / 2;
            auto J = detail::jet(rf, r, t);
            if (std::hypot(J.fr, J.ft) > 1e-9) continue;
            t = wrap_pi(t);
            bool dup = false;
            for (const auto& p : found)
                if (std::abs(p.rho - r) < 1e-9 && detail::angle_diff(p.theta, t) < 1e-7) dup = true;
            if (!dup) found.push_back({r, t, detail::sgn_tol(J.frr), detail::sgn_tol(J.ftt), J.f});
        }

    // Poles: zeta1 = u + iv near rho = 0 (and the mirror chart near rho = 1).
    // <q> = a + d |z|^2 (1 - |z|^2) + b u^2 (1 - |z|^2) + c u sqrt(1 - |z|^2).
    // Both poles give the same chart expression.
    const double a = rf.a.get_d(), c = rf.c.get_d(), b = rf.b.get_d(), d = rf.d().get_d();
    auto Hc = [&](double u, double v) {
        double s = u * u + v * v;
        return a + d * s * (1 - s) + b * u * u * (1 - s) + c * u * std::sqrt(1 - s);
    };
    const double e = 1e-4;
    double Hu = (Hc(e, 0) - Hc(-e, 0)) / (2 * e), Hv = (Hc(0, e) - Hc(0, -e)) / (2 * e);
    if (std::hypot(Hu, Hv) < 1e-10) {
        double Huu = (Hc(e, 0) - 2 * Hc(0, 0) + Hc(-e, 0)) / (e * e);
        double Hvv = (Hc(0, e) - 2 * Hc(0, 0) + Hc(0, -e)) / (e * e);
        for (double rho : {0.0, 1.0})
            found.push_back({rho, 0.0, detail::sgn_tol(Huu, 1e-6), detail::sgn_tol(Hvv, 1e-6), Hc(0, 0)});
    }

    std::vector<std::string> bad;
    std::vector<bool> used(found.size(), false);
    std::size_t matched = 0;
    for (const auto& p : rep.points) {
        int hit = -1;
        for (std::size_t k = 0; k < found.size(); ++k) {
            if (used[k]) continue;
            bool pole = p.location == Location::PoleRho0 || p.location == Location::PoleRho1;
            bool same = std::abs(found[k].rho - p.rho) < 1e-6 &&
                        (pole || detail::angle_diff(found[k].theta, p.theta) < 1e-6);
            if (same) {
                hit = int(k);
                break;
            }
        }
        std::string where = to_string(p.location) + " at rho=" + std::to_string(p.rho) +
                            " theta=" + std::to_string(p.theta);
        if (hit < 0) {
            bad.push_back("not found: " + where);
            continue;
        }
        used[hit] = true;
        const auto& f = found[hit];
        // Table order: horizontal points list (theta, rho); the others (rho, theta).
        int s1 = p.location == Location::HorizontalCircle ? f.sig_theta : f.sig_rho;
        int s2 = p.location == Location::HorizontalCircle ? f.sig_rho : f.sig_theta;
        if (s1 != p.sig1 || s2 != p.sig2) {
            bad.push_back("signature differs: " + where);
            continue;
        }
        if (std::abs(f.value - p.value.get_d()) > 1e-9 * (1 + std::abs(f.value))) {
            bad.push_back("value differs: " + where);
            continue;
        }
        ++matched;
    }
    for (std::size_t k = 0; k < found.size(); ++k)
        if (!used[k])
            bad.push_back("unreported critical point at rho=" + std::to_string(found[k].rho) +
                          " theta=" + std::to_string(found[k].theta));
    if (!bad.empty()) throw Mismatch(bad);
    return {found, matched};
}

// --- separatrix action integral ---------------------------------------------

struct NoLoop : NumericalError {
    using NumericalError::NumericalError;
};

enum class Loop { LeftLoop, RightLoop };

// Real function on the sphere in Hopf coordinates.
using SphereFunction = std::function<double(double X, double Y, double Z)>;

// Evaluates a flow-invariant element on the energy surface |z1|^2 + |z2|^2 = 2.
inline SphereFunction on_sigma(const BalancedLaurent& f) {
    return [f](double X, double Y, double Z) {
        double rho = std::clamp((1 + Z) / 2, 0.0, 1.0);
        double theta = std::atan2(-Y, X);
        cplx z1 = std::sqrt(2 * rho), z2 = std::polar(std::sqrt(2 * (1 - rho)), theta);
        return f(z1, z2).real();
    };
}

struct ActionOptions {
    double offset = 1e-8;        // launch distance along the unstable direction
    double tail_radius = 1e-6;   // linearized flow inside this distance
    double rtol = 1e-12, atol = 1e-14;
    double max_time = 1e4;
};

namespace detail {

using State = std::array<double, 4>;  // X, Y, Z, integral

struct SphereGrad {
    const ReducedFunction& rf;
    std::array<double, 3> operator()(double X, double, double Z) const {
        return {rf.b.get_d() * X / 2 + rf.c.get_d() / 2, 0.0, -rf.d().get_d() * Z / 2};
    }
};

}  // namespace detail

// Integral over the separatrix loop of f - f(saddle) with respect to the time
// of the Hamilton flow of <q> on the sphere (symplectic form d rho ^ d theta,
// which is half the area form, so the vector field is 2 n x grad H). The
// saddle must be one of the two crossings; with two crossing saddles pass
// which one through at_cb.
inline double action_perturbation(const ReducedFunction& rf, const SphereFunction& f, Loop loop,
                                  std::optional<bool> at_cb = std::nullopt, const ActionOptions& opt = {}) {
    auto rep = classify_critical_points(rf);
    std::vector<const CriticalPoint*> cands;
    for (const auto& p : rep.points)
        if (p.saddle() && (p.location == Location::CrossingCf || p.location == Location::CrossingCb)) {
            if (!at_cb || *at_cb == (p.location == Location::CrossingCb)) cands.push_back(&p);
        }
    if (cands.size() != 1) throw NoLoop("action_perturbation: need exactly one crossing saddle");
    const double sx = cands.front()->location == Location::CrossingCf ? 1.0 : -1.0;
    const std::array<double, 3> s{sx, 0.0, 0.0};

    detail::SphereGrad grad{rf};
    auto field = [&](const detail::State& u, detail::State& du, double) {
        auto g = grad(u[0], u[1], u[2]);
        // project to the tangent plane, then v = 2 n x g
        double r2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        double gn = (g[0] * u[0] + g[1] * u[1] + g[2] * u[2]) / r2;
        for (int k = 0; k < 3; ++k) g[k] -= gn * u[k];
        du[0] = 2 * (u[1] * g[2] - u[2] * g[1]);
        du[1] = 2 * (u[2] * g[0] - u[0] * g[2]);
        du[2] = 2 * (u[0] * g[1] - u[1] * g[0]);
        du[3] = 0;
    };
    const double fs = f(s[0], s[1], s[2]);

    // Linearization in the tangent coordinates (Y, Z) at the saddle.
    double Jm[2][2];
    const double e = 1e-6;
    for (int col = 0; col < 2; ++col) {
        detail::State up{}, um{}, dp{}, dm{};
        double dy = col == 0 ? e : 0, dz = col == 1 ? e : 0;
        auto place = [&](double y, double z, detail::State& st) {
            st = {sx * std::sqrt(1 - y * y - z * z), y, z, 0};
        };
        place(dy, dz, up);
        place(-dy, -dz, um);
        field(up, dp, 0);
        field(um, dm, 0);
        Jm[0][col] = (dp[1] - dm[1]) / (2 * e);
        Jm[1][col] = (dp[2] - dm[2]) / (2 * e);
    }
    double tr = Jm[0][0] + Jm[1][1], det = Jm[0][0] * Jm[1][1] - Jm[0][1] * Jm[1][0];
    double disc = tr * tr / 4 - det;
    if (disc <= 0) throw NoLoop("action_perturbation: saddle is not hyperbolic");
    double lam = tr / 2 + std::sqrt(disc);
    // eigenvector of the positive eigenvalue
    double vy = Jm[0][1], vz = lam - Jm[0][0];
    if (std::hypot(vy, vz) < 1e-14) {
        vy = lam - Jm[1][1];
        vz = Jm[1][0];
    }
    double nv = std::hypot(vy, vz);
    vy /= nv;
    vz /= nv;
    if ((loop == Loop::RightLoop) != (vz > 0)) {
        vy = -vy;
        vz = -vz;
    }
    if (std::abs(vz) < 1e-12) throw NoLoop("action_perturbation: unstable direction tangent to the horizontal circle");

    auto at = [&](double y, double z) {
        return detail::State{sx * std::sqrt(1 - y * y - z * z), y, z, 0};
    };
    // Tail of int (f - fs) dt along x(t) = s + w r0 e^{lam t}, t in (-inf, 0]:
    // with f - fs = A r + B r^2 it is A r0 / lam + B r0^2 / (2 lam).
    auto tail = [&](double wy, double wz, double r0, double rate) {
        auto p1 = at(wy * r0, wz * r0), p2 = at(wy * r0 / 2, wz * r0 / 2);
        double f1 = f(p1[0], p1[1], p1[2]) - fs, f2 = f(p2[0], p2[1], p2[2]) - fs;
        double B = 2 * (f1 - 2 * f2), A = f1 - B;
        return A / rate + B / (2 * rate);
    };

    using namespace boost::numeric::odeint;
    auto stepper = make_dense_output(opt.atol, opt.rtol, runge_kutta_dopri5<detail::State>());
    detail::State u = at(vy * opt.offset, vz * opt.offset);
    double total = tail(vy, vz, opt.offset, lam);
    auto integrand = [&](const detail::State& st) { return f(st[0], st[1], st[2]) - fs; };

    // Integrate with the running integral as a fourth component.
    auto full = [&](const detail::State& st, detail::State& ds, double t) {
        field(st, ds, t);
        ds[3] = integrand(st);
    };
    stepper.initialize(u, 0.0, 1e-3 / lam);
    bool left_region = false;
    detail::State prev = u, fin{};
    double prev_dist = opt.offset;
    bool returned = false;
    while (stepper.current_time() < opt.max_time) {
        stepper.do_step(full);
        const auto& cur = stepper.current_state();
        double dist = std::sqrt(std::pow(cur[0] - s[0], 2) + cur[1] * cur[1] + cur[2] * cur[2]);
        if (dist > 1e-3) left_region = true;
        if (left_region && dist < opt.tail_radius) {
            fin = cur;
            returned = true;
            break;
        }
        // closest approach passed between two steps
        if (left_region && dist < 1e-3 && dist > prev_dist) {
            fin = prev;
            returned = true;
            break;
        }
        prev = cur;
        prev_dist = dist;
    }
    if (!returned) throw NoLoop("action_perturbation: orbit did not return to the saddle");
    double dist = std::sqrt(std::pow(fin[0] - s[0], 2) + fin[1] * fin[1] + fin[2] * fin[2]);
    total += fin[3];
    // incoming tail along the stable direction from the last point
    total += tail(fin[1] / dist, fin[2] / dist, dist, lam);
    return total;
}

}  // namespace branchspec
