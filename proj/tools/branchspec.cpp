// branchspec command line driver.
//
//   branchspec spectrum|model|skeleton|count|bs|average|classify
//              [--config FILE] [--check] [--out DIR] [--svg]
//
// Exit codes: 0 ok, 2 config, 3 numerical, 4 check failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <branchspec/flowavg.hpp>
#include <branchspec/schrodinger.hpp>
#include <branchspec/zerocount.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

using namespace branchspec;
using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr int schema_version = 1;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// --- config access ----------------------------------------------------------

// Wraps an object and rejects keys that were never read.
class Section {
  public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    bool has(const std::string& k) const { return j_.contains(k); }

    const json& raw(const std::string& k) {
        used_.insert(k);
        if (!j_.contains(k)) throw ConfigError(where(k) + ": missing");
        return j_.at(k);
    }

    double num(const std::string& k, std::optional<double> def = std::nullopt) {
        if (!has(k)) {
            if (def) return *def;
            throw ConfigError(where(k) + ": missing");
        }
        const json& v = raw(k);
        if (!v.is_number()) throw ConfigError(where(k) + ": expected a number");
        double d = v.get<double>();
        if (!std::isfinite(d)) throw ConfigError(where(k) + ": not finite");
        return d;
    }

    int integer(const std::string& k, std::optional<int> def = std::nullopt) {
        if (!has(k)) {
            if (def) return *def;
            throw ConfigError(where(k) + ": missing");
        }
        const json& v = raw(k);
        if (!v.is_number_integer()) throw ConfigError(where(k) + ": expected an integer");
        return v.get<int>();
    }

    bool flag(const std::string& k, bool def) {
        if (!has(k)) return def;
        const json& v = raw(k);
        if (!v.is_boolean()) throw ConfigError(where(k) + ": expected true or false");
        return v.get<bool>();
    }

    std::string str(const std::string& k, std::optional<std::string> def = std::nullopt) {
        if (!has(k)) {
            if (def) return *def;
            throw ConfigError(where(k) + ": missing");
        }
        const json& v = raw(k);
        if (!v.is_string()) throw ConfigError(where(k) + ": expected a string");
        return v.get<std::string>();
    }

    Section sub(const std::string& k) { return Section(raw(k), where(k)); }

    std::string where(const std::string& k) const { return path_ + "." + k; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!used_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
    }

  private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

cplx parse_cplx(const json& v, const std::string& where) {
    if (v.is_number()) return v.get<double>();
    if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number())
        return {v[0].get<double>(), v[1].get<double>()};
    throw ConfigError(where + ": expected a number or [re, im]");
}

std::vector<double> real_array(Section& s, const std::string& k) {
    const json& v = s.raw(k);
    if (!v.is_array() || v.empty()) throw ConfigError(s.where(k) + ": expected a nonempty array");
    std::vector<double> out;
    for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError(s.where(k) + ": expected numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

Polynomial cplx_poly(Section& s, const std::string& k) {
    const json& v = s.raw(k);
    if (!v.is_array() || v.empty()) throw ConfigError(s.where(k) + ": expected a nonempty coefficient array");
    Polynomial p;
    for (std::size_t i = 0; i < v.size(); ++i) p.c.push_back(parse_cplx(v[i], s.where(k) + "[" + std::to_string(i) + "]"));
    return p;
}

// Exact rational from an integer, "p/q", or a decimal literal.
mpq_class parse_rational(const json& v, const std::string& where) {
    std::string t;
    if (v.is_number_integer())
        t = std::to_string(v.get<long long>());
    else if (v.is_number())
        t = v.dump();
    else if (v.is_string())
        t = v.get<std::string>();
    else
        throw ConfigError(where + ": expected a rational");
    try {
        if (auto e = t.find_first_of("eE"); e != std::string::npos)
            throw ConfigError(where + ": exponent notation not accepted for exact values");
        if (auto dot = t.find('.'); dot != std::string::npos) {
            std::string digits = t.substr(0, dot) + t.substr(dot + 1);
            mpq_class r(mpz_class(digits, 10), 1);
            mpz_class den;
            mpz_ui_pow_ui(den.get_mpz_t(), 10, t.size() - dot - 1);
            r /= den;
            r.canonicalize();
            return r;
        }
        mpq_class r(t, 10);
        if (sgn(r.get_den()) == 0) throw ConfigError(where + ": zero denominator");
        r.canonicalize();
        return r;
    } catch (const std::invalid_argument&) {
        throw ConfigError(where + ": cannot parse \"" + t + "\" as a rational");
    }
}

SemiclassicalParams read_params(Section& s) {
    SemiclassicalParams p;
    p.h = s.num("h");
    p.epsilon = s.num("epsilon", 0.0);
    p.strict = s.flag("strict", false);
    try {
        p.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("params: ") + e.what());
    }
    if (p.h > 0.5) throw ConfigError(s.where("h") + ": must not exceed 0.5");
    return p;
}

ActionModel read_model(Section& s, const SemiclassicalParams& p) {
    ActionModel am;
    am.S12 = cplx_poly(s, "S12");
    am.S34 = cplx_poly(s, "S34");
    am.description = s.str("description", "config");
    am.physical = s.flag("physical", true);
    if (am.physical && !am.check_physical(p))
        throw ConfigError("model: Im S exceeds the physical bound C (eps + h^2/eps) on the real axis");
    return am;
}

Rect read_rect(Section& s, const std::string& k) {
    Section r = s.sub(k);
    cplx lo = parse_cplx(r.raw("lo"), r.where("lo")), hi = parse_cplx(r.raw("hi"), r.where("hi"));
    r.finish();
    if (!(lo.real() < hi.real() && lo.imag() < hi.imag())) throw ConfigError(s.where(k) + ": need lo < hi in both parts");
    return {lo, hi};
}

// --- output -----------------------------------------------------------------

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string o = "\"";
    for (char c : s) {
        if (c == '"') o += '"';
        o += c;
    }
    return o + "\"";
}

struct Calibration {
    std::vector<std::pair<std::string, std::string>> items;
    void add(const std::string& k, double v) { items.emplace_back(k, fmt(v)); }
    void add(const std::string& k, const std::string& v) { items.emplace_back(k, v); }
    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : items) j[k] = v;
        return j;
    }
};

class Csv {
  public:
    explicit Csv(std::vector<std::string> header) : header_(std::move(header)) {}
    void row(const std::vector<std::string>& r) { rows_.push_back(r); }
    std::size_t size() const { return rows_.size(); }
    std::string render(const Calibration& cal) const {
        std::string s = "# schema_version=" + std::to_string(schema_version) + "\n";
        for (const auto& [k, v] : cal.items) s += "# " + k + "=" + v + "\n";
        auto line = [&](const std::vector<std::string>& r) {
            for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + csv_field(r[i]);
            s += "\r\n";
        };
        line(header_);
        for (const auto& r : rows_) line(r);
        return s;
    }

  private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

struct SvgSeries {
    std::string name, color;
    std::vector<std::pair<double, double>> pts;
    double radius = 1.5;
};

std::string svg_scatter(const std::string& title, const std::string& xl, const std::string& yl,
                        const std::vector<SvgSeries>& series, const Calibration& cal) {
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (auto [x, y] : s.pts) {
            x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
        }
    if (!(x0 <= x1)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
    const double W = 640, H = 480, m = 50;
    auto px = [&](double x) { return m + (x - x0) / (x1 - x0) * (W - 2 * m); };
    auto py = [&](double y) { return H - m - (y - y0) / (y1 - y0) * (H - 2 * m); };
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" viewBox=\"0 0 640 480\">\n";
    s += "<!-- schema_version=" + std::to_string(schema_version);
    for (const auto& [k, v] : cal.items) s += " " + k + "=" + v;
    s += " -->\n<title>" + title + "</title>\n<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
    s += "<rect x=\"50\" y=\"50\" width=\"540\" height=\"380\" fill=\"none\" stroke=\"black\"/>\n";
    auto text = [&](double x, double y, const std::string& t, const char* anchor) {
        s += "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" font-size=\"11\" text-anchor=\"" + anchor + "\">" + t +
             "</text>\n";
    };
    char b[64];
    std::snprintf(b, sizeof b, "%.4g", x0);
    text(m, H - m + 15, b, "start");
    std::snprintf(b, sizeof b, "%.4g", x1);
    text(W - m, H - m + 15, b, "end");
    std::snprintf(b, sizeof b, "%.4g", y0);
    text(m - 4, H - m, b, "end");
    std::snprintf(b, sizeof b, "%.4g", y1);
    text(m - 4, m + 8, b, "end");
    text(W / 2, H - 12, xl, "middle");
    text(14, H / 2, yl, "middle");
    text(W / 2, 30, title, "middle");
    double ly = 64;
    for (const auto& se : series) {
        s += "<g fill=\"" + se.color + "\">\n";
        for (auto [x, y] : se.pts) {
            std::snprintf(b, sizeof b, "%.2f", px(x));
            std::string cx = b;
            std::snprintf(b, sizeof b, "%.2f", py(y));
            s += "<circle cx=\"" + cx + "\" cy=\"" + b + "\" r=\"" + fmt(se.radius) + "\"/>\n";
        }
        s += "</g>\n";
        if (!se.name.empty()) {
            s += "<circle cx=\"" + fmt(W - m - 90) + "\" cy=\"" + fmt(ly - 4) + "\" r=\"3\" fill=\"" + se.color + "\"/>\n";
            text(W - m - 82, ly, se.name, "start");
            ly += 14;
        }
    }
    return s + "</svg>\n";
}

// Files are collected and written only after the whole run succeeded.
struct Outputs {
    std::vector<std::pair<std::string, std::string>> files;
    void add(std::string name, std::string content) { files.emplace_back(std::move(name), std::move(content)); }
    void write(const fs::path& dir) const {
        fs::create_directories(dir);
        for (const auto& [n, c] : files) {
            fs::path tmp = dir / (n + ".tmp"), dst = dir / n;
            {
                std::ofstream f(tmp, std::ios::binary);
                f << c;
                if (!f) throw std::runtime_error("cannot write " + tmp.string());
            }
            fs::rename(tmp, dst);
        }
    }
};

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json header(const std::string& command, const Calibration& cal) {
    json j;
    j["schema_version"] = schema_version;
    j["command"] = command;
    j["calibration"] = cal.to_json();
    return j;
}

json cjson(cplx z) { return json::array({z.real(), z.imag()}); }

struct Run {
    bool check = false, svg = false;
    Outputs out;
    std::vector<std::string> check_failures;
    void require(bool ok, const std::string& what) {
        if (!ok) check_failures.push_back(what);
    }
};

// --- spectrum ---------------------------------------------------------------

json default_spectrum() {
    return json::parse(R"({"schema_version": 1, "h": 0.01, "epsilon": 0.8, "V": [0, 0, -1, 0, 1],
                           "W": [0, 0, 1], "L": 2.5, "N": 300, "delta": 40, "window_max": 0.5})");
}

void cmd_spectrum(Section& cfg, Run& run) {
    OperatorSpec spec;
    spec.h = cfg.num("h");
    spec.epsilon = cfg.num("epsilon", 0.0);
    spec.V = {real_array(cfg, "V")};
    spec.W = {real_array(cfg, "W")};
    spec.L = cfg.num("L", 2.5);
    spec.N = cfg.integer("N", 800);
    spec.window_max = cfg.num("window_max", 0.5);
    int delta = cfg.integer("delta", std::max(10, spec.N / 10));
    double filter_tol = cfg.num("filter_tol", 1e-6);
    cfg.finish();
    if (spec.N + delta > 2000 || delta < 1) throw ConfigError("spectrum: need delta >= 1 and N + delta <= 2000");
    try {
        spec.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }

    OperatorSpec s2 = spec;
    s2.N += delta;
    std::vector<Spectrum> runs(2);
    parallel_for(2, [&](std::size_t k) { runs[k] = solve_operator(k == 0 ? spec : s2); });
    Spectrum filt = spurious_filter(runs[0], runs[1], filter_tol);
    std::set<std::pair<double, double>> kept;
    for (auto z : filt.eigenvalues) kept.insert({z.real(), z.imag()});
    auto rep = branch_structure_report(filt, spec);

    Calibration cal;
    cal.add("h", spec.h);
    cal.add("epsilon", spec.epsilon);
    cal.add("L", spec.L);
    cal.add("N", spec.N);
    cal.add("N2", s2.N);
    cal.add("filter_tol", filter_tol);
    cal.add("backward_tol", EigenOptions{}.backward_tol);

    Csv csv({"re", "im", "resolved"});
    std::vector<std::pair<double, double>> res_pts, raw_pts;
    for (auto z : runs[0].eigenvalues) {
        bool r = kept.count({z.real(), z.imag()}) > 0;
        csv.row({fmt(z.real()), fmt(z.imag()), r ? "1" : "0"});
        if (std::abs(z.real()) > 2 * spec.window_max) continue;
        (r ? res_pts : raw_pts).push_back({z.real(), z.imag()});
    }
    run.out.add("spectrum.csv", csv.render(cal));

    auto x = cgl_nodes(spec.N, spec.L);
    double wmin = INFINITY, wmax = -INFINITY;
    for (double xi : x) wmin = std::min(wmin, spec.W(xi)), wmax = std::max(wmax, spec.W(xi));
    std::size_t outside = 0;
    for (auto z : filt.eigenvalues)
        if (z.imag() < spec.epsilon * wmin - 1e-6 || z.imag() > spec.epsilon * wmax + 1e-6) ++outside;

    json j = header("spectrum", cal);
    j["eigenvalues"] = runs[0].eigenvalues.size();
    j["resolved"] = filt.retained();
    j["dropped"] = filt.dropped;
    j["numerical_range"] = {{"im_lo", spec.epsilon * wmin}, {"im_hi", spec.epsilon * wmax}, {"outside", outside}};
    j["below_barrier"] = rep.below.size();
    j["above_barrier"] = rep.above.size();
    json pairs = json::array();
    for (const auto& p : rep.pairs) pairs.push_back({{"a", cjson(p.a)}, {"b", cjson(p.b)}, {"gap", p.gap}});
    j["pairs"] = pairs;
    j["unpaired"] = rep.unpaired.size();
    j["im_positive"] = rep.im_positive;
    j["im_negative"] = rep.im_negative;
    auto clusters = [](const std::vector<ImCluster>& v) {
        json a = json::array();
        for (const auto& c : v) a.push_back({{"lo", c.lo}, {"hi", c.hi}, {"count", c.count}});
        return a;
    };
    j["below_clusters"] = clusters(rep.below_clusters);
    j["above_clusters"] = clusters(rep.above_clusters);
    run.out.add("spectrum_report.json", dump(j));

    if (run.svg) {
        std::vector<SvgSeries> ser{{"unresolved", "#bbbbbb", raw_pts, 1.2}, {"resolved", "#c0392b", res_pts, 2.0}};
        run.out.add("spectrum.svg", svg_scatter("spectrum", "Re", "Im", ser, cal));
    }
    if (run.check) {
        run.require(filt.retained() > 0, "no eigenvalue survived the resolution filter");
        run.require(outside == 0, std::to_string(outside) + " resolved eigenvalues outside the numerical range");
        if (spec.epsilon == 0) {
            std::size_t bad = 0;
            for (auto z : filt.eigenvalues) bad += std::abs(z.imag()) > 1e-6;
            run.require(bad == 0, std::to_string(bad) + " resolved eigenvalues with |Im| > 1e-6 at epsilon = 0");
        }
    }
}

// --- skeleton, count, bs, model ---------------------------------------------

json default_model() {
    return json::parse(R"({"schema_version": 1, "h": 0.005, "epsilon": 0.03,
        "S12": [[0.3, 0.021], [0.2, 0.012]], "S34": [[-0.2, 0.009], [0.1, -0.015]],
        "C_body": 10, "rect": {"lo": [-0.2, -0.05], "hi": [0.2, 0.05]}, "strip": [0.025, 0.3]})");
}

void skeleton_rows(const SkeletonPair& sp, Csv& csv, std::vector<SvgSeries>& ser) {
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
    int ci = 0;
    for (const Skeleton* sk : {&sp.case1, &sp.case2}) {
        for (const auto& pc : sk->s_prime) {
            std::string label = sk->conjugated ? case2_label(pc.curve.pair) : to_string(pc.curve.pair);
            SvgSeries se{label, colors[ci++ % 8], {}, 1.0};
            for (const auto& s : pc.curve.samples) {
                if (s.x < pc.x_lo || s.x > pc.x_hi) continue;
                double y = sk->conjugated ? -s.y : s.y;
                csv.row({label, fmt(s.x), fmt(y), to_string(s.regime)});
                se.pts.push_back({s.x, y});
            }
            ser.push_back(std::move(se));
        }
        if (sk->gamma_vertical) {
            auto [a, b] = *sk->gamma_vertical;
            double s = sk->conjugated ? -1 : 1;
            Regime r = sk->conjugated ? Regime::Case2Small : Regime::Case1Small;
            csv.row({"vertical", "0", fmt(s * a), to_string(r)});
            csv.row({"vertical", "0", fmt(s * b), to_string(r)});
            ser.push_back({"", "#000000", {{0, s * a}, {0, s * b}}, 1.0});
        }
    }
}

Calibration model_calibration(const SemiclassicalParams& p, double C_body) {
    Calibration cal;
    cal.add("h", p.h);
    cal.add("epsilon", p.epsilon);
    cal.add("C_body", C_body);
    cal.add("C_small", C_small);
    cal.add("C_sector", C_sector);
    cal.add("curve_F_bound", curve_F_bound);
    return cal;
}

void cmd_skeleton(Section& cfg, Run& run) {
    auto p = read_params(cfg);
    auto am = read_model(cfg, p);
    double C = cfg.num("C_body", 10.0);
    SkeletonOptions opt;
    if (cfg.has("x_range")) {
        auto xr = real_array(cfg, "x_range");
        if (xr.size() != 2 || !(xr[0] < xr[1]) || std::abs(xr[0]) > 0.3 || std::abs(xr[1]) > 0.3)
            throw ConfigError("skeleton: x_range must be [lo, hi] inside [-0.3, 0.3]");
        opt.x_range = {xr[0], xr[1]};
    }
    for (auto k : {"rect", "strip"})
        if (cfg.has(k)) cfg.raw(k);  // shared model configs carry these
    cfg.finish();
    auto sp = assemble(p, am, C, opt);
    auto cal = model_calibration(p, C);
    Csv csv({"curve_label", "x", "y", "regime"});
    std::vector<SvgSeries> ser;
    skeleton_rows(sp, csv, ser);
    run.out.add("skeleton.csv", csv.render(cal));
    if (run.svg) run.out.add("skeleton.svg", svg_scatter("skeleton", "Re mu", "Im mu", ser, cal));
    if (run.check) run.require(csv.size() > 0, "empty skeleton");
}

void cmd_count(Section& cfg, Run& run) {
    auto p = read_params(cfg);
    auto am = read_model(cfg, p);
    Rect r = read_rect(cfg, "rect");
    std::optional<std::vector<cplx>> path;
    double C_I = 1.0, C = cfg.num("C_body", 10.0);
    bool a4sum = false;
    if (cfg.has("curve")) {
        Section c = cfg.sub("curve");
        const json& pts = c.raw("path");
        if (!pts.is_array() || pts.size() < 2) throw ConfigError("count.curve.path: need at least two points");
        path.emplace();
        for (std::size_t i = 0; i < pts.size(); ++i) path->push_back(parse_cplx(pts[i], "count.curve.path"));
        C_I = c.num("C_I", 1.0);
        a4sum = c.flag("use_a4_sum", false);
        c.finish();
    }
    if (cfg.has("strip")) cfg.raw("strip");
    cfg.finish();

    auto f = G_function(p, am);
    Rect used;
    double ms = G_max_step(p, am);
    int n = rect_count(f, r, p.h, ms, &used);
    auto cal = model_calibration(p, C);
    cal.add("max_step", ms);
    json j = header("count", cal);
    j["count"] = n;
    j["contour"] = {{"lo", cjson(used.lo)}, {"hi", cjson(used.hi)}, {"requested_lo", cjson(r.lo)},
                    {"requested_hi", cjson(r.hi)}, {"method", "winding"}};
    std::cout << n << "\n";
    if (path) {
        auto sp = assemble(p, am, C);
        auto ac = make_admissible(*path, p, am, C_I, a4sum, &sp.body1);
        auto ps = phase_sum_count(ac, p, am, C);
        j["curve"] = {{"estimate", ps.estimate}, {"direct", ps.direct}, {"discrepancy", ps.discrepancy},
                      {"crossings", ac.I.size()}};
        std::cout << "phase sum " << fmt(ps.estimate) << " direct " << fmt(ps.direct) << " discrepancy "
                  << fmt(ps.discrepancy) << "\n";
        if (run.check) {
            bool be = std::find(ac.I_touches_Be.begin(), ac.I_touches_Be.end(), true) != ac.I_touches_Be.end();
            double bound = be ? 5 * std::log(std::log(1 / p.h)) : 5.0;
            run.require(ps.discrepancy <= bound, "phase-sum discrepancy " + fmt(ps.discrepancy) + " > " + fmt(bound));
        }
    }
    if (run.check) {
        auto g = grid_newton_zeros(f, used, p.h / 5, p.h * 1e-3);
        run.require(int(g.zeros.size()) == n, "winding count " + std::to_string(n) + " differs from grid count " +
                                                  std::to_string(g.zeros.size()));
        j["grid_count"] = g.zeros.size();
    }
    run.out.add("count.json", dump(j));
}

const char* to_string(BSBranch b) {
    switch (b) {
        case BSBranch::Ext: return "Ext";
        case BSBranch::LeftInt: return "LeftInt";
        case BSBranch::RightInt: return "RightInt";
    }
    return "?";
}

void cmd_bs(Section& cfg, Run& run) {
    auto p = read_params(cfg);
    auto am = read_model(cfg, p);
    std::vector<BSBranch> branches{BSBranch::Ext, BSBranch::LeftInt, BSBranch::RightInt};
    if (cfg.has("branches")) {
        branches.clear();
        const json& b = cfg.raw("branches");
        if (!b.is_array()) throw ConfigError("bs.branches: expected an array");
        for (const auto& e : b) {
            std::string s = e.is_string() ? e.get<std::string>() : "";
            if (s == "Ext") branches.push_back(BSBranch::Ext);
            else if (s == "LeftInt") branches.push_back(BSBranch::LeftInt);
            else if (s == "RightInt") branches.push_back(BSBranch::RightInt);
            else throw ConfigError("bs.branches: unknown branch '" + s + "'");
        }
    }
    int k0 = -50, k1 = 50;
    if (cfg.has("k_range")) {
        const json& k = cfg.raw("k_range");
        if (!k.is_array() || k.size() != 2 || !k[0].is_number_integer() || !k[1].is_number_integer() || k[0] > k[1])
            throw ConfigError("bs.k_range: expected [k_lo, k_hi] integers");
        k0 = k[0].get<int>(), k1 = k[1].get<int>();
    }
    for (auto k : {"rect", "strip", "C_body"})
        if (cfg.has(k)) cfg.raw(k);
    cfg.finish();

    struct Row {
        BSBranch b;
        int k;
        std::optional<BSResult> r;
    };
    std::vector<Row> rows;
    for (auto b : branches)
        for (int k = k0; k <= k1; ++k) rows.push_back({b, k, std::nullopt});
    parallel_for(rows.size(), [&](std::size_t i) {
        try {
            rows[i].r = bohr_sommerfeld_solve(rows[i].b, rows[i].k, p, am);
        } catch (const SectorEscape&) {
        }
    });
    auto cal = model_calibration(p, 10.0);
    cal.add("bs_sector_C", bs_sector_C);
    cal.add("bs_min_re_over_h", bs_min_re_over_h);
    Csv csv({"branch", "k", "re", "im", "residual", "converged"});
    std::size_t bad = 0;
    for (const auto& r : rows) {
        if (!r.r) continue;
        csv.row({to_string(r.b), std::to_string(r.k), fmt(r.r->mu.real()), fmt(r.r->mu.imag()), fmt(r.r->residual),
                 r.r->converged ? "1" : "0"});
        bad += !r.r->converged;
    }
    run.out.add("bs.csv", csv.render(cal));
    if (run.check) {
        run.require(csv.size() > 0, "no Bohr-Sommerfeld root inside the sectors");
        run.require(bad == 0, std::to_string(bad) + " roots did not converge");
    }
}

void cmd_model(Section& cfg, Run& run) {
    auto p = read_params(cfg);
    auto am = read_model(cfg, p);
    double C = cfg.num("C_body", 10.0);
    Rect r = read_rect(cfg, "rect");
    auto strip = cfg.has("strip") ? real_array(cfg, "strip") : std::vector<double>{5 * p.h, 0.3};
    if (strip.size() != 2 || !(strip[0] < strip[1]) || strip[0] < 2 * p.h)
        throw ConfigError("model.strip: expected [lo, hi] with 2h <= lo < hi");
    cfg.finish();

    auto sp = assemble(p, am, C);
    LocateOptions opt;
    opt.max_step = G_max_step(p, am);
    auto zs = locate_zeros(G_function(p, am), r, p, opt);
    auto bij = check_bijection(p, am, strip[0], strip[1], C);

    auto cal = model_calibration(p, C);
    cal.add("residual_tol", opt.residual_tol);
    Csv zc({"re", "im", "residual", "method"});
    std::vector<std::pair<double, double>> zp;
    std::size_t outside_body = 0, in_box = 0;
    auto box = sp.body1.exceptional;
    for (const auto& z : zs.zeros) {
        zc.row({fmt(z.location.real()), fmt(z.location.imag()), fmt(z.residual), to_string(zs.method)});
        zp.push_back({z.location.real(), z.location.imag()});
        outside_body += !sp.contains(z.location);
        in_box += box.contains(z.location);
    }
    run.out.add("zeros.csv", zc.render(cal));
    Csv sc({"curve_label", "x", "y", "regime"});
    std::vector<SvgSeries> ser;
    skeleton_rows(sp, sc, ser);
    run.out.add("skeleton.csv", sc.render(cal));
    if (run.svg) {
        ser.push_back({"zeros", "#000000", zp, 2.0});
        run.out.add("model.svg", svg_scatter("zeros and skeleton", "Re mu", "Im mu", ser, cal));
    }

    double census_bound = C * box_census_scale(p);
    json j = header("model", cal);
    j["zeros"] = zs.zeros.size();
    j["zeros_outside_body"] = outside_body;
    j["exceptional_box"] = {{"half_width", box.a}, {"half_height", box.b}, {"zeros", in_box}, {"bound", census_bound}};
    json matched = json::array();
    for (const auto& m : bij.report.pairs)
        matched.push_back({{"zero", cjson(m.zero)}, {"predicted", cjson(m.predicted)}, {"distance", m.distance},
                           {"bound", m.bound}});
    json unmatched = json::array();
    for (auto z : bij.report.unmatched_zeros) unmatched.push_back({{"kind", "zero"}, {"at", cjson(z)}});
    for (auto z : bij.report.unmatched_predicted) unmatched.push_back({{"kind", "predicted"}, {"at", cjson(z)}});
    j["bijection"] = {{"strip", strip},          {"zeros_inner", bij.zeros_inner},
                      {"predicted_inner", bij.predicted_inner}, {"unmatched_inner", bij.unmatched_inner},
                      {"max_log_excess", bij.max_log_excess},   {"pass", bij.pass()},
                      {"matched", matched},                     {"unmatched", unmatched}};
    run.out.add("model_report.json", dump(j));
    if (run.check) {
        run.require(outside_body == 0, std::to_string(outside_body) + " zeros outside the body");
        run.require(bij.pass(), "bijection check failed in the strip");
        if (p.epsilon > 0)
            run.require(in_box <= census_bound, "box census " + std::to_string(in_box) + " > " + fmt(census_bound));
    }
}

// --- average ----------------------------------------------------------------

BalancedLaurent read_xpoly(Section& s, const std::string& k) {
    const json& v = s.raw(k);
    if (!v.is_array() || v.empty()) throw ConfigError(s.where(k) + ": expected a nonempty term list");
    XPoly p;
    for (std::size_t i = 0; i < v.size(); ++i) {
        Section t(v[i], s.where(k) + "[" + std::to_string(i) + "]");
        const json& e = t.raw("exp");
        if (!e.is_array() || e.size() != 4) throw ConfigError(t.where("exp") + ": expected [x1, x2, xi1, xi2]");
        std::array<int, 4> ex{};
        for (int m = 0; m < 4; ++m) {
            if (!e[m].is_number_integer() || e[m].get<int>() < 0 || e[m].get<int>() > 8)
                throw ConfigError(t.where("exp") + ": exponents must be integers in [0, 8]");
            ex[m] = e[m].get<int>();
        }
        if (ex[0] + ex[1] + ex[2] + ex[3] > 8) throw ConfigError(t.where("exp") + ": total degree above 8");
        p[ex] += parse_rational(t.raw("coef"), t.where("coef"));
        t.finish();
    }
    return to_z(p);
}

json laurent_json(const BalancedLaurent& f) {
    json a = json::array();
    for (const auto& [k, c] : f.terms)
        a.push_back({{"z", {k[0], k[1]}}, {"zbar", {k[2], k[3]}}, {"re", c.re.get_str()}, {"im", c.im.get_str()}});
    return a;
}

// Closed forms for C of the barrier-top quartics, as commonly quoted.
struct Golden {
    std::string name;
    BalancedLaurent computed, expected;
};

std::vector<Golden> golden_forms() {
    using BL = BalancedLaurent;
    auto m = [](int a1, int a2, int b1, int b2) { return BL::monomial({a1, a2, b1, b2}); };
    auto n = [](long v) { return BL::constant(QQi(mpq_class(v))); };
    auto xp = [](std::initializer_list<std::array<int, 4>> es) {
        XPoly p;
        for (auto e : es) p[e] = 1;
        return to_z(p);
    };
    BL A1 = m(1, 0, 1, 0), A2 = m(0, 1, 0, 1), Z = A1 + A2;
    BL R1 = m(1, 0, 0, 1) + m(0, 1, 1, 0), R2 = m(2, 0, 0, 2) + m(0, 2, 2, 0), R3 = m(3, 0, 0, 3) + m(0, 3, 3, 0);
    BL X4 = xp({{4, 0, 0, 0}, {0, 4, 0, 0}}), X22 = xp({{2, 2, 0, 0}}), X31 = xp({{3, 1, 0, 0}, {1, 3, 0, 0}});
    std::vector<Golden> g;
    g.push_back({"avg x1^4", flow_average(xp({{4, 0, 0, 0}})), q(3, 8) * (A1 * A1)});
    g.push_back({"avg x2^4", flow_average(xp({{0, 4, 0, 0}})), q(3, 8) * (A2 * A2)});
    g.push_back({"avg x1^3 x2", flow_average(xp({{3, 1, 0, 0}})), q(3, 16) * (A1 * R1)});
    g.push_back({"avg x1 x2^3", flow_average(xp({{1, 3, 0, 0}})), q(3, 16) * (A2 * R1)});
    g.push_back({"avg x1^2 x2^2", flow_average(X22), q(1, 16) * R2 + q(1, 4) * (A1 * A2)});
    g.push_back({"C(x4,x4)", correlation_C(X4, X4), q(-17, 16) * (A1 * A1 * A1 + A2 * A2 * A2)});
    g.push_back({"C(x4,x22)", correlation_C(X4, X22), q(-3, 64) * (n(3) * (Z * R2) + n(16) * (A1 * A2))});
    g.push_back({"C(x4,x31)", correlation_C(X4, X31),
                 q(1, 128) * (n(2) * R3 - (n(51) * (A1 * A1 + A2 * A2) + n(36) * (A1 * A2)) * R1)});
    g.push_back({"C(x22,x22)", correlation_C(X22, X22), q(-1, 64) * (Z * (n(9) * (A1 * A2) + n(8) * R2))});
    g.push_back({"C(x22,x31)", correlation_C(X22, X31),
                 q(-1, 256) * ((n(17) * (A1 * A1 + A2 * A2) + n(90) * (A1 * A2)) * R1 + n(12) * R3)});
    g.push_back({"C(x31,x31)", correlation_C(X31, X31),
                 q(-1, 256) * (n(17) * (A1 * A1 * A1 + A2 * A2 * A2) + n(153) * (A1 * A2 * Z) + n(51) * (Z * R2))});
    return g;
}

json default_average() {
    return json::parse(R"({"schema_version": 1, "operation": "C",
        "q1": [{"exp": [4, 0, 0, 0], "coef": 1}, {"exp": [0, 4, 0, 0], "coef": 1}],
        "q2": [{"exp": [2, 2, 0, 0], "coef": 1}]})");
}

void cmd_average(Section& cfg, Run& run) {
    std::string op = cfg.str("operation", "average");
    static const std::set<std::string> ops{"average", "G0", "C", "action_angle"};
    if (!ops.count(op)) throw ConfigError("average.operation: one of average, G0, C, action_angle");
    auto q1 = read_xpoly(cfg, "q1");
    std::optional<BalancedLaurent> q2;
    if (op == "C") q2 = read_xpoly(cfg, "q2");
    cfg.finish();

    Calibration cal;
    cal.add("resonance", "1:1");
    cal.add("period", "2pi");
    json j = header("average", cal);
    j["operation"] = op;
    j["input"] = laurent_json(q1);
    if (op == "average") {
        j["result"] = laurent_json(flow_average(q1));
    } else if (op == "G0") {
        j["result"] = laurent_json(weighted_average_G0(q1));
    } else if (op == "C") {
        j["q2"] = laurent_json(*q2);
        j["result"] = laurent_json(correlation_C(q1, *q2));
        j["symmetric"] = correlation_C(q1, *q2) == correlation_C(*q2, q1);
    } else {
        json a = json::array();
        try {
            for (const auto& [k, v] : to_action_angle(flow_average(q1)))
                a.push_back({{"rho1_power", mpq_class(k[0], 2).get_str()},
                             {"rho2_power", mpq_class(k[1], 2).get_str()},
                             {"k", k[2]},
                             {"cos", v.cos_coef.re.get_str()},
                             {"sin", v.sin_coef.re.get_str()}});
        } catch (const NotInvariant& e) {
            throw ConfigError(e.what());
        }
        j["result"] = a;
    }
    if (run.check) {
        json diffs = json::array();
        for (const auto& g : golden_forms()) {
            if (g.computed == g.expected) continue;
            auto d = g.computed - g.expected;
            diffs.push_back({{"form", g.name}, {"computed", g.computed.str()}, {"expected", g.expected.str()},
                             {"difference", d.str()}});
            run.require(false, "golden form " + g.name + " differs: computed - expected = " + d.str());
        }
        j["golden_diffs"] = diffs;
    }
    run.out.add("average.json", dump(j));
}

// --- classify ---------------------------------------------------------------

json default_classify() {
    return json::parse(R"({"schema_version": 1, "a": -1, "b": 1, "c": "1/2",
                           "scan": {"d": 2.5, "n": 200, "b": [-4, 4], "c": [-4, 4]}})");
}

json report_json(const CriticalPointReport& r) {
    json pts = json::array();
    for (const auto& p : r.points)
        pts.push_back({{"location", to_string(p.location)},
                       {"rho", p.rho},
                       {"theta", p.theta},
                       {"signature", {p.sig1, p.sig2}},
                       {"value", p.value.get_str()},
                       {"saddle", p.saddle()}});
    return {{"region", to_string(r.region)}, {"negated", r.negated}, {"saddles", r.saddles()}, {"points", pts}};
}

void cmd_classify(Section& cfg, Run& run) {
    std::optional<ReducedFunction> rf;
    if (cfg.has("a") || cfg.has("b") || cfg.has("c"))
        rf = ReducedFunction{parse_rational(cfg.raw("a"), "classify.a"), parse_rational(cfg.raw("b"), "classify.b"),
                             parse_rational(cfg.raw("c"), "classify.c")};
    struct Scan {
        double d, b0, b1, c0, c1;
        int n;
    };
    std::optional<Scan> scan;
    if (cfg.has("scan")) {
        Section s = cfg.sub("scan");
        Scan sc;
        sc.d = s.num("d", 2.5);
        sc.n = s.integer("n", 200);
        auto b = s.has("b") ? real_array(s, "b") : std::vector<double>{-4, 4};
        auto c = s.has("c") ? real_array(s, "c") : std::vector<double>{-4, 4};
        s.finish();
        if (b.size() != 2 || c.size() != 2 || !(b[0] < b[1]) || !(c[0] < c[1]))
            throw ConfigError("classify.scan: b and c must be [lo, hi]");
        if (sc.n < 2 || sc.n > 2000) throw ConfigError("classify.scan.n: must be in [2, 2000]");
        if (sc.d == 0) throw ConfigError("classify.scan.d: must be nonzero");
        sc.b0 = b[0], sc.b1 = b[1], sc.c0 = c[0], sc.c1 = c[1];
        scan = sc;
    }
    cfg.finish();
    if (!rf && !scan) throw ConfigError("classify: give a, b, c or a scan block");

    Calibration cal;
    cal.add("boundary_tol", 1e-9);
    cal.add("grid", 400);
    json j = header("classify", cal);
    if (rf) {
        CriticalPointReport r;
        try {
            r = classify_critical_points(*rf);
        } catch (const DegenerateInput& e) {
            throw ConfigError(e.what());
        }
        j["input"] = {{"a", rf->a.get_str()}, {"b", rf->b.get_str()}, {"c", rf->c.get_str()}, {"d", rf->d().get_str()}};
        j["report"] = report_json(r);
        if (run.check) {
            try {
                auto v = grid_verify(*rf, r);
                j["grid_verify"] = {{"found", v.found.size()}, {"matched", v.matched}};
            } catch (const Mismatch& m) {
                for (const auto& d : m.discrepancies) run.require(false, d);
            }
        }
    }
    if (scan) {
        Csv csv({"b", "c", "region"});
        std::map<std::string, std::vector<std::pair<double, double>>> by;
        std::map<std::string, std::size_t> counts;
        for (int i = 0; i < scan->n; ++i)
            for (int k = 0; k < scan->n; ++k) {
                double b = scan->b0 + (scan->b1 - scan->b0) * (i + 0.5) / scan->n;
                double c = scan->c0 + (scan->c1 - scan->c0) * (k + 0.5) / scan->n;
                std::string reg = to_string(region_of(b, c, scan->d));
                csv.row({fmt(b), fmt(c), reg});
                by[reg].push_back({b, c});
                ++counts[reg];
            }
        cal.add("scan_d", scan->d);
        run.out.add("regions.csv", csv.render(cal));
        j["scan"] = {{"d", scan->d}, {"n", scan->n}, {"counts", counts}};
        if (run.svg) {
            static const std::map<std::string, std::string> col{
                {"A", "#1f77b4"},  {"B+", "#ff7f0e"}, {"B-", "#ffbb78"}, {"C+", "#2ca02c"},
                {"C-", "#98df8a"}, {"D", "#d62728"},  {"E+", "#9467bd"}, {"E-", "#c5b0d5"},
                {"F", "#8c564b"},  {"Boundary", "#000000"}};
            std::vector<SvgSeries> ser;
            for (const auto& [name, pts] : by) ser.push_back({name, col.at(name), pts, 1.0});
            run.out.add("regions.svg", svg_scatter("regions at d = " + fmt(scan->d), "b", "c", ser, cal));
        }
        if (run.check && scan->d > 0) {
            for (auto name : {"A", "B+", "B-", "C+", "C-", "D", "E+", "E-", "F"})
                if (scan->b0 <= -scan->d - 1 && scan->b1 >= 1 && scan->c0 <= -scan->d - 1 && scan->c1 >= scan->d + 1)
                    run.require(counts[name] > 0, std::string("region ") + name + " missing from the scan");
        }
    }
    run.out.add("classify.json", dump(j));
}

json default_config(const std::string& cmd) {
    if (cmd == "spectrum") return default_spectrum();
    if (cmd == "average") return default_average();
    if (cmd == "classify") return default_classify();
    return default_model();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"branchspec: spectra and zero sets near a branching level"};
    std::string command, config_file, out_dir = ".";
    bool check = false, svg = false;
    app.add_option("command", command, "spectrum|model|skeleton|count|bs|average|classify")
        ->required()
        ->check(CLI::IsMember({"spectrum", "model", "skeleton", "count", "bs", "average", "classify"}));
    app.add_option("--config", config_file, "JSON configuration");
    app.add_flag("--check", check, "run the acceptance assertions of the pipeline");
    app.add_option("--out", out_dir, "output directory");
    app.add_flag("--svg", svg, "also write an SVG scatter plot");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    Run run;
    run.check = check;
    run.svg = svg;
    try {
        json cfg;
        if (config_file.empty()) {
            cfg = default_config(command);
        } else {
            std::ifstream f(config_file);
            if (!f) throw ConfigError("cannot open " + config_file);
            try {
                cfg = json::parse(f);
            } catch (const json::parse_error& e) {
                throw ConfigError(std::string("malformed JSON: ") + e.what());
            }
        }
        Section s(cfg, command);
        if (!s.has("schema_version")) throw ConfigError("schema_version missing");
        if (s.integer("schema_version") != schema_version)
            throw ConfigError("unsupported schema_version (expected " + std::to_string(schema_version) + ")");
        if (s.has("command") && s.str("command") != command)
            throw ConfigError("config is for command '" + cfg["command"].get<std::string>() + "'");

        if (command == "spectrum") cmd_spectrum(s, run);
        else if (command == "skeleton") cmd_skeleton(s, run);
        else if (command == "count") cmd_count(s, run);
        else if (command == "bs") cmd_bs(s, run);
        else if (command == "model") cmd_model(s, run);
        else if (command == "average") cmd_average(s, run);
        else cmd_classify(s, run);

        run.out.write(out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DegenerateInput& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    if (!run.check_failures.empty()) {
        for (const auto& f : run.check_failures) std::cerr << "check failed: " << f << "\n";
        return 4;
    }
    if (run.check) std::cerr << "check passed\n";
    return 0;
}
