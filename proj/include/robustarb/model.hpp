#pragma once

// Markovian coefficient fields y -> (s(y), theta(y)), the parametric Knightian
// uncertainty set K(y), and the two volatility-stabilized model families.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "robustarb/errors.hpp"
#include "robustarb/expression.hpp"

namespace robustarb {

using Point = std::vector<double>;

inline double norm1(std::span<const double> y) {
    double s = 0.0;
    for (double v : y) s += v;
    return s;
}

inline void require_positive(std::span<const double> y, const char* what = "state") {
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(y[i] > 0.0) || !std::isfinite(y[i])) {
            std::ostringstream os;
            os << what << " component " << i + 1 << " = " << y[i] << " is outside the open positive orthant";
            throw DomainError(os.str());
        }
    }
}

// Coefficients evaluated at one state. Matrices are row-major n x n.
struct Coefficients {
    std::size_t n = 0;
    std::vector<double> vol;   // s(y)
    std::vector<double> risk;  // theta(y)

    // a = s s'
    std::vector<double> covariance() const {
        std::vector<double> a(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < n; ++k) acc += vol[i * n + k] * vol[j * n + k];
                a[i * n + j] = acc;
            }
        return a;
    }

    // b = s theta
    std::vector<double> rate_of_return() const {
        std::vector<double> b(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < n; ++k) b[i] += vol[i * n + k] * risk[k];
        return b;
    }
};

class CoefficientField {
public:
    // Writes s(y) (row-major) and theta(y). Must be a pure function of y.
    using Evaluator =
        std::function<void(std::span<const double> y, std::span<double> vol, std::span<double> risk)>;

    struct Traits {
        bool diagonal = false;         // s(y) diagonal for every y
        bool scale_invariant = false;  // s(cy) = s(y), theta(cy) = theta(y) for c > 0
    };

    CoefficientField() = default;

    CoefficientField(std::size_t n, Evaluator eval, Traits traits, std::string description)
        : n_(n), eval_(std::make_shared<Evaluator>(std::move(eval))), traits_(traits),
          description_(std::move(description)) {
        if (n_ == 0) throw ConfigError("coefficient field: dimension must be >= 1");
    }

    std::size_t dimension() const { return n_; }
    bool diagonal() const { return traits_.diagonal; }
    bool scale_invariant() const { return traits_.scale_invariant; }
    const std::string& description() const { return description_; }

    // Hot path used by the simulator; no domain checks.
    void evaluate(std::span<const double> y, std::span<double> vol, std::span<double> risk) const {
        (*eval_)(y, vol, risk);
    }

    Coefficients at(std::span<const double> y) const {
        if (y.size() != n_) throw UsageError("coefficient field: state has wrong dimension");
        require_positive(y);
        Coefficients c;
        c.n = n_;
        c.vol.assign(n_ * n_, 0.0);
        c.risk.assign(n_, 0.0);
        evaluate(y, c.vol, c.risk);
        return c;
    }

    std::vector<double> covariance(std::span<const double> y) const { return at(y).covariance(); }
    std::vector<double> rate_of_return(std::span<const double> y) const { return at(y).rate_of_return(); }

private:
    std::size_t n_ = 0;
    std::shared_ptr<const Evaluator> eval_;
    Traits traits_{};
    std::string description_;
};

// ---------------------------------------------------------------------------
// Model families
// ---------------------------------------------------------------------------

// Bounded positive leverage function G of the generalized model.
struct Leverage {
    std::function<double(std::span<const double>)> fn;
    double upper_bound = 1.0;
    bool degree0_homogeneous = true;
    std::string source = "1";

    static Leverage constant(double g) {
        if (!(g > 0.0) || !std::isfinite(g))
            throw ConfigError("leverage: constant G must be positive and finite (got " + std::to_string(g) + ")");
        Leverage l;
        l.fn = [g](std::span<const double>) { return g; };
        l.upper_bound = g;
        l.degree0_homogeneous = true;
        std::ostringstream os;
        os << g;
        l.source = os.str();
        return l;
    }

    static Leverage from_expression(const std::string& text, double upper_bound, bool degree0_homogeneous) {
        auto expr = std::make_shared<Expression>(Expression::parse(text));
        Leverage l;
        l.fn = [expr](std::span<const double> y) { return (*expr)(y); };
        l.upper_bound = upper_bound;
        l.degree0_homogeneous = degree0_homogeneous;
        l.source = text;
        return l;
    }

    double operator()(std::span<const double> y) const { return fn(y); }
};

namespace detail {

// Spot points used to reject degenerate leverage functions at construction.
inline std::vector<Point> leverage_probe_points(std::size_t n) {
    std::vector<Point> pts;
    pts.emplace_back(n, 1.0);
    for (double scale : {0.1, 10.0}) {
        Point p(n, 1.0);
        p[0] = scale;
        pts.push_back(p);
    }
    Point ramp(n);
    for (std::size_t i = 0; i < n; ++i) ramp[i] = static_cast<double>(i + 1);
    pts.push_back(ramp);
    return pts;
}

}  // namespace detail

// Volatility-stabilized model:
//   s_ii(y) = g2 (|y|_1 / y_i)^{1/2},  theta_i(y) = g1 g2 (|y|_1 / y_i)^{1/2}.
inline CoefficientField vsm_field(std::size_t n, double gamma1, double gamma2) {
    if (n == 0) throw ConfigError("vsm: n must be >= 1");
    if (!(gamma1 >= 0.5) || !std::isfinite(gamma1))
        throw ConfigError("vsm: gamma1 must be >= 1/2 (got " + std::to_string(gamma1) + ")");
    if (!(gamma2 >= 1.0) || !std::isfinite(gamma2))
        throw ConfigError("vsm: gamma2 must be >= 1 (got " + std::to_string(gamma2) + ")");
    auto eval = [n, gamma1, gamma2](std::span<const double> y, std::span<double> vol, std::span<double> risk) {
        const double total = norm1(y);
        for (std::size_t i = 0; i < n; ++i) {
            const double root = std::sqrt(total / y[i]);
            for (std::size_t k = 0; k < n; ++k) vol[i * n + k] = 0.0;
            vol[i * n + i] = gamma2 * root;
            risk[i] = gamma1 * gamma2 * root;
        }
    };
    std::ostringstream os;
    os << "vsm(n=" << n << ", gamma1=" << gamma1 << ", gamma2=" << gamma2 << ")";
    return CoefficientField(n, std::move(eval), {.diagonal = true, .scale_invariant = true}, os.str());
}

// Generalized volatility-stabilized model with exponent kappa and leverage G:
//   s_ii(y)     = g_{n+1} (|y|_1/y_i)^kappa G(y)
//   theta_i(y)  = (g_i + g_{n+1}^2) / (2 g_{n+1}) (|y|_1/y_i)^kappa G(y)
// `gamma` holds g_1..g_n followed by g_{n+1}.
inline CoefficientField gvsm_field(std::size_t n, double kappa, const Leverage& G, std::vector<double> gamma) {
    if (n == 0) throw ConfigError("gvsm: n must be >= 1");
    if (!(kappa > 0.0) || !std::isfinite(kappa))
        throw ConfigError("gvsm: kappa must be positive (got " + std::to_string(kappa) + ")");
    if (gamma.size() != n + 1) throw ConfigError("gvsm: gamma must have n+1 entries");
    for (std::size_t i = 0; i < n; ++i)
        if (!(gamma[i] >= 0.0) || !std::isfinite(gamma[i]))
            throw ConfigError("gvsm: gamma_" + std::to_string(i + 1) + " must be >= 0");
    if (!(gamma[n] >= 1.0) || !std::isfinite(gamma[n])) throw ConfigError("gvsm: gamma_{n+1} must be >= 1");
    if (!G.fn) throw ConfigError("gvsm: leverage function missing");
    if (!(G.upper_bound > 0.0) || !std::isfinite(G.upper_bound))
        throw ConfigError("gvsm: leverage upper bound must be positive and finite");
    for (const auto& p : detail::leverage_probe_points(n)) {
        const double g = G(p);
        if (!(g > 0.0) || !std::isfinite(g))
            throw ConfigError("gvsm: leverage G must be positive (s(y) not invertible otherwise); G = " +
                              std::to_string(g) + " for \"" + G.source + "\"");
        if (g > G.upper_bound * (1.0 + 1e-12))
            throw ConfigError("gvsm: leverage exceeds its declared upper bound for \"" + G.source + "\"");
    }
    auto lev = G.fn;
    auto eval = [n, kappa, lev, gamma](std::span<const double> y, std::span<double> vol, std::span<double> risk) {
        const double total = norm1(y);
        const double g = lev(y);
        const double top = gamma[n];
        for (std::size_t i = 0; i < n; ++i) {
            const double base = std::pow(total / y[i], kappa) * g;
            for (std::size_t k = 0; k < n; ++k) vol[i * n + k] = 0.0;
            vol[i * n + i] = top * base;
            risk[i] = (gamma[i] + top * top) / (2.0 * top) * base;
        }
    };
    std::ostringstream os;
    os << "gvsm(n=" << n << ", kappa=" << kappa << ", G=" << G.source << ", gamma=[";
    for (std::size_t i = 0; i < gamma.size(); ++i) os << (i ? "," : "") << gamma[i];
    os << "])";
    return CoefficientField(n, std::move(eval), {.diagonal = true, .scale_invariant = G.degree0_homogeneous},
                            os.str());
}

// Constant coefficients (geometric Brownian capitalizations).
inline CoefficientField constant_field(std::size_t n, std::vector<double> vol, std::vector<double> risk) {
    if (vol.size() != n * n || risk.size() != n) throw ConfigError("constant field: shape mismatch");
    bool diag = true;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k)
            if (i != k && vol[i * n + k] != 0.0) diag = false;
    auto eval = [vol, risk](std::span<const double>, std::span<double> s, std::span<double> th) {
        std::copy(vol.begin(), vol.end(), s.begin());
        std::copy(risk.begin(), risk.end(), th.begin());
    };
    std::ostringstream os;
    os << "constant(n=" << n << ")";
    return CoefficientField(n, std::move(eval), {.diagonal = diag, .scale_invariant = true}, os.str());
}

// ---------------------------------------------------------------------------
// Uncertainty set
// ---------------------------------------------------------------------------

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    bool degenerate() const { return lo == hi; }
    bool contains(double v) const { return v >= lo && v <= hi; }
};

struct Parameter {
    std::string name;
    Interval range;
};

// K(y) = { (theta_p(y), r(p) a(y)) : p in a box of parameter intervals },
// with covariance scaling r(p) ranging over [1, c_cov]. Every realized model
// is a Markovian field; A(y) = { r a(y) : r in [1, c_cov] }.
class UncertaintySet {
public:
    using Realizer = std::function<CoefficientField(std::span<const double>)>;
    using Scale = std::function<double(std::span<const double>)>;

    UncertaintySet(std::string family, std::vector<Parameter> params, Realizer realize, Scale cov_scale,
                   CoefficientField base, double c_cov)
        : family_(std::move(family)), params_(std::move(params)), realize_(std::move(realize)),
          cov_scale_(std::move(cov_scale)), base_(std::move(base)), c_cov_(c_cov) {
        if (!(c_cov_ >= 1.0) || !std::isfinite(c_cov_))
            throw ConfigError("uncertainty set: covariance scaling bound c_cov must be finite and >= 1");
        for (const auto& p : params_) {
            if (!std::isfinite(p.range.lo) || !std::isfinite(p.range.hi) || p.range.lo > p.range.hi)
                throw ConfigError("uncertainty set: parameter " + p.name + " needs a finite interval lo <= hi");
        }
    }

    static UncertaintySet singleton(CoefficientField field) {
        auto f = field;
        return UncertaintySet(
            "singleton", {}, [f](std::span<const double>) { return f; }, [](std::span<const double>) { return 1.0; },
            std::move(field), 1.0);
    }

    // gamma1 in [c1, c1_star], gamma2 in [1, c2]; covariance scales as gamma2^2.
    static UncertaintySet vsm(std::size_t n, double c1, double c1_star, double c2) {
        if (!(c1 >= 0.5)) throw ConfigError("vsm: c1 must be >= 1/2");
        if (!(c1_star >= c1)) throw ConfigError("vsm: c1* must be >= c1");
        if (!(c2 >= 1.0)) throw ConfigError("vsm: c2 must be >= 1");
        return UncertaintySet(
            "vsm", {{"gamma1", {c1, c1_star}}, {"gamma2", {1.0, c2}}},
            [n](std::span<const double> p) { return vsm_field(n, p[0], p[1]); },
            [](std::span<const double> p) { return p[1] * p[1]; }, vsm_field(n, c1, 1.0), c2 * c2);
    }

    // gamma_i in [lo_i, hi_i] for i <= n, gamma_{n+1} in [1, hi_{n+1}].
    static UncertaintySet gvsm(std::size_t n, double kappa, Leverage G, std::vector<double> lo,
                               std::vector<double> hi) {
        if (lo.size() != n + 1 || hi.size() != n + 1) throw ConfigError("gvsm: need n+1 interval bounds");
        if (lo[n] != 1.0) throw ConfigError("gvsm: gamma_{n+1} interval must start at 1 (min R(y) = 1)");
        std::vector<Parameter> params;
        for (std::size_t i = 0; i <= n; ++i) {
            if (!(hi[i] >= lo[i])) throw ConfigError("gvsm: interval upper bound below lower bound");
            params.push_back({"gamma" + std::to_string(i + 1), {lo[i], hi[i]}});
        }
        CoefficientField base = gvsm_field(n, kappa, G, lo);
        const double c = hi[n];
        return UncertaintySet(
            "gvsm", std::move(params),
            [n, kappa, G](std::span<const double> p) {
                return gvsm_field(n, kappa, G, std::vector<double>(p.begin(), p.end()));
            },
            [n](std::span<const double> p) { return p[n] * p[n]; }, std::move(base), c * c);
    }

    const std::string& family() const { return family_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    const CoefficientField& base() const { return base_; }
    std::size_t dimension() const { return base_.dimension(); }
    double c_cov() const { return c_cov_; }

    bool contains(std::span<const double> p) const {
        if (p.size() != params_.size()) return false;
        for (std::size_t i = 0; i < p.size(); ++i)
            if (!params_[i].range.contains(p[i])) return false;
        return true;
    }

    // Lower corner of the parameter box.
    Point nominal() const {
        Point p;
        for (const auto& q : params_) p.push_back(q.range.lo);
        return p;
    }

    CoefficientField realize(std::span<const double> p) const {
        if (!contains(p)) throw ConfigError("uncertainty set: parameter vector outside the declared box");
        return realize_(p);
    }

    double covariance_scale(std::span<const double> p) const {
        if (!contains(p)) throw ConfigError("uncertainty set: parameter vector outside the declared box");
        return cov_scale_(p);
    }

private:
    std::string family_;
    std::vector<Parameter> params_;
    Realizer realize_;
    Scale cov_scale_;
    CoefficientField base_;
    double c_cov_ = 1.0;
};

// Finite grid of parameter vectors covering an uncertainty set's box.
struct ParamGrid {
    std::vector<Point> points;

    // Cartesian product of `per_interval` equispaced points on every
    // non-degenerate interval (one point on degenerate ones).
    static ParamGrid box(const UncertaintySet& uset, std::size_t per_interval = 5) {
        if (per_interval == 0) throw UsageError("param grid: need at least one point per interval");
        ParamGrid g;
        g.points.emplace_back();
        for (const auto& p : uset.parameters()) {
            std::vector<double> axis;
            if (p.range.degenerate() || per_interval == 1) {
                axis.push_back(p.range.lo);
                if (!p.range.degenerate() && per_interval == 1) axis.push_back(p.range.hi);
            } else {
                for (std::size_t k = 0; k < per_interval; ++k)
                    axis.push_back(p.range.lo + (p.range.hi - p.range.lo) * static_cast<double>(k) /
                                                    static_cast<double>(per_interval - 1));
            }
            std::vector<Point> next;
            for (const auto& prefix : g.points)
                for (double v : axis) {
                    Point q = prefix;
                    q.push_back(v);
                    next.push_back(std::move(q));
                }
            g.points = std::move(next);
        }
        return g;
    }

    // Appends the points of `other` not already present (keeps order).
    ParamGrid merged(const ParamGrid& other) const {
        ParamGrid g = *this;
        for (const auto& p : other.points) {
            bool seen = false;
            for (const auto& q : g.points) seen = seen || q == p;
            if (!seen) g.points.push_back(p);
        }
        return g;
    }
};

// The two extreme covariance matrices of A(y): since L_{r a} u = r L_a u, every
// supremum over A(y) is attained at one of them.
inline std::pair<std::vector<double>, std::vector<double>> a_set_endpoints(const UncertaintySet& uset,
                                                                          std::span<const double> y) {
    auto lo = uset.base().covariance(y);
    auto hi = lo;
    for (double& v : hi) v *= uset.c_cov();
    return {std::move(lo), std::move(hi)};
}

}  // namespace robustarb
