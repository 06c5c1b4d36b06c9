#pragma once

// Explicit monotone finite-difference scheme for
//   u_t = sup_{a in A(x)} L_a u,  u(0, .) = 1,
//   L_a u = sum_ij x_i x_j a_ij (D2_ij / 2 + D_i / |x|_1) u,
// on a log-uniform box with Dirichlet data on the box boundary. For diagonal a
// and xi = log x the operator reads
//   L_a u = sum_i a_ii (u_{xi_i xi_i} / 2 + (mu_i - 1/2) u_{xi_i}).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "robustarb/csv.hpp"
#include "robustarb/errors.hpp"
#include "robustarb/grid.hpp"
#include "robustarb/model.hpp"
#include "robustarb/parallel.hpp"

namespace robustarb {

// sup over r in [1, c_cov] of r * L_base.
inline double hjb_sup(double l_base, double c_cov) {
    if (!(c_cov >= 1.0) || !std::isfinite(c_cov)) throw ConfigError("hjb_sup: c_cov must be finite and >= 1");
    return l_base < 0.0 ? l_base : c_cov * l_base;
}

namespace detail {

struct AxisWeights {
    double minus = 0.0;
    double plus = 0.0;
};

// Nonnegative neighbour weights for a_ii (u''/2 + (mu - 1/2) u') on spacing h:
// central differences when they are monotone, upwind otherwise.
inline AxisWeights axis_weights(double a_ii, double mu, double h) {
    const double diff = 0.5 * a_ii / (h * h);
    const double drift = a_ii * (mu - 0.5);
    AxisWeights w{diff - drift / (2.0 * h), diff + drift / (2.0 * h)};
    if (w.minus < 0.0 || w.plus < 0.0) {
        w.minus = diff + std::max(-drift, 0.0) / h;
        w.plus = diff + std::max(drift, 0.0) / h;
    }
    return w;
}

inline void require_interior(const SpatialGrid& grid, std::size_t node, const char* who) {
    if (node >= grid.size()) throw UsageError(std::string(who) + ": node index out of range");
    if (grid.is_boundary(node)) throw UsageError(std::string(who) + ": boundary node has no interior stencil");
}

}  // namespace detail

// L_a u at an interior node for a diagonal covariance a (n x n, row-major).
inline double apply_generator(const SpatialGrid& grid, std::span<const double> a, std::span<const double> slice,
                              std::size_t node) {
    detail::require_interior(grid, node, "apply_generator");
    const std::size_t n = grid.dimension();
    if (a.size() != n * n) throw UsageError("apply_generator: covariance has wrong size");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && a[i * n + j] != 0.0) throw ConfigError("apply_generator: covariance must be diagonal");
    const Point x = grid.point(node);
    const double total = norm1(x);
    const double u0 = slice[node];
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto w = detail::axis_weights(a[i * n + i], x[i] / total, grid.spacing(i));
        const std::size_t s = grid.stride(i);
        acc += w.minus * (slice[node - s] - u0) + w.plus * (slice[node + s] - u0);
    }
    return acc;
}

// Dirichlet data u(t, x) at boundary node `node` (coordinates x).
using BoundaryData = std::function<double(double t, std::size_t node, std::span<const double> x)>;

inline BoundaryData constant_boundary(double c) {
    return [c](double, std::size_t, std::span<const double>) { return c; };
}

// Tabulated boundary data on a uniform time mesh, one series per boundary
// node, linear in t.
class BoundaryTable {
public:
    BoundaryTable() = default;
    BoundaryTable(const SpatialGrid& grid, std::vector<double> times)
        : times_(std::move(times)), slot_(grid.size(), npos), nodes_(grid.boundary_nodes()) {
        if (times_.size() < 2) throw UsageError("boundary table: need at least two times");
        for (std::size_t k = 0; k < nodes_.size(); ++k) slot_[nodes_[k]] = k;
        values_.assign(nodes_.size(), std::vector<double>(times_.size(), 1.0));
        errors_.assign(nodes_.size(), std::vector<double>(times_.size(), 0.0));
    }

    const std::vector<std::size_t>& nodes() const { return nodes_; }
    const std::vector<double>& times() const { return times_; }
    std::vector<double>& values(std::size_t k) { return values_[k]; }
    const std::vector<double>& values(std::size_t k) const { return values_[k]; }
    std::vector<double>& errors(std::size_t k) { return errors_[k]; }
    const std::vector<double>& errors(std::size_t k) const { return errors_[k]; }

    // Running minimum in t, clipped to [0, 1]: the true boundary values are
    // non-increasing in t and bounded by 1, Monte-Carlo noise is not.
    void make_monotone() {
        for (auto& series : values_) {
            double running = 1.0;
            for (double& v : series) {
                v = std::clamp(v, 0.0, running);
                running = v;
            }
        }
    }

    double value(double t, std::size_t node) const {
        const std::size_t k = node < slot_.size() ? slot_[node] : npos;
        if (k == npos) throw UsageError("boundary table: node " + std::to_string(node) + " is not tabulated");
        const auto& s = values_[k];
        if (t <= times_.front()) return s.front();
        if (t >= times_.back()) return s.back();
        const auto it = std::upper_bound(times_.begin(), times_.end(), t);
        const std::size_t j = static_cast<std::size_t>(it - times_.begin()) - 1;
        const double w = (t - times_[j]) / (times_[j + 1] - times_[j]);
        // Exact on flat segments and clamped to the segment, so monotone data
        // interpolate monotonically in floating point too.
        const double v = s[j] + w * (s[j + 1] - s[j]);
        return std::clamp(v, std::min(s[j], s[j + 1]), std::max(s[j], s[j + 1]));
    }

    BoundaryData as_boundary() const {
        auto self = std::make_shared<BoundaryTable>(*this);
        return [self](double t, std::size_t node, std::span<const double>) { return self->value(t, node); };
    }

private:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::vector<double> times_;
    std::vector<std::size_t> slot_;
    std::vector<std::size_t> nodes_;
    std::vector<std::vector<double>> values_;
    std::vector<std::vector<double>> errors_;
};

struct HJBProblem {
    HJBProblem(UncertaintySet uset_, SpatialGrid grid_, double horizon_, BoundaryData boundary_)
        : uset(std::move(uset_)), grid(std::move(grid_)), horizon(horizon_), boundary(std::move(boundary_)) {}

    UncertaintySet uset;
    SpatialGrid grid;
    double horizon;
    BoundaryData boundary;
    double cfl_safety = 0.9;
    double dt = 0.0;                  // 0: cfl_safety times the largest stable step
    std::size_t output_slices = 65;  // stored slices including t = 0 and t = T
    std::size_t workers = 1;
    std::string boundary_provenance = "unspecified";
};

class HJBSolver {
public:
    explicit HJBSolver(HJBProblem problem) : p_(std::move(problem)) {
        const SpatialGrid& g = p_.grid;
        const std::size_t n = g.dimension();
        if (n > 2) throw ConfigError("hjb: only n = 1 or 2 is supported");
        if (p_.uset.dimension() != n) throw ConfigError("hjb: grid and model dimensions differ");
        if (!(p_.horizon > 0.0) || !std::isfinite(p_.horizon)) throw ConfigError("hjb: horizon must be positive");
        if (!p_.boundary) throw ConfigError("hjb: boundary data missing");
        if (!(p_.cfl_safety > 0.0 && p_.cfl_safety <= 1.0)) throw ConfigError("hjb: cfl_safety must be in (0, 1]");
        if (p_.output_slices < 2) throw ConfigError("hjb: need at least two output slices");
        if (p_.dt < 0.0 || !std::isfinite(p_.dt)) throw ConfigError("hjb: dt must be >= 0");
        c_ = p_.uset.c_cov();

        weights_.assign(g.size() * n, {});
        for (std::size_t f = 0; f < g.size(); ++f) {
            if (g.is_boundary(f)) continue;
            interior_.push_back(f);
            const Point x = g.point(f);
            const auto a = p_.uset.base().covariance(x);
            const double total = norm1(x);
            double rate = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j)
                    if (i != j && std::fabs(a[i * n + j]) > 1e-14 * std::fabs(a[i * n + i]))
                        throw ConfigError("hjb: covariance must be diagonal (cross terms are not supported)");
                if (!std::isfinite(a[i * n + i]) || a[i * n + i] < 0.0)
                    throw ConfigError("hjb: covariance diagonal must be finite and nonnegative");
                const auto w = detail::axis_weights(a[i * n + i], x[i] / total, g.spacing(i));
                weights_[f * n + i] = w;
                rate += w.minus + w.plus;
            }
            if (c_ * rate > worst_rate_) {
                worst_rate_ = c_ * rate;
                worst_node_ = f;
            }
        }
        if (interior_.empty()) throw ConfigError("hjb: grid has no interior nodes");

        const double stable = worst_rate_ > 0.0 ? 1.0 / worst_rate_ : p_.horizon;
        const double target = p_.dt > 0.0 ? p_.dt : p_.cfl_safety * stable;
        steps_ = static_cast<std::size_t>(std::ceil(p_.horizon / target - 1e-9));
        steps_ = std::max<std::size_t>(steps_, 1);
        const std::size_t intervals = p_.output_slices - 1;
        if (steps_ >= intervals) steps_ = (steps_ + intervals - 1) / intervals * intervals;
        dt_ = p_.dt > 0.0 && std::fabs(p_.horizon / p_.dt - static_cast<double>(steps_)) < 1e-9
                  ? p_.dt
                  : p_.horizon / static_cast<double>(steps_);
        every_ = steps_ >= intervals ? steps_ / intervals : 1;
    }

    const HJBProblem& problem() const { return p_; }
    double dt() const { return dt_; }
    std::size_t steps() const { return steps_; }
    // Largest dt for which every stencil stays monotone at both scaling endpoints.
    double stable_dt() const { return worst_rate_ > 0.0 ? 1.0 / worst_rate_ : std::numeric_limits<double>::infinity(); }
    const std::vector<std::size_t>& interior() const { return interior_; }

    // L_{a_base} u at an interior node.
    double generator(std::span<const double> slice, std::size_t node) const {
        detail::require_interior(p_.grid, node, "generator");
        return base_operator(slice, node);
    }

    double hamiltonian(std::span<const double> slice, std::size_t node) const {
        return hjb_sup(generator(slice, node), c_);
    }

    // One explicit step from t_j to t_j + dt with boundary data at t_j + dt.
    std::vector<double> step(const std::vector<double>& u, double t_next, double dt) const {
        if (u.size() != p_.grid.size()) throw UsageError("hjb step: slice has wrong size");
        if (dt * worst_rate_ > 1.0 + 1e-12) {
            std::string node;
            for (double v : p_.grid.point(worst_node_)) node += (node.empty() ? "" : ",") + csv::format(v);
            throw CflError("hjb step: dt = " + csv::format(dt) + " exceeds the stability bound " +
                           csv::format(stable_dt()) + " at node (" + node + ")");
        }
        std::vector<double> next(u.size());
        const auto& g = p_.grid;
        for (std::size_t f = 0; f < g.size(); ++f)
            if (g.is_boundary(f)) next[f] = p_.boundary(t_next, f, g.point(f));
        for_each_block(interior_.size(), 1024, p_.workers, [&](std::size_t, std::size_t begin, std::size_t end) {
            for (std::size_t k = begin; k < end; ++k) {
                const std::size_t f = interior_[k];
                const double l = base_operator(u, f);
                next[f] = u[f] + dt * (l < 0.0 ? l : c_ * l);
            }
        });
        return next;
    }

    std::vector<double> step(const std::vector<double>& u, double t_next) const { return step(u, t_next, dt_); }

    GridFunction solve() const {
        const auto& g = p_.grid;
        std::vector<double> u(g.size(), 1.0);
        std::vector<double> times{0.0};
        std::vector<std::vector<double>> slices{u};
        for (std::size_t j = 1; j <= steps_; ++j) {
            const double t = j == steps_ ? p_.horizon : static_cast<double>(j) * dt_;
            u = step(u, t);
            if (j % every_ == 0 || j == steps_) {
                if (times.back() == t) continue;
                times.push_back(t);
                slices.push_back(u);
            }
        }
        GridFunction out(g, std::move(times), std::move(slices),
                         p_.uset.base().scale_invariant() ? Extension::rescale : Extension::clamp);
        auto& meta = out.metadata();
        meta["model"] = p_.uset.base().description();
        meta["family"] = p_.uset.family();
        meta["c_cov"] = csv::format(c_);
        meta["dt"] = csv::format(dt_);
        meta["steps"] = std::to_string(steps_);
        meta["cfl_safety"] = csv::format(p_.cfl_safety);
        meta["boundary"] = p_.boundary_provenance;
        meta["scheme"] = "explicit-monotone-log";
        return out;
    }

private:
    double base_operator(std::span<const double> slice, std::size_t f) const {
        const std::size_t n = p_.grid.dimension();
        const double u0 = slice[f];
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& w = weights_[f * n + i];
            const std::size_t s = p_.grid.stride(i);
            acc += w.minus * (slice[f - s] - u0) + w.plus * (slice[f + s] - u0);
        }
        return acc;
    }

    HJBProblem p_;
    double c_ = 1.0;
    std::vector<detail::AxisWeights> weights_;
    std::vector<std::size_t> interior_;
    double worst_rate_ = 0.0;
    std::size_t worst_node_ = 0;
    std::size_t steps_ = 1;
    std::size_t every_ = 1;
    double dt_ = 0.0;
};

inline GridFunction solve(const HJBProblem& problem) { return HJBSolver(problem).solve(); }

// ---------------------------------------------------------------------------
// Consistency checks on stored solutions
// ---------------------------------------------------------------------------

struct Probe {
    std::size_t slice = 0;  // index into GridFunction::times()
    std::size_t node = 0;   // interior node
};

struct ResidualReport {
    std::vector<double> residuals;  // one per probe
    double max_residual = 0.0;
    std::size_t worst_probe = 0;
};

namespace detail {

inline void require_probe(const GridFunction& u, const Probe& p, const char* who) {
    if (p.slice < 2 || p.slice + 1 >= u.slice_count())
        throw UsageError(std::string(who) + ": probe slice must satisfy 2 <= j < last");
    require_interior(u.grid(), p.node, who);
}

inline double time_derivative(const GridFunction& u, std::size_t j, std::size_t f) {
    const auto& t = u.times();
    return (u.slice(j + 1)[f] - u.slice(j - 1)[f]) / (t[j + 1] - t[j - 1]);
}

inline ResidualReport finish(std::vector<double> r) {
    ResidualReport out;
    out.residuals = std::move(r);
    for (std::size_t k = 0; k < out.residuals.size(); ++k)
        if (out.residuals[k] > out.max_residual) {
            out.max_residual = out.residuals[k];
            out.worst_probe = k;
        }
    return out;
}

}  // namespace detail

// |u_t - sup_r r L_{a_base} u| at the probes: centered differences in t over
// the stored slices, the scheme's own stencil in x.
inline ResidualReport residual(const GridFunction& u, const HJBSolver& solver, const std::vector<Probe>& probes) {
    if (!(u.grid() == solver.problem().grid)) throw UsageError("residual: grid does not match the solver");
    const double c = solver.problem().uset.c_cov();
    std::vector<double> r;
    for (const auto& p : probes) {
        detail::require_probe(u, p, "residual");
        const double lhat = hjb_sup(solver.generator(u.slice(p.slice), p.node), c);
        r.push_back(std::fabs(detail::time_derivative(u, p.slice, p.node) - lhat));
    }
    return detail::finish(std::move(r));
}

struct PucciReport {
    double initial_error = 0.0;  // max |v(0, x) - |x|_1| over the grid
    ResidualReport residual;     // |v_t - (1/2) sup_r r sum_i a_ii x_i^2 v_{x_i x_i}|
};

// v = |x|_1 u solves v_t = (1/2) sup_a sum_ij x_i x_j a_ij D2_ij v with
// v(0, x) = |x|_1. In log-coordinates x^2 v_xx = v_{xi xi} - v_{xi}; both
// derivatives use central differences, independent of the solver's stencil.
inline PucciReport pucci_transform_check(const GridFunction& u, const UncertaintySet& uset,
                                         const std::vector<Probe>& probes) {
    const auto& g = u.grid();
    const std::size_t n = g.dimension();
    if (uset.dimension() != n) throw UsageError("pucci_transform_check: dimension mismatch");
    auto v_at = [&](std::size_t j, std::size_t f) { return norm1(g.point(f)) * u.slice(j)[f]; };
    PucciReport out;
    for (std::size_t f = 0; f < g.size(); ++f)
        out.initial_error = std::max(out.initial_error, std::fabs(v_at(0, f) - norm1(g.point(f))));
    const double c = uset.c_cov();
    std::vector<double> r;
    for (const auto& p : probes) {
        detail::require_probe(u, p, "pucci_transform_check");
        const Point x = g.point(p.node);
        const auto a = uset.base().covariance(x);
        const auto& t = u.times();
        const double v_t = (v_at(p.slice + 1, p.node) - v_at(p.slice - 1, p.node)) / (t[p.slice + 1] - t[p.slice - 1]);
        double op = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t s = g.stride(i);
            const double h = g.spacing(i);
            const double vm = v_at(p.slice, p.node - s), v0 = v_at(p.slice, p.node), vp = v_at(p.slice, p.node + s);
            const double v_xixi = (vp - 2.0 * v0 + vm) / (h * h);
            const double v_xi = (vp - vm) / (2.0 * h);
            op += 0.5 * a[i * n + i] * (v_xixi - v_xi);
        }
        r.push_back(std::fabs(v_t - hjb_sup(op, c)));
    }
    out.residual = detail::finish(std::move(r));
    return out;
}

// Largest increase u(t_{j+1}, x) - u(t_j, x) over all nodes and slices.
inline double max_time_increase(const GridFunction& u) {
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 1; j < u.slice_count(); ++j)
        for (std::size_t f = 0; f < u.grid().size(); ++f)
            worst = std::max(worst, u.slice(j)[f] - u.slice(j - 1)[f]);
    return worst;
}

}  // namespace robustarb
