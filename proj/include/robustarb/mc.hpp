#pragma once

// Monte-Carlo estimators of u_M(T, x) = E[L(T) X(T)] / |x|_1 and of the robust
// envelope over a parameter grid, plus the martingale / DPP / supermartingale
// diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustarb/csv.hpp"
#include "robustarb/errors.hpp"
#include "robustarb/grid.hpp"
#include "robustarb/model.hpp"
#include "robustarb/parallel.hpp"
#include "robustarb/sde.hpp"

namespace robustarb {

struct EstimateReport {
    double estimate = 0.0;
    double std_error = 0.0;
    std::size_t paths = 0;
    std::size_t stopped = 0;  // paths localized before the horizon
    std::uint64_t seed = 0;
    std::size_t steps = 0;
    std::string model;
    Point params;
    double horizon = 0.0;
    Point x;

    // The 3-SE interval misses (0, 1].
    bool outside_unit_interval() const {
        return estimate - 3.0 * std_error > 1.0 || estimate + 3.0 * std_error <= 0.0;
    }
};

namespace detail {

struct Moments {
    double sum = 0.0;
    double sumsq = 0.0;
    std::size_t count = 0;

    void add(double v) {
        sum += v;
        sumsq += v * v;
        ++count;
    }
    void merge(const Moments& o) {
        sum += o.sum;
        sumsq += o.sumsq;
        count += o.count;
    }
    double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
    double std_error() const {
        if (count < 2) return 0.0;
        const double n = static_cast<double>(count);
        const double m = sum / n;
        const double var = std::max(0.0, (sumsq - n * m * m) / (n - 1.0));
        return std::sqrt(var / n);
    }
};

// Runs fn(path, out) for every path, where out has `width` slots; returns one
// Moments per slot, reduced in fixed block order. `stopped` counts paths for
// which fn returned true.
template <class Fn>
std::vector<Moments> reduce_paths(const SimConfig& cfg, std::size_t paths, std::size_t width, std::size_t& stopped,
                                  Fn&& fn) {
    const std::size_t blocks = number_of_blocks(paths, cfg.block_size);
    std::vector<std::vector<Moments>> partial(blocks, std::vector<Moments>(width));
    std::vector<std::size_t> partial_stopped(blocks, 0);
    for_each_block(paths, cfg.block_size, cfg.workers, [&](std::size_t b, std::size_t begin, std::size_t end) {
        std::vector<double> out(width);
        for (std::size_t p = begin; p < end; ++p) {
            if (fn(p, std::span<double>(out))) ++partial_stopped[b];
            for (std::size_t w = 0; w < width; ++w) partial[b][w].add(out[w]);
        }
    });
    std::vector<Moments> total(width);
    stopped = 0;
    for (std::size_t b = 0; b < blocks; ++b) {
        for (std::size_t w = 0; w < width; ++w) total[w].merge(partial[b][w]);
        stopped += partial_stopped[b];
    }
    return total;
}

inline EstimateReport base_report(const CoefficientField& field, double T, std::span<const double> x,
                                  const SimConfig& cfg) {
    EstimateReport r;
    r.seed = cfg.seed;
    r.paths = cfg.paths;
    r.steps = cfg.steps;
    r.model = field.description();
    r.horizon = T;
    r.x.assign(x.begin(), x.end());
    return r;
}

inline void check_inputs(const CoefficientField& field, double T, std::span<const double> x, const char* who) {
    if (!(T >= 0.0) || !std::isfinite(T)) throw ConfigError(std::string(who) + ": horizon must be >= 0");
    if (x.size() != field.dimension()) throw UsageError(std::string(who) + ": x has wrong dimension");
    require_positive(x, "initial configuration");
}

inline std::size_t mesh_index(double t, double T, std::size_t steps, const char* who) {
    const double pos = t / T * static_cast<double>(steps);
    const double k = std::round(pos);
    if (std::fabs(pos - k) > 1e-9 * std::max(1.0, pos) || k < 0.0 || k > static_cast<double>(steps))
        throw ConfigError(std::string(who) + ": time " + csv::format(t) + " is not on the simulation mesh");
    return static_cast<std::size_t>(k);
}

}  // namespace detail

inline EstimateReport estimate_u_M(const CoefficientField& field, double T, std::span<const double> x,
                                   SimConfig cfg) {
    detail::check_inputs(field, T, x, "estimate_u_M");
    EstimateReport r = detail::base_report(field, T, x, cfg);
    if (T == 0.0) {
        r.estimate = 1.0;
        r.std_error = 0.0;
        return r;
    }
    cfg.horizon = T;
    cfg.validate();
    const double x_total = norm1(x);
    std::size_t stopped = 0;
    auto m = detail::reduce_paths(cfg, cfg.paths, 1, stopped, [&](std::size_t p, std::span<double> out) {
        PathStepper s(field, x, cfg, p);
        for (std::size_t k = 0; k < cfg.steps; ++k) s.advance();
        out[0] = s.stopped() ? 0.0 : std::exp(s.log_deflator()) * s.total() / x_total;
        return s.stopped();
    });
    r.estimate = m[0].mean();
    r.std_error = m[0].std_error();
    r.stopped = stopped;
    return r;
}

// u_M(t_k, x) at every mesh time of cfg (t_0 = 0 gives exactly 1).
struct EstimateSeries {
    std::vector<double> times;
    std::vector<double> estimate;
    std::vector<double> std_error;
};

inline EstimateSeries estimate_u_M_series(const CoefficientField& field, std::span<const double> x,
                                          const SimConfig& cfg) {
    detail::check_inputs(field, cfg.horizon, x, "estimate_u_M_series");
    cfg.validate();
    const std::size_t m = cfg.steps;
    const double x_total = norm1(x);
    std::size_t stopped = 0;
    auto mom = detail::reduce_paths(cfg, cfg.paths, m, stopped, [&](std::size_t p, std::span<double> out) {
        PathStepper s(field, x, cfg, p);
        for (std::size_t k = 0; k < m; ++k) {
            s.advance();
            out[k] = s.stopped() ? 0.0 : std::exp(s.log_deflator()) * s.total() / x_total;
        }
        return s.stopped();
    });
    EstimateSeries out;
    out.times.push_back(0.0);
    out.estimate.push_back(1.0);
    out.std_error.push_back(0.0);
    for (std::size_t k = 0; k < m; ++k) {
        out.times.push_back(static_cast<double>(k + 1) * cfg.dt());
        out.estimate.push_back(mom[k].mean());
        out.std_error.push_back(mom[k].std_error());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Robust envelope over a parameter grid
// ---------------------------------------------------------------------------

struct PhiHatReport {
    EstimateReport best;
    Point argmax;
    std::vector<EstimateReport> vertices;  // one per grid point, in grid order
};

// All vertices share cfg.seed, so they are driven by common random numbers.
inline PhiHatReport estimate_Phi_hat(const UncertaintySet& uset, double T, std::span<const double> x,
                                     const SimConfig& cfg, const ParamGrid& grid) {
    if (grid.points.empty()) throw UsageError("estimate_Phi_hat: empty parameter grid");
    PhiHatReport r;
    std::size_t best = 0;
    for (std::size_t g = 0; g < grid.points.size(); ++g) {
        auto rep = estimate_u_M(uset.realize(grid.points[g]), T, x, cfg);
        rep.params = grid.points[g];
        if (g > 0 && rep.estimate > r.vertices[best].estimate) best = g;
        r.vertices.push_back(std::move(rep));
    }
    r.best = r.vertices[best];
    r.argmax = grid.points[best];
    return r;
}

inline bool argmax_agrees(const PhiHatReport& coarse, const PhiHatReport& fine) { return coarse.argmax == fine.argmax; }

// ---------------------------------------------------------------------------
// Nested diagnostics
// ---------------------------------------------------------------------------

// Inner value function (horizon, y) -> value, with an optional 1-sigma error.
struct InnerFunction {
    std::function<double(double, std::span<const double>)> value;
    std::function<double(double, std::span<const double>)> error;
    std::function<bool(std::span<const double>)> covers;

    static InnerFunction from(const GridFunction& g) {
        auto shared = std::make_shared<GridFunction>(g);
        InnerFunction f;
        f.value = [shared](double h, std::span<const double> y) { return shared->value(h, y); };
        if (g.has_errors()) f.error = [shared](double h, std::span<const double> y) { return shared->error(h, y); };
        f.covers = [shared](std::span<const double> y) { return shared->covers(y); };
        return f;
    }

    static InnerFunction constant(double c) {
        InnerFunction f;
        f.value = [c](double, std::span<const double>) { return c; };
        return f;
    }
};

struct Checkpoint {
    double t = 0.0;
    double mean = 0.0;
    double std_error = 0.0;     // sampling error of the mean
    double inner_error = 0.0;   // propagated error of the inner function
    double combined_se = 0.0;   // against the reference
    bool within = false;
};

struct MartingaleReport {
    double reference = 0.0;  // |x|_1 u_M(T, x)
    double reference_se = 0.0;
    std::vector<Checkpoint> checkpoints;
    std::size_t paths = 0;
    std::size_t outside = 0;  // evaluations of the inner function outside its domain
    bool partial = false;     // budget forced fewer paths
    bool passed = false;
};

// Budget on path-steps for nested diagnostics; 0 disables the limit.
struct Budget {
    std::size_t max_path_steps = 0;

    std::size_t paths_allowed(std::size_t paths, std::size_t steps) const {
        if (max_path_steps == 0 || paths * steps <= max_path_steps) return paths;
        return std::max<std::size_t>(2, max_path_steps / std::max<std::size_t>(steps, 1));
    }
};

// Means of L(t)X(t) u(T-t, X(t)) at the checkpoints, against |x|_1 u_M(T, x)
// from the same paths.
inline MartingaleReport martingale_diagnostic(const CoefficientField& field, double T, std::span<const double> x,
                                              SimConfig cfg, const std::vector<double>& checkpoints,
                                              const InnerFunction& inner, Budget budget = {}) {
    detail::check_inputs(field, T, x, "martingale_diagnostic");
    if (!(T > 0.0)) throw ConfigError("martingale_diagnostic: horizon must be positive");
    if (checkpoints.empty()) throw UsageError("martingale_diagnostic: no checkpoints");
    cfg.horizon = T;
    cfg.validate();
    const std::size_t m = cfg.steps;
    std::vector<std::size_t> idx;
    for (double t : checkpoints) idx.push_back(detail::mesh_index(t, T, m, "martingale_diagnostic"));
    const std::size_t K = idx.size();

    MartingaleReport r;
    r.paths = budget.paths_allowed(cfg.paths, m);
    r.partial = r.paths < cfg.paths;

    // slots: [0, K) values, [K, 2K) inner errors, 2K terminal value, 2K+1 outside flag
    std::size_t stopped = 0;
    auto mom = detail::reduce_paths(cfg, r.paths, 2 * K + 2, stopped, [&](std::size_t p, std::span<double> out) {
        PathStepper s(field, x, cfg, p);
        std::fill(out.begin(), out.end(), 0.0);
        auto record = [&](std::size_t c) {
            if (s.stopped()) return;
            const double h = T - s.time();
            const double lx = std::exp(s.log_deflator()) * s.total();
            if (inner.covers && !inner.covers(s.x())) out[2 * K + 1] += 1.0;
            out[c] = lx * inner.value(h, s.x());
            if (inner.error) out[K + c] = lx * inner.error(h, s.x());
        };
        for (std::size_t k = 0; k <= m; ++k) {
            if (k > 0) s.advance();
            for (std::size_t c = 0; c < K; ++c)
                if (idx[c] == k) record(c);
        }
        out[2 * K] = s.stopped() ? 0.0 : std::exp(s.log_deflator()) * s.total();
        return s.stopped();
    });
    r.reference = mom[2 * K].mean();
    r.reference_se = mom[2 * K].std_error();
    r.outside = static_cast<std::size_t>(mom[2 * K + 1].sum);
    r.passed = true;
    for (std::size_t c = 0; c < K; ++c) {
        Checkpoint cp;
        cp.t = checkpoints[c];
        cp.mean = mom[c].mean();
        cp.std_error = mom[c].std_error();
        cp.inner_error = mom[K + c].mean();
        cp.combined_se = std::sqrt(cp.std_error * cp.std_error + cp.inner_error * cp.inner_error +
                                   r.reference_se * r.reference_se);
        cp.within = std::fabs(cp.mean - r.reference) <= 3.0 * cp.combined_se;
        r.passed = r.passed && cp.within;
        r.checkpoints.push_back(cp);
    }
    return r;
}

struct DppReport {
    double left = 0.0;  // |x|_1 Phi_hat(T, x)
    double left_se = 0.0;
    Point left_argmax;
    double right = 0.0;  // max_p E_p[L(tau) X(tau) Phi_hat(T - tau, X(tau))]
    double right_se = 0.0;
    double right_inner_error = 0.0;
    Point right_argmax;
    std::vector<double> right_per_vertex;
    double combined_se = 0.0;
    bool passed = false;
};

inline DppReport dpp_diagnostic(const UncertaintySet& uset, double T, std::span<const double> x, SimConfig cfg,
                                double tau, const ParamGrid& grid, const InnerFunction& phi_hat) {
    if (grid.points.empty()) throw UsageError("dpp_diagnostic: empty parameter grid");
    if (!(tau > 0.0 && tau < T)) throw ConfigError("dpp_diagnostic: tau must lie in (0, T)");
    cfg.horizon = T;
    cfg.validate();
    const std::size_t k_tau = detail::mesh_index(tau, T, cfg.steps, "dpp_diagnostic");
    const double x_total = norm1(x);

    DppReport r;
    const auto left = estimate_Phi_hat(uset, T, x, cfg, grid);
    r.left = x_total * left.best.estimate;
    r.left_se = x_total * left.best.std_error;
    r.left_argmax = left.argmax;

    // Same per-path streams over [0, tau] as the full-horizon simulation.
    SimConfig short_cfg = cfg;
    short_cfg.horizon = cfg.dt() * static_cast<double>(k_tau);
    short_cfg.steps = k_tau;
    short_cfg.brownian_resolution = cfg.resolution() / cfg.steps * k_tau;
    std::size_t best = 0;
    std::vector<double> ses, inner_errs;
    for (std::size_t g = 0; g < grid.points.size(); ++g) {
        const auto field = uset.realize(grid.points[g]);
        std::size_t stopped = 0;
        auto mom = detail::reduce_paths(short_cfg, short_cfg.paths, 2, stopped, [&](std::size_t p, std::span<double> out) {
            PathStepper s(field, x, short_cfg, p);
            for (std::size_t k = 0; k < k_tau; ++k) s.advance();
            out[0] = out[1] = 0.0;
            if (!s.stopped()) {
                const double lx = std::exp(s.log_deflator()) * s.total();
                out[0] = lx * phi_hat.value(T - tau, s.x());
                if (phi_hat.error) out[1] = lx * phi_hat.error(T - tau, s.x());
            }
            return s.stopped();
        });
        r.right_per_vertex.push_back(mom[0].mean());
        ses.push_back(mom[0].std_error());
        inner_errs.push_back(mom[1].mean());
        if (mom[0].mean() > r.right_per_vertex[best]) best = g;
    }
    r.right = r.right_per_vertex[best];
    r.right_se = ses[best];
    r.right_inner_error = inner_errs[best];
    r.right_argmax = grid.points[best];
    r.combined_se = std::sqrt(r.left_se * r.left_se + r.right_se * r.right_se + r.right_inner_error * r.right_inner_error);
    r.passed = std::fabs(r.left - r.right) <= 3.0 * r.combined_se;
    return r;
}

struct DriftPoint {
    double t = 0.0;
    double mean = 0.0;
    double std_error = 0.0;
    double step_se = 0.0;  // SE of the paired difference to the previous point
};

struct DriftReport {
    std::vector<DriftPoint> series;
    double worst_increase = 0.0;  // largest (mean_k - mean_{k-1}) / step_se
    bool non_increasing = false;
};

// Sample mean of Xi(t) = L(t) X(t) U(T - t, X(t)) every `every` steps.
inline DriftReport supersolution_drift_diagnostic(const CoefficientField& field, const InnerFunction& U, double T,
                                                  std::span<const double> x, SimConfig cfg, std::size_t every = 1) {
    detail::check_inputs(field, T, x, "supersolution_drift_diagnostic");
    if (!(T > 0.0)) throw ConfigError("supersolution_drift_diagnostic: horizon must be positive");
    if (every == 0) throw ConfigError("supersolution_drift_diagnostic: reporting interval must be >= 1");
    cfg.horizon = T;
    cfg.validate();
    std::vector<std::size_t> ks;
    for (std::size_t k = 0; k <= cfg.steps; k += every) ks.push_back(k);
    if (ks.back() != cfg.steps) ks.push_back(cfg.steps);
    const std::size_t K = ks.size();

    std::size_t stopped = 0;
    auto mom = detail::reduce_paths(cfg, cfg.paths, 2 * K, stopped, [&](std::size_t p, std::span<double> out) {
        PathStepper s(field, x, cfg, p);
        std::size_t c = 0;
        double prev = 0.0;
        for (std::size_t k = 0; k <= cfg.steps; ++k) {
            if (k > 0) s.advance();
            if (ks[c] != k) continue;
            double xi = 0.0;
            if (!s.stopped()) {
                const double u = U.value(T - s.time(), s.x());
                if (!(u > 0.0)) {
                    std::ostringstream os;
                    os.precision(17);
                    os << "t=" << s.time() << " U=" << u << " X=(";
                    for (std::size_t i = 0; i < s.x().size(); ++i) os << (i ? "," : "") << s.x()[i];
                    os << ")";
                    throw SimulationError("supersolution_drift_diagnostic: U is not positive at a visited state",
                                          os.str());
                }
                xi = std::exp(s.log_deflator()) * s.total() * u;
            }
            out[c] = xi;
            out[K + c] = c == 0 ? 0.0 : xi - prev;
            prev = xi;
            ++c;
        }
        return s.stopped();
    });
    DriftReport r;
    r.non_increasing = true;
    r.worst_increase = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < K; ++c) {
        DriftPoint d;
        d.t = static_cast<double>(ks[c]) * cfg.dt();
        d.mean = mom[c].mean();
        d.std_error = mom[c].std_error();
        d.step_se = mom[K + c].std_error();
        if (c > 0) {
            const double rise = d.mean - r.series.back().mean;
            const double z = rise / std::max(d.step_se, 1e-300);
            if (rise > 0.0) r.worst_increase = std::max(r.worst_increase, z);
            if (rise > 3.0 * d.step_se) r.non_increasing = false;
        }
        r.series.push_back(d);
    }
    if (!std::isfinite(r.worst_increase)) r.worst_increase = 0.0;
    return r;
}

// ---------------------------------------------------------------------------
// Volatility-stabilized model: product-ratio formulas
// ---------------------------------------------------------------------------

struct VsmFormulaReport {
    EstimateReport definition;  // estimate_u_M
    double displayed = 0.0;     // (prod y / |y|) E[prod X(T) / |X(T)|]
    double displayed_se = 0.0;
    double reciprocal = 0.0;    // (prod y / |y|) E[|X(T)| / prod X(T)]
    double reciprocal_se = 0.0;
    bool displayed_mismatch = false;   // displayed value outside 3 combined SE of the definition
    bool reciprocal_mismatch = false;
};

inline VsmFormulaReport vsm_explicit_u(double T, std::span<const double> y, double gamma1, double gamma2,
                                       SimConfig cfg) {
    const std::size_t n = y.size();
    const auto field = vsm_field(n, gamma1, gamma2);
    VsmFormulaReport r;
    r.definition = estimate_u_M(field, T, y, cfg);
    double log_ratio = 0.0;
    for (double v : y) log_ratio += std::log(v);
    log_ratio -= std::log(norm1(y));
    const double ratio = std::exp(log_ratio);
    auto flag = [&](double value, double se) {
        const double c = std::sqrt(se * se + r.definition.std_error * r.definition.std_error);
        return std::fabs(value - r.definition.estimate) > std::max(3.0 * c, 1e-12);
    };
    if (T == 0.0) {
        r.displayed = ratio * ratio;
        r.reciprocal = 1.0;
        r.displayed_mismatch = flag(r.displayed, 0.0);
        r.reciprocal_mismatch = flag(r.reciprocal, 0.0);
        return r;
    }
    cfg.horizon = T;
    cfg.validate();
    std::size_t stopped = 0;
    // The displayed functional is bounded, so it uses every path at its last
    // simulated state; the reciprocal one is localized like the definition.
    auto mom = detail::reduce_paths(cfg, cfg.paths, 2, stopped, [&](std::size_t p, std::span<double> out) {
        PathStepper s(field, y, cfg, p);
        for (std::size_t k = 0; k < cfg.steps; ++k) s.advance();
        double log_prod = 0.0;
        for (double v : s.log_x()) log_prod += v;
        const double log_total = std::log(s.total());
        out[0] = std::exp(log_ratio + log_prod - log_total);
        out[1] = s.stopped() ? 0.0 : std::exp(log_ratio + log_total - log_prod);
        return s.stopped();
    });
    r.displayed = ratio * mom[0].mean();
    r.displayed_se = ratio * mom[0].std_error();
    r.reciprocal = mom[1].mean();
    r.reciprocal_se = mom[1].std_error();
    r.displayed_mismatch = flag(r.displayed, r.displayed_se);
    r.reciprocal_mismatch = flag(r.reciprocal, r.reciprocal_se);
    return r;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::vector<std::string> estimate_csv_header(std::size_t n) {
    std::vector<std::string> cols{"estimate", "std_error", "paths", "stopped", "seed", "steps", "horizon"};
    for (std::size_t i = 0; i < n; ++i) cols.push_back("x_" + std::to_string(i + 1));
    cols.push_back("params");
    cols.push_back("model");
    return cols;
}

inline std::vector<std::string> estimate_csv_row(const EstimateReport& r) {
    std::vector<std::string> row{csv::format(r.estimate), csv::format(r.std_error), std::to_string(r.paths),
                                 std::to_string(r.stopped), std::to_string(r.seed), std::to_string(r.steps),
                                 csv::format(r.horizon)};
    for (double v : r.x) row.push_back(csv::format(v));
    std::string params;
    for (std::size_t i = 0; i < r.params.size(); ++i) params += (i ? ";" : "") + csv::format(r.params[i]);
    row.push_back(params);
    std::string model = r.model;
    std::replace(model.begin(), model.end(), ',', ';');
    row.push_back(model);
    return row;
}

inline void write_estimates_csv(std::ostream& os, const std::vector<EstimateReport>& reports) {
    if (reports.empty()) throw UsageError("write_estimates_csv: nothing to write");
    csv::Writer w(os);
    w.header(estimate_csv_header(reports.front().x.size()));
    for (const auto& r : reports) w.row_strings(estimate_csv_row(r));
}

inline nlohmann::json to_json(const EstimateReport& r) {
    return {{"estimate", r.estimate}, {"std_error", r.std_error}, {"paths", r.paths},
            {"stopped", r.stopped},   {"seed", r.seed},           {"steps", r.steps},
            {"model", r.model},       {"params", r.params},       {"horizon", r.horizon},
            {"x", r.x},               {"outside_unit_interval", r.outside_unit_interval()}};
}

}  // namespace robustarb
