#pragma once

// Monte-Carlo data on grids: Dirichlet boundary tables for the HJB solver and
// fitted grid functions used as inner value functions by the nested
// diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "robustarb/csv.hpp"
#include "robustarb/errors.hpp"
#include "robustarb/grid.hpp"
#include "robustarb/hjb.hpp"
#include "robustarb/mc.hpp"
#include "robustarb/model.hpp"
#include "robustarb/sde.hpp"

namespace robustarb {

namespace detail {

// Independent root seed per grid node.
inline std::uint64_t node_seed(std::uint64_t seed, std::size_t node) {
    return splitmix64(seed ^ splitmix64(0xA5A5A5A5ull + node));
}

// Envelope over the parameter grid of u_M(t_k, x) at every mesh time; the
// vertices share one seed. Returns the estimates and the SE of the maximizing
// vertex at each time.
inline EstimateSeries envelope_series(const UncertaintySet& uset, const ParamGrid& params, std::span<const double> x,
                                      const SimConfig& cfg) {
    if (params.points.empty()) throw UsageError("envelope_series: empty parameter grid");
    EstimateSeries best;
    for (std::size_t g = 0; g < params.points.size(); ++g) {
        auto s = estimate_u_M_series(uset.realize(params.points[g]), x, cfg);
        if (g == 0) {
            best = std::move(s);
            continue;
        }
        for (std::size_t k = 0; k < s.times.size(); ++k)
            if (s.estimate[k] > best.estimate[k]) {
                best.estimate[k] = s.estimate[k];
                best.std_error[k] = s.std_error[k];
            }
    }
    return best;
}

inline ParamGrid nominal_grid(const UncertaintySet& uset) { return ParamGrid{{uset.nominal()}}; }

}  // namespace detail

// Boundary data for the HJB solver from the robust envelope over `params`
// (one point for singleton sets), on the simulation mesh of cfg over
// [0, cfg.horizon], projected to be non-increasing in t.
inline BoundaryTable mc_boundary(const UncertaintySet& uset, const ParamGrid& params, const SpatialGrid& grid,
                                 SimConfig cfg) {
    cfg.validate();
    std::vector<double> times(cfg.steps + 1);
    for (std::size_t k = 0; k <= cfg.steps; ++k) times[k] = static_cast<double>(k) * cfg.dt();
    times.back() = cfg.horizon;
    BoundaryTable table(grid, times);
    const std::uint64_t root = cfg.seed;
    for (std::size_t k = 0; k < table.nodes().size(); ++k) {
        const std::size_t f = table.nodes()[k];
        cfg.seed = detail::node_seed(root, f);
        const auto s = detail::envelope_series(uset, params, grid.point(f), cfg);
        table.values(k) = s.estimate;
        table.errors(k) = s.std_error;
    }
    table.make_monotone();
    return table;
}

inline BoundaryTable mc_boundary(const UncertaintySet& uset, const SpatialGrid& grid, const SimConfig& cfg) {
    return mc_boundary(uset, detail::nominal_grid(uset), grid, cfg);
}

// Grid function of the envelope estimate at every node, with slices at t = 0
// and at the requested horizons (each on the simulation mesh of cfg, whose
// horizon is the largest of them). Per-node SEs travel as error slices.
inline GridFunction fit_envelope(const UncertaintySet& uset, const ParamGrid& params, const SpatialGrid& grid,
                                 std::vector<double> horizons, SimConfig cfg, Extension ext) {
    if (horizons.empty()) throw UsageError("fit_envelope: no horizons");
    std::sort(horizons.begin(), horizons.end());
    if (!(horizons.front() > 0.0)) throw ConfigError("fit_envelope: horizons must be positive");
    cfg.horizon = horizons.back();
    cfg.validate();
    std::vector<std::size_t> ks;
    for (double h : horizons) ks.push_back(detail::mesh_index(h, cfg.horizon, cfg.steps, "fit_envelope"));

    std::vector<double> times{0.0};
    for (std::size_t k : ks) times.push_back(static_cast<double>(k) * cfg.dt());
    times.back() = cfg.horizon;
    std::vector<std::vector<double>> values(times.size(), std::vector<double>(grid.size(), 1.0));
    std::vector<std::vector<double>> errors(times.size(), std::vector<double>(grid.size(), 0.0));
    const std::uint64_t root = cfg.seed;
    for (std::size_t f = 0; f < grid.size(); ++f) {
        cfg.seed = detail::node_seed(root, f);
        const auto s = detail::envelope_series(uset, params, grid.point(f), cfg);
        for (std::size_t j = 0; j < ks.size(); ++j) {
            values[j + 1][f] = s.estimate[ks[j]];
            errors[j + 1][f] = s.std_error[ks[j]];
        }
    }
    GridFunction out(grid, std::move(times), std::move(values), ext);
    out.set_errors(std::move(errors));
    out.metadata()["source"] = "monte-carlo";
    out.metadata()["model"] = uset.base().description();
    out.metadata()["family"] = uset.family();
    out.metadata()["paths"] = std::to_string(cfg.paths);
    out.metadata()["steps"] = std::to_string(cfg.steps);
    out.metadata()["seed"] = std::to_string(root);
    out.metadata()["vertices"] = std::to_string(params.points.size());
    return out;
}

inline GridFunction fit_u_M(const CoefficientField& field, const SpatialGrid& grid, std::vector<double> horizons,
                            const SimConfig& cfg) {
    const auto uset = UncertaintySet::singleton(field);
    return fit_envelope(uset, detail::nominal_grid(uset), grid, std::move(horizons), cfg,
                        field.scale_invariant() ? Extension::rescale : Extension::clamp);
}

}  // namespace robustarb
