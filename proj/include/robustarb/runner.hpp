#pragma once

// Batch front-end: strict JSON configuration -> engines -> CSV/JSON artifacts,
// plus a SHA-256 manifest that `reproduce` re-runs and byte-compares.
//
// Link against OpenSSL::Crypto when including this header.

#include <openssl/evp.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "robustarb/coupling.hpp"
#include "robustarb/errors.hpp"
#include "robustarb/grid.hpp"
#include "robustarb/hedging.hpp"
#include "robustarb/hjb.hpp"
#include "robustarb/mc.hpp"
#include "robustarb/model.hpp"
#include "robustarb/sde.hpp"
#include "robustarb/validators.hpp"

namespace robustarb {

inline constexpr const char* kVersionTag = "robustarb-0.1.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int config = 1;
inline constexpr int diagnostic = 2;
}  // namespace exit_code

struct CliOptions {
    std::string command;  // simulate | estimate | solve | hedge | check | run | reproduce
    std::string config;   // config file, or manifest for reproduce
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::string tolerance_profile = "default";
};

struct RunResult {
    int exit = exit_code::ok;
    std::string message;
    std::vector<std::string> artifacts;  // file names inside the output directory
    nlohmann::json summary;
};

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw UsageError("sha256: digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::string sha256_file(const std::filesystem::path& p) { return sha256_hex(read_file(p)); }

// ---------------------------------------------------------------------------
// Strict configuration access
// ---------------------------------------------------------------------------

namespace config {

using nlohmann::json;

inline void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

inline double number(const json& j, const std::string& where, const char* key) {
    if (!j.contains(key)) throw ConfigError(where + ": missing '" + key + "'");
    const auto& v = j.at(key);
    if (!v.is_number()) throw ConfigError(where + "." + key + ": expected a number");
    return v.get<double>();
}

inline double number(const json& j, const std::string& where, const char* key, double fallback) {
    return j.contains(key) ? number(j, where, key) : fallback;
}

inline std::uint64_t count(const json& v, const std::string& what) {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_float()) {
        const double d = v.get<double>();
        if (d >= 0.0 && d < 1.8e19 && std::floor(d) == d) return static_cast<std::uint64_t>(d);
    }
    throw ConfigError(what + ": expected a nonnegative integer");
}

inline std::uint64_t count(const json& j, const std::string& where, const char* key, std::uint64_t fallback) {
    return j.contains(key) ? count(j.at(key), where + "." + key) : fallback;
}

inline std::vector<double> numbers(const json& v, const std::string& what) {
    if (!v.is_array()) throw ConfigError(what + ": expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
        if (!e.is_number()) throw ConfigError(what + ": expected an array of numbers");
        out.push_back(e.get<double>());
    }
    return out;
}

inline std::vector<Point> points(const json& v, const std::string& what, std::size_t n) {
    if (!v.is_array() || v.empty()) throw ConfigError(what + ": expected a non-empty array of points");
    std::vector<Point> out;
    if (v.front().is_number()) {
        out.push_back(numbers(v, what));
    } else {
        for (const auto& e : v) out.push_back(numbers(e, what));
    }
    for (const auto& p : out)
        if (p.size() != n) throw ConfigError(what + ": point has " + std::to_string(p.size()) + " entries, need " +
                                             std::to_string(n));
    return out;
}

inline std::string text(const json& j, const std::string& where, const char* key, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
    return j.at(key).get<std::string>();
}

inline bool flag(const json& j, const std::string& where, const char* key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_boolean()) throw ConfigError(where + "." + key + ": expected true or false");
    return j.at(key).get<bool>();
}

inline const json& section(const json& root, const char* key) {
    if (!root.contains(key)) throw ConfigError(std::string("config: missing section '") + key + "'");
    return root.at(key);
}

}  // namespace config

// ---------------------------------------------------------------------------
// Parsed model section
// ---------------------------------------------------------------------------

struct ModelSpec {
    UncertaintySet uset = UncertaintySet::singleton(vsm_field(1, 1.0, 1.0));
    bool robust = false;  // more than one admissible parameter
    std::size_t per_interval = 3;
    nlohmann::json source;

    const CoefficientField& field() const { return uset.base(); }
    std::size_t n() const { return uset.dimension(); }
    ParamGrid params() const { return robust ? ParamGrid::box(uset, per_interval) : ParamGrid{{uset.nominal()}}; }
};

inline ModelSpec parse_model(const nlohmann::json& j) {
    using namespace config;
    const std::string where = "model";
    if (!j.is_object()) throw ConfigError("model: expected an object");
    const std::string family = text(j, where, "family", "");
    ModelSpec m;
    m.source = j;
    const auto n = static_cast<std::size_t>(count(j, where, "n", 0));
    if (n == 0) throw ConfigError("model.n: must be >= 1");
    m.per_interval = static_cast<std::size_t>(count(j, where, "per_interval", 3));
    if (family == "vsm") {
        only_keys(j, where, {"family", "n", "gamma1", "gamma2", "c1_star", "c2", "per_interval"});
        const double g1 = number(j, where, "gamma1", 1.0);
        const double g2 = number(j, where, "gamma2", 1.0);
        if (j.contains("c1_star") || j.contains("c2")) {
            if (g2 != 1.0) throw ConfigError("model: gamma2 is the interval [1, c2] when c2 is given; drop gamma2");
            const double c1s = number(j, where, "c1_star", g1);
            const double c2 = number(j, where, "c2", 1.0);
            m.uset = UncertaintySet::vsm(n, g1, c1s, c2);
            m.robust = c1s != g1 || c2 != 1.0;
        } else {
            m.uset = UncertaintySet::singleton(vsm_field(n, g1, g2));
        }
    } else if (family == "gvsm") {
        only_keys(j, where, {"family", "n", "kappa", "leverage", "gamma", "gamma_hi", "per_interval"});
        const double kappa = number(j, where, "kappa");
        Leverage G = Leverage::constant(1.0);
        if (j.contains("leverage")) {
            const auto& l = j.at("leverage");
            if (l.is_number()) {
                G = Leverage::constant(l.get<double>());
            } else {
                only_keys(l, "model.leverage", {"expression", "upper_bound", "homogeneous"});
                G = Leverage::from_expression(text(l, "model.leverage", "expression", ""),
                                              number(l, "model.leverage", "upper_bound"),
                                              flag(l, "model.leverage", "homogeneous", true));
            }
        }
        if (!j.contains("gamma")) throw ConfigError("model: missing 'gamma'");
        const auto gamma = numbers(j.at("gamma"), "model.gamma");
        if (j.contains("gamma_hi")) {
            m.uset = UncertaintySet::gvsm(n, kappa, G, gamma, numbers(j.at("gamma_hi"), "model.gamma_hi"));
            m.robust = true;
        } else {
            m.uset = UncertaintySet::singleton(gvsm_field(n, kappa, G, gamma));
        }
    } else if (family == "constant") {
        only_keys(j, where, {"family", "n", "vol", "risk"});
        if (!j.contains("vol") || !j.contains("risk")) throw ConfigError("model: constant family needs vol and risk");
        m.uset = UncertaintySet::singleton(
            constant_field(n, numbers(j.at("vol"), "model.vol"), numbers(j.at("risk"), "model.risk")));
    } else {
        throw ConfigError("model.family: unknown family '" + family + "' (expected vsm, gvsm or constant)");
    }
    return m;
}

inline SimConfig parse_sim(const nlohmann::json& j, std::uint64_t seed, std::size_t workers) {
    using namespace config;
    only_keys(j, "sim", {"horizon", "steps", "paths", "weight_floor", "max_log_step", "block_size",
                         "brownian_resolution"});
    SimConfig c;
    c.horizon = number(j, "sim", "horizon", 1.0);
    c.steps = static_cast<std::size_t>(count(j, "sim", "steps", c.steps));
    c.paths = static_cast<std::size_t>(count(j, "sim", "paths", c.paths));
    c.weight_floor = number(j, "sim", "weight_floor", c.weight_floor);
    c.max_log_step = number(j, "sim", "max_log_step", c.max_log_step);
    c.block_size = static_cast<std::size_t>(count(j, "sim", "block_size", c.block_size));
    c.brownian_resolution = static_cast<std::size_t>(count(j, "sim", "brownian_resolution", 0));
    c.seed = seed;
    c.workers = workers;
    if (c.block_size == 0) throw ConfigError("sim.block_size: must be >= 1");
    c.validate();
    return c;
}

inline SpatialGrid parse_grid(const nlohmann::json& j, std::size_t n) {
    using namespace config;
    only_keys(j, "grid", {"lo", "hi", "nodes", "axes"});
    if (j.contains("axes")) {
        if (j.contains("lo") || j.contains("hi") || j.contains("nodes"))
            throw ConfigError("grid: give either axes or lo/hi/nodes");
        std::vector<AxisSpec> axes;
        for (const auto& a : j.at("axes")) {
            only_keys(a, "grid.axes", {"lo", "hi", "nodes"});
            axes.push_back({number(a, "grid.axes", "lo"), number(a, "grid.axes", "hi"),
                            static_cast<std::size_t>(count(a, "grid.axes", "nodes", 0))});
        }
        if (axes.size() != n) throw ConfigError("grid.axes: need one axis per asset");
        return SpatialGrid(std::move(axes));
    }
    return SpatialGrid::cube(n, number(j, "grid", "lo"), number(j, "grid", "hi"),
                             static_cast<std::size_t>(count(j, "grid", "nodes", 0)));
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

class Runner {
public:
    Runner(nlohmann::json cfg, std::filesystem::path config_path, CliOptions opt)
        : root_(std::move(cfg)), config_path_(std::move(config_path)), opt_(std::move(opt)) {}

    RunResult execute() {
        using namespace config;
        only_keys(root_, "config", {"command", "seed", "workers", "model", "sim", "grid", "simulate", "estimate",
                                    "solver", "hedge", "check"});
        command_ = text(root_, "config", "command", "");
        if (opt_.command != "run" && !opt_.command.empty()) {
            if (!command_.empty() && command_ != opt_.command)
                throw ConfigError("config: command '" + command_ + "' does not match '" + opt_.command + "'");
            command_ = opt_.command;
        }
        static const std::set<std::string> known{"simulate", "estimate", "solve", "hedge", "check"};
        if (!known.count(command_)) throw ConfigError("config: unknown or missing command '" + command_ + "'");
        if (opt_.tolerance_profile != "strict" && opt_.tolerance_profile != "default")
            throw ConfigError("--tolerance-profile must be strict or default");

        if (opt_.seed) {
            seed_ = *opt_.seed;
        } else if (root_.contains("seed")) {
            seed_ = count(root_.at("seed"), "seed");
        } else if (stochastic()) {
            throw ConfigError("config: a seed is required for '" + command_ + "'");
        }
        workers_ = opt_.workers ? *opt_.workers : static_cast<std::size_t>(count(root_, "config", "workers", 1));
        if (workers_ == 0) throw ConfigError("workers must be >= 1");
        model_ = parse_model(section(root_, "model"));

        RunResult r;
        if (command_ == "simulate") simulate(r);
        if (command_ == "estimate") estimate(r);
        if (command_ == "solve") solve_cmd(r);
        if (command_ == "hedge") hedge(r);
        if (command_ == "check") check(r);
        write_all(r);
        return r;
    }

private:
    bool stochastic() const {
        if (command_ != "solve") return true;
        const auto& s = root_.contains("solver") ? root_.at("solver") : nlohmann::json::object();
        return config::text(s.is_object() ? s : nlohmann::json::object(), "solver", "boundary", "mc") == "mc";
    }

    SimConfig sim() const {
        return parse_sim(root_.contains("sim") ? root_.at("sim") : nlohmann::json::object(), seed_, workers_);
    }

    void add(std::string name, std::string content, const nlohmann::json& extra = {}) {
        files_.emplace_back(name, std::move(content));
        nlohmann::json prov = provenance();
        prov["artifact"] = name;
        if (!extra.is_null()) prov["details"] = extra;
        files_.emplace_back(name + ".provenance.json", prov.dump(2) + "\n");
    }

    nlohmann::json provenance() const {
        nlohmann::json p;
        p["version"] = kVersionTag;
        p["command"] = command_;
        p["model"] = model_.field().description();
        p["family"] = model_.uset.family();
        p["model_config"] = model_.source;
        p["seed"] = seed_;
        if (grid_) p["grid"] = grid_->to_json();
        return p;
    }

    // -- simulate -----------------------------------------------------------
    void simulate(RunResult& r) {
        config::only_keys(config::section(root_, "simulate"), "simulate", {"x"});
        const auto x = start_point("simulate");
        const auto cfg = sim();
        const auto bundle = robustarb::simulate(model_.field(), x, cfg);
        std::ostringstream os;
        write_bundle_csv(os, bundle);
        add("paths.csv", os.str(), {{"paths", cfg.paths}, {"steps", cfg.steps}, {"horizon", cfg.horizon}});
        std::size_t stopped = 0;
        for (auto s : bundle.stopped_at) stopped += s <= cfg.steps;
        r.summary = {{"paths", cfg.paths}, {"steps", cfg.steps}, {"stopped", stopped}};
    }

    Point start_point(const char* key) const {
        const auto& s = config::section(root_, key);
        if (!s.contains("x")) throw ConfigError(std::string(key) + ": missing 'x'");
        const auto pts = config::points(s.at("x"), std::string(key) + ".x", model_.n());
        if (pts.size() != 1) throw ConfigError(std::string(key) + ".x: expected a single point");
        return pts.front();
    }

    // -- estimate -----------------------------------------------------------
    void estimate(RunResult& r) {
        using namespace config;
        const auto& e = section(root_, "estimate");
        only_keys(e, "estimate", {"x", "horizons", "robust"});
        if (!e.contains("x")) throw ConfigError("estimate: missing 'x'");
        const auto xs = points(e.at("x"), "estimate.x", model_.n());
        const auto horizons = e.contains("horizons") ? numbers(e.at("horizons"), "estimate.horizons")
                                                     : std::vector<double>{sim().horizon};
        const bool robust = flag(e, "estimate", "robust", model_.robust);
        const auto cfg = sim();
        std::vector<EstimateReport> rows, robust_rows;
        nlohmann::json summary = nlohmann::json::array();
        for (const auto& x : xs)
            for (double T : horizons) {
                rows.push_back(estimate_u_M(model_.field(), T, x, cfg));
                auto item = to_json(rows.back());
                if (robust) {
                    auto phi = estimate_Phi_hat(model_.uset, T, x, cfg, model_.params());
                    phi.best.params = phi.argmax;
                    robust_rows.push_back(phi.best);
                    item["phi_hat"] = to_json(phi.best);
                }
                summary.push_back(item);
            }
        std::ostringstream os;
        write_estimates_csv(os, rows);
        add("estimates.csv", os.str(), {{"paths", cfg.paths}, {"steps", cfg.steps}});
        if (robust) {
            std::ostringstream ps;
            write_estimates_csv(ps, robust_rows);
            add("phi_hat.csv", ps.str(), {{"vertices", model_.params().points.size()}});
        }
        r.summary = {{"estimates", summary}};
    }

    // -- solve --------------------------------------------------------------
    GridFunction solve_from_config(nlohmann::json& info) {
        using namespace config;
        const auto& s = root_.contains("solver") ? root_.at("solver") : nlohmann::json::object();
        only_keys(s, "solver", {"horizon", "boundary", "boundary_value", "cfl_safety", "dt", "output_slices",
                                "solution_csv", "solution_meta"});
        grid_ = parse_grid(section(root_, "grid"), model_.n());
        if (s.contains("solution_csv")) {
            const auto base = config_path_.parent_path();
            auto u = GridFunction::read((base / text(s, "solver", "solution_csv", "")).string(),
                                        (base / text(s, "solver", "solution_meta", "")).string());
            if (!(u.grid() == *grid_)) throw ConfigError("solver.solution_csv: grid differs from the grid section");
            info = {{"source", "file"}};
            return u;
        }
        const double T = number(s, "solver", "horizon", sim().horizon);
        const std::string boundary = text(s, "solver", "boundary", "mc");
        BoundaryData data;
        std::string prov;
        if (boundary == "mc") {
            SimConfig c = sim();
            c.horizon = T;
            data = mc_boundary(model_.uset, model_.params(), *grid_, c).as_boundary();
            prov = "monte-carlo(paths=" + std::to_string(c.paths) + ", steps=" + std::to_string(c.steps) +
                   ", seed=" + std::to_string(seed_) + ")";
        } else if (boundary == "constant") {
            const double v = number(s, "solver", "boundary_value", 1.0);
            data = constant_boundary(v);
            prov = "constant(" + csv::format(v) + ")";
        } else {
            throw ConfigError("solver.boundary: expected mc or constant");
        }
        HJBProblem p(model_.uset, *grid_, T, data);
        p.cfl_safety = number(s, "solver", "cfl_safety", p.cfl_safety);
        p.dt = number(s, "solver", "dt", 0.0);
        p.output_slices = static_cast<std::size_t>(count(s, "solver", "output_slices", p.output_slices));
        p.workers = workers_;
        p.boundary_provenance = prov;
        const HJBSolver solver(p);
        info = {{"source", "solver"}, {"dt", solver.dt()}, {"steps", solver.steps()}, {"c_cov", model_.uset.c_cov()},
                {"boundary", prov}};
        return solver.solve();
    }

    void add_solution(const GridFunction& u) {
        std::ostringstream os;
        u.write_csv(os);
        add("solution.csv", os.str());
        files_.emplace_back("solution.json", u.metadata_json().dump(2) + "\n");
    }

    void solve_cmd(RunResult& r) {
        nlohmann::json info;
        const auto u = solve_from_config(info);
        add_solution(u);
        info["max_time_increase"] = max_time_increase(u);
        r.summary = info;
    }

    // -- hedge --------------------------------------------------------------
    void hedge(RunResult& r) {
        using namespace config;
        const auto& h = section(root_, "hedge");
        only_keys(h, "hedge", {"x", "horizon", "epsilon", "v", "quantiles", "min_covered"});
        nlohmann::json info;
        auto U = solve_from_config(info);
        if (U.extension() == Extension::rescale) U.set_extension(Extension::section);
        const auto x = start_point("hedge");
        const double T = number(h, "hedge", "horizon", U.horizon());
        const double eps = number(h, "hedge", "epsilon", 0.0);
        const double v = number(h, "hedge", "v", std::numeric_limits<double>::quiet_NaN());
        const GeneratedRule rule(U, T);
        auto cfg = sim();
        const auto b = backtest_superreplication(rule, model_.field(), T, x, cfg, eps, v);
        const auto levels = h.contains("quantiles") ? numbers(h.at("quantiles"), "hedge.quantiles")
                                                    : std::vector<double>{0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0};
        std::ostringstream os;
        write_backtest_csv(os, b);
        add("backtest.csv", os.str(), {{"epsilon", eps}, {"horizon", T}});
        r.summary = {{"solution", info},
                     {"portfolio", rule.portfolio()},
                     {"scale_defect", rule.scale_defect()},
                     {"backtest", to_json(b)}};
        if (b.evaluated > 0) r.summary["relative_returns"] = to_json(relative_return_report(b, x, levels));
        if (h.contains("min_covered")) {
            const double need = number(h, "hedge", "min_covered");
            r.summary["min_covered"] = need;
            if (b.covered_fraction < need) fail(r, "hedge: covered fraction below min_covered");
        }
    }

    // -- check --------------------------------------------------------------
    void check(RunResult& r) {
        using namespace config;
        const auto& c = section(root_, "check");
        only_keys(c, "check", {"x", "horizon", "checkpoints", "tau", "probe_points", "growth_bound", "inner",
                               "bias_allowance", "drift_every"});
        const auto x = start_point("check");
        const double T = number(c, "check", "horizon", sim().horizon);
        const bool strict = opt_.tolerance_profile == "strict";
        const double slack = strict ? 0.0 : number(c, "check", "bias_allowance", 0.01);
        nlohmann::json out;

        // Algebraic checks on probe points.
        std::vector<Point> probes;
        if (c.contains("probe_points")) {
            probes = points(c.at("probe_points"), "check.probe_points", model_.n());
        } else {
            const auto g = root_.contains("grid") ? parse_grid(root_.at("grid"), model_.n())
                                                  : SpatialGrid::cube(model_.n(), 0.1, 10.0, 5);
            for (std::size_t f = 0; f < g.size(); ++f) probes.push_back(g.point(f));
        }
        const auto sa = check_strong_arbitrage(model_.uset, probes);
        out["strong_arbitrage"] = {{"constant", sa.constant},
                                   {"expression_i", sa.expression_i},
                                   {"expression_ii", sa.expression_ii}};
        const auto lg = check_linear_growth(model_.field(), probes, number(c, "check", "growth_bound", 10.0));
        out["linear_growth"] = {{"worst_ratio", lg.worst_ratio}, {"worst_point", lg.worst_point},
                                {"bound", lg.bound}, {"passed", lg.passed}};
        if (!lg.passed) fail(r, "check: linear growth bound exceeded");

        // Stochastic diagnostics against a fitted inner function.
        SimConfig cfg = sim();
        cfg.horizon = T;
        const auto checkpoints = c.contains("checkpoints") ? numbers(c.at("checkpoints"), "check.checkpoints")
                                                           : std::vector<double>{0.0, T / 4.0, T / 2.0};
        const double tau = number(c, "check", "tau", T / 2.0);
        const std::size_t every = static_cast<std::size_t>(count(c, "check", "drift_every", std::max<std::size_t>(cfg.steps / 4, 1)));
        if (every == 0 || cfg.steps % every != 0) throw ConfigError("check.drift_every must divide sim.steps");
        const std::string inner_kind = text(c, "check", "inner", "fit");

        InnerFunction inner;
        if (inner_kind == "fit") {
            grid_ = parse_grid(section(root_, "grid"), model_.n());
            std::set<double> hs;
            for (double t : checkpoints)
                if (t < T) hs.insert(T - t);
            hs.insert(T - tau);
            for (std::size_t k = 0; k < cfg.steps; k += every) hs.insert(T - double(k) * cfg.dt());
            std::vector<double> horizons(hs.begin(), hs.end());
            for (double& hv : horizons) hv = double(detail::mesh_index(hv, T, cfg.steps, "check")) * cfg.dt();
            SimConfig fit_cfg = cfg;
            const auto fitted = fit_envelope(model_.uset, model_.params(), *grid_, horizons, fit_cfg,
                                             model_.field().scale_invariant() ? Extension::rescale : Extension::clamp);
            inner = InnerFunction::from(fitted);
            std::ostringstream os;
            fitted.write_csv(os);
            add("inner.csv", os.str());
        } else if (inner_kind == "solver") {
            nlohmann::json info;
            inner = InnerFunction::from(solve_from_config(info));
            out["inner_solver"] = info;
        } else {
            throw ConfigError("check.inner: expected fit or solver");
        }

        const auto mart = martingale_diagnostic(model_.field(), T, x, cfg, checkpoints, inner);
        nlohmann::json cps = nlohmann::json::array();
        bool mart_ok = true;
        for (const auto& cp : mart.checkpoints) {
            const bool ok = std::fabs(cp.mean - mart.reference) <= 3.0 * cp.combined_se + slack * mart.reference;
            mart_ok = mart_ok && ok;
            cps.push_back({{"t", cp.t}, {"mean", cp.mean}, {"std_error", cp.std_error}, {"inner_error", cp.inner_error},
                           {"combined_se", cp.combined_se}, {"within", ok}});
        }
        out["martingale"] = {{"reference", mart.reference}, {"reference_se", mart.reference_se}, {"checkpoints", cps},
                             {"outside", mart.outside}, {"passed", mart_ok}};
        if (!mart_ok) fail(r, "check: martingale diagnostic outside tolerance");

        const auto dpp = dpp_diagnostic(model_.uset, T, x, cfg, tau, model_.params(), inner);
        const bool dpp_ok = std::fabs(dpp.left - dpp.right) <= 3.0 * dpp.combined_se + slack * dpp.left;
        out["dpp"] = {{"left", dpp.left}, {"right", dpp.right}, {"combined_se", dpp.combined_se},
                      {"left_argmax", dpp.left_argmax}, {"right_argmax", dpp.right_argmax}, {"passed", dpp_ok}};
        if (!dpp_ok) fail(r, "check: DPP diagnostic outside tolerance");

        const auto drift = supersolution_drift_diagnostic(model_.field(), inner, T, x, cfg, every);
        nlohmann::json series = nlohmann::json::array();
        bool drift_ok = true;
        for (std::size_t k = 0; k < drift.series.size(); ++k) {
            const auto& p = drift.series[k];
            series.push_back({{"t", p.t}, {"mean", p.mean}, {"std_error", p.std_error}, {"step_se", p.step_se}});
            if (k > 0) {
                const double rise = p.mean - drift.series[k - 1].mean;
                drift_ok = drift_ok && rise <= 3.0 * p.step_se + slack * drift.series.front().mean;
            }
        }
        out["supersolution_drift"] = {{"series", series}, {"worst_increase", drift.worst_increase},
                                      {"passed", drift_ok}};
        if (!drift_ok) fail(r, "check: supermartingale drift outside tolerance");

        out["tolerance_profile"] = opt_.tolerance_profile;
        out["bias_allowance"] = slack;
        add("check.json", out.dump(2) + "\n");
        r.summary = out;
    }

    void fail(RunResult& r, const std::string& why) {
        r.exit = exit_code::diagnostic;
        r.message += (r.message.empty() ? "" : "; ") + why;
    }

    // -- output -------------------------------------------------------------
    void write_all(RunResult& r) {
        namespace fs = std::filesystem;
        if (opt_.out.empty()) throw ConfigError("--out is required");
        const fs::path dir(opt_.out);
        fs::create_directories(dir);
        nlohmann::json digests = nlohmann::json::object();
        for (const auto& [name, content] : files_) {
            std::ofstream f(dir / name, std::ios::binary);
            f << content;
            if (!f) throw ConfigError("cannot write " + (dir / name).string());
            digests[name] = sha256_hex(content);
            r.artifacts.push_back(name);
        }
        const std::string summary = nlohmann::json({{"command", command_}, {"exit", r.exit}, {"message", r.message},
                                                    {"results", r.summary}})
                                        .dump(2) +
                                    "\n";
        std::ofstream(dir / "summary.json", std::ios::binary) << summary;
        digests["summary.json"] = sha256_hex(summary);
        r.artifacts.push_back("summary.json");

        nlohmann::json manifest;
        manifest["version"] = kVersionTag;
        manifest["command"] = command_;
        manifest["config"] = fs::absolute(config_path_).lexically_normal().string();
        manifest["config_sha256"] = sha256_file(config_path_);
        manifest["seed"] = seed_;
        manifest["tolerance_profile"] = opt_.tolerance_profile;
        manifest["artifacts"] = digests;
        std::ofstream(dir / "manifest.json", std::ios::binary) << manifest.dump(2) << "\n";
    }

    nlohmann::json root_;
    std::filesystem::path config_path_;
    CliOptions opt_;
    std::string command_;
    std::uint64_t seed_ = 0;
    std::size_t workers_ = 1;
    ModelSpec model_;
    std::optional<SpatialGrid> grid_;
    std::vector<std::pair<std::string, std::string>> files_;
};

inline nlohmann::json load_json(const std::filesystem::path& p) {
    const std::string text = read_file(p);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("cannot parse " + p.string() + ": " + e.what());
    }
}

// Runs one command. Configuration problems return exit 1 and write nothing.
inline RunResult run(const CliOptions& opt) {
    try {
        if (opt.config.empty()) throw ConfigError("--config is required");
        Runner runner(load_json(opt.config), opt.config, opt);
        return runner.execute();
    } catch (const ConfigError& e) {
        return {exit_code::config, e.what(), {}, {}};
    } catch (const UsageError& e) {
        return {exit_code::config, e.what(), {}, {}};
    } catch (const DomainError& e) {
        return {exit_code::config, e.what(), {}, {}};
    } catch (const nlohmann::json::exception& e) {
        return {exit_code::config, std::string("config: ") + e.what(), {}, {}};
    }
}

// Re-runs the experiment recorded in a manifest and byte-compares artifacts.
// --seed and --workers override the recorded values.
inline RunResult reproduce(const CliOptions& opt) {
    namespace fs = std::filesystem;
    RunResult out;
    nlohmann::json manifest;
    try {
        manifest = load_json(opt.config);
        config::only_keys(manifest, "manifest",
                          {"version", "command", "config", "config_sha256", "seed", "tolerance_profile", "artifacts"});
    } catch (const std::exception& e) {
        return {exit_code::config, e.what(), {}, {}};
    }
    CliOptions again;
    again.command = manifest.at("command").get<std::string>();
    again.config = manifest.at("config").get<std::string>();
    again.seed = opt.seed ? *opt.seed : manifest.at("seed").get<std::uint64_t>();
    again.workers = opt.workers;
    again.tolerance_profile = manifest.value("tolerance_profile", std::string("default"));
    again.out = opt.out.empty() ? (fs::path(opt.config).parent_path() / "reproduce").string() : opt.out;
    if (fs::absolute(again.out) == fs::absolute(fs::path(opt.config).parent_path()))
        return {exit_code::config, "reproduce: --out must differ from the recorded directory", {}, {}};

    nlohmann::json diffs = nlohmann::json::array();
    if (sha256_file(again.config) != manifest.at("config_sha256").get<std::string>())
        diffs.push_back({{"artifact", "<config>"}, {"status", "config file changed"}});
    const auto rerun = run(again);
    if (rerun.exit == exit_code::config) return rerun;
    const auto& expected = manifest.at("artifacts");
    for (auto it = expected.begin(); it != expected.end(); ++it) {
        const fs::path p = fs::path(again.out) / it.key();
        if (!fs::exists(p)) {
            diffs.push_back({{"artifact", it.key()}, {"status", "missing"}});
            continue;
        }
        const std::string got = sha256_file(p);
        if (got != it.value().get<std::string>())
            diffs.push_back({{"artifact", it.key()}, {"status", "digest mismatch"}, {"expected", it.value()},
                             {"actual", got}});
    }
    for (const auto& name : rerun.artifacts)
        if (!expected.contains(name)) diffs.push_back({{"artifact", name}, {"status", "not in manifest"}});
    out.artifacts = rerun.artifacts;
    out.summary = {{"compared", expected.size()}, {"differences", diffs}};
    if (!diffs.empty()) {
        out.exit = exit_code::diagnostic;
        out.message = std::to_string(diffs.size()) + " artifact(s) differ";
    } else {
        out.message = "all " + std::to_string(expected.size()) + " artifacts byte-identical";
    }
    return out;
}

}  // namespace robustarb
