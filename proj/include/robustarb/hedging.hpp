#pragma once

// Investment rules generated by a positive grid function U,
//   pi_i(t, y) = y_i D_i log U(T - t, y) + mu_i(y),
// and pathwise super-replication backtests of the market.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <ostream>
#include <span>
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

class GeneratedRule {
public:
    // y_i D_i log U = d log U / d xi_i, differenced on the nodes (centered
    // inside, one-sided at the edges) and interpolated like U itself.
    GeneratedRule(const GridFunction& U, double horizon, double portfolio_tolerance = 1e-6)
        : U_(std::make_shared<const GridFunction>(U)), T_(horizon) {
        if (!(horizon > 0.0) || horizon > U.horizon() * (1.0 + 1e-12))
            throw ConfigError("generated rule: horizon must lie in (0, U's time extent]");
        for (const auto& s : U.slices())
            for (double v : s)
                if (!(v > 0.0)) throw DomainError("generated rule: U must be positive on its grid");
        const auto& g = U.grid();
        const std::size_t n = g.dimension();
        grad_.assign(n, std::vector<std::vector<double>>(U.slice_count(), std::vector<double>(g.size())));
        for (std::size_t j = 0; j < U.slice_count(); ++j) {
            const auto& s = U.slice(j);
            for (std::size_t f = 0; f < g.size(); ++f) {
                const auto idx = g.multi(f);
                double sum = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t st = g.stride(i);
                    const double h = g.spacing(i);
                    double d;
                    if (idx[i] == 0)
                        d = (std::log(s[f + st]) - std::log(s[f])) / h;
                    else if (idx[i] + 1 == g.nodes(i))
                        d = (std::log(s[f]) - std::log(s[f - st])) / h;
                    else
                        d = (std::log(s[f + st]) - std::log(s[f - st])) / (2.0 * h);
                    grad_[i][j][f] = d;
                    sum += d;
                }
                scale_defect_ = std::max(scale_defect_, std::fabs(sum));
            }
        }
        section_ = U.extension() == Extension::section;
        portfolio_ = section_ || scale_defect_ <= portfolio_tolerance;
    }

    const GridFunction& source() const { return *U_; }
    double horizon() const { return T_; }
    // Largest |sum_i y_i D_i log U| over the nodes; zero exactly when U is
    // scale-invariant. Under the section extension the rule differentiates the
    // degree-0 extension instead, which is a portfolio whatever the defect.
    double scale_defect() const { return scale_defect_; }
    bool portfolio() const { return portfolio_; }
    double initial_value(std::span<const double> x) const { return U_->value(T_, x); }
    bool covers(std::span<const double> y) const { return U_->covers(y); }

    void operator()(double t, std::span<const double> y, std::span<double> pi) const {
        const double h = std::clamp(T_ - t, 0.0, T_);
        const double total = norm1(y);
        double mean = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) {
            pi[i] = U_->interpolate(grad_[i], h, y);
            mean += pi[i] / static_cast<double>(y.size());
        }
        // Chain rule through the shift onto the central section.
        if (!section_) mean = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) pi[i] += y[i] / total - mean;
    }

    InvestmentRule rule() const {
        auto self = std::make_shared<GeneratedRule>(*this);
        return InvestmentRule(
            U_->grid().dimension(),
            [self](double t, std::span<const double> y, std::span<double> pi) { (*self)(t, y, pi); },
            {.bounded = true, .portfolio = portfolio_, .long_only = false}, "generated");
    }

private:
    std::shared_ptr<const GridFunction> U_;
    double T_;
    std::vector<std::vector<std::vector<double>>> grad_;  // [axis][slice][node]
    double scale_defect_ = 0.0;
    bool section_ = false;
    bool portfolio_ = false;
};

inline GeneratedRule rule_from_solution(const GridFunction& U, double horizon) { return GeneratedRule(U, horizon); }

struct BacktestPath {
    double wealth = 0.0;  // Z(T)
    double market = 0.0;  // X(T)
    double ratio = 0.0;   // Z(T) / X(T)
    bool excluded = false;  // left the domain of U
    bool stopped = false;   // localized before T (values at the stopping time)
};

struct BacktestReport {
    double v = 0.0;
    double epsilon = 0.0;
    std::size_t paths = 0;
    std::size_t excluded = 0;
    std::size_t stopped = 0;
    std::size_t evaluated = 0;
    double covered_fraction = 0.0;  // Z(T) >= X(T)(1 - eps) among evaluated paths
    double shortfall_rate = 0.0;    // 1 - covered_fraction
    double worst_shortfall = 0.0;   // max (1 - Z/X)
    double mean_shortfall = 0.0;    // mean (1 - Z/X)^+
    std::vector<BacktestPath> per_path;
};

// Simulates X and Z on shared increments, starting from v (default
// U(T, x) |x|_1). The rule's source must cover x.
inline BacktestReport backtest_superreplication(const GeneratedRule& rule, const CoefficientField& field, double T,
                                                std::span<const double> x, SimConfig cfg, double epsilon,
                                                double v = std::numeric_limits<double>::quiet_NaN()) {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("backtest: epsilon must be in [0, 1)");
    if (!(T > 0.0) || T > rule.horizon() * (1.0 + 1e-12)) throw ConfigError("backtest: T must lie in (0, rule horizon]");
    if (x.size() != field.dimension() || x.size() != rule.source().grid().dimension())
        throw UsageError("backtest: dimension mismatch");
    require_positive(x, "initial configuration");
    if (!rule.covers(x)) throw ConfigError("backtest: x lies outside the domain of U");
    cfg.horizon = T;
    cfg.validate();

    BacktestReport r;
    r.v = std::isnan(v) ? rule.initial_value(x) * norm1(x) : v;
    r.epsilon = epsilon;
    r.paths = cfg.paths;
    r.per_path.resize(cfg.paths);
    const InvestmentRule inv = rule.rule();
    for_each_block(cfg.paths, cfg.block_size, cfg.workers, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            PathStepper s(field, x, cfg, p);
            WealthTracker z(inv, r.v);
            BacktestPath& out = r.per_path[p];
            for (std::size_t k = 0; k < cfg.steps && !s.stopped(); ++k) {
                if (!rule.covers(s.x())) {
                    out.excluded = true;
                    break;
                }
                z.prepare(s);
                s.advance();
                z.update(s);
            }
            out.stopped = s.stopped();
            out.market = s.total();
            out.wealth = std::exp(z.log_wealth());
            out.ratio = out.wealth / out.market;
        }
    });
    double shortfall_sum = 0.0;
    std::size_t covered = 0;
    for (const auto& p : r.per_path) {
        if (p.excluded) {
            ++r.excluded;
            continue;
        }
        if (p.stopped) ++r.stopped;
        ++r.evaluated;
        const double shortfall = 1.0 - p.ratio;
        r.worst_shortfall = r.evaluated == 1 ? shortfall : std::max(r.worst_shortfall, shortfall);
        shortfall_sum += std::max(shortfall, 0.0);
        if (p.ratio >= 1.0 - epsilon) ++covered;
    }
    if (r.evaluated > 0) {
        r.covered_fraction = static_cast<double>(covered) / static_cast<double>(r.evaluated);
        r.shortfall_rate = 1.0 - r.covered_fraction;
        r.mean_shortfall = shortfall_sum / static_cast<double>(r.evaluated);
    }
    return r;
}

struct RelativeReturnReport {
    std::vector<double> levels;
    std::vector<double> quantiles;       // of Z(T)/X(T)
    std::vector<double> unit_quantiles;  // same, rescaled to v = |x|_1 (one unit of the market)
    double mean_ratio = 0.0;
    double headline = 0.0;  // 1 / U(T, x): best relative return per unit of market
};

// Empirical quantiles (type 7) of Z/X over the evaluated paths.
inline RelativeReturnReport relative_return_report(const BacktestReport& b, std::span<const double> x,
                                                   const std::vector<double>& levels = {0.0, 0.01, 0.05, 0.25, 0.5,
                                                                                        0.75, 0.95, 0.99, 1.0}) {
    std::vector<double> ratios;
    for (const auto& p : b.per_path)
        if (!p.excluded) ratios.push_back(p.ratio);
    if (ratios.empty()) throw UsageError("relative_return_report: no evaluated paths");
    std::sort(ratios.begin(), ratios.end());
    RelativeReturnReport r;
    r.levels = levels;
    const double unit = norm1(x) / b.v;
    for (double q : levels) {
        if (!(q >= 0.0 && q <= 1.0)) throw UsageError("relative_return_report: quantile level outside [0, 1]");
        const double pos = q * static_cast<double>(ratios.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, ratios.size() - 1);
        const double val = ratios[lo] + (pos - static_cast<double>(lo)) * (ratios[hi] - ratios[lo]);
        r.quantiles.push_back(val);
        r.unit_quantiles.push_back(val * unit);
    }
    double sum = 0.0;
    for (double v : ratios) sum += v;
    r.mean_ratio = sum / static_cast<double>(ratios.size());
    r.headline = unit;
    return r;
}

inline void write_backtest_csv(std::ostream& os, const BacktestReport& r) {
    csv::Writer w(os);
    w.header({"path", "Z", "X", "ratio", "status"});
    for (std::size_t p = 0; p < r.per_path.size(); ++p) {
        const auto& q = r.per_path[p];
        w.row_strings({std::to_string(p), csv::format(q.wealth), csv::format(q.market), csv::format(q.ratio),
                       q.excluded ? "excluded" : (q.stopped ? "stopped" : "ok")});
    }
}

inline nlohmann::json to_json(const BacktestReport& r) {
    return {{"v", r.v},
            {"epsilon", r.epsilon},
            {"paths", r.paths},
            {"excluded", r.excluded},
            {"stopped", r.stopped},
            {"evaluated", r.evaluated},
            {"covered_fraction", r.covered_fraction},
            {"shortfall_rate", r.shortfall_rate},
            {"worst_shortfall", r.worst_shortfall},
            {"mean_shortfall", r.mean_shortfall}};
}

inline nlohmann::json to_json(const RelativeReturnReport& r) {
    return {{"levels", r.levels},
            {"quantiles", r.quantiles},
            {"unit_quantiles", r.unit_quantiles},
            {"mean_ratio", r.mean_ratio},
            {"headline", r.headline}};
}

}  // namespace robustarb
