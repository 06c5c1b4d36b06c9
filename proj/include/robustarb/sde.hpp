#pragma once

// Log-Euler simulation of capitalizations X, the deflator L and wealth
// processes Z, all driven by the same Brownian increments.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "robustarb/csv.hpp"
#include "robustarb/errors.hpp"
#include "robustarb/model.hpp"
#include "robustarb/parallel.hpp"

namespace robustarb {

struct SimConfig {
    double horizon = 1.0;
    std::size_t steps = 100;
    std::size_t paths = 1000;
    std::uint64_t seed = 0;
    // Brownian paths are drawn at this many steps and summed down to `steps`;
    // two configs with equal resolution share the same Brownian path. 0 means
    // `steps`.
    std::size_t brownian_resolution = 0;
    // Paths are stopped once the smallest market weight falls below this
    // floor (0 disables) or once some |dlog X_i| exceeds max_log_step.
    double weight_floor = 1e-3;
    double max_log_step = 5.0;
    std::size_t workers = 1;
    std::size_t block_size = 256;
    std::string scheme = "log-euler";

    double dt() const { return horizon / static_cast<double>(steps); }
    std::size_t resolution() const { return brownian_resolution == 0 ? steps : brownian_resolution; }

    void validate() const {
        if (!(horizon > 0.0) || !std::isfinite(horizon)) throw ConfigError("sim: horizon must be positive");
        if (steps == 0) throw ConfigError("sim: steps must be >= 1");
        if (paths == 0) throw ConfigError("sim: paths must be >= 1");
        if (resolution() % steps != 0) throw ConfigError("sim: brownian_resolution must be a multiple of steps");
        if (!(weight_floor >= 0.0 && weight_floor < 1.0)) throw ConfigError("sim: weight_floor must be in [0, 1)");
        if (!(max_log_step > 0.0)) throw ConfigError("sim: max_log_step must be positive");
        if (workers == 0) throw ConfigError("sim: workers must be >= 1");
        if (scheme != "log-euler") throw ConfigError("sim: unknown scheme '" + scheme + "'");
    }
};

// Independent per-path stream derived from (root seed, path index).
inline std::uint64_t splitmix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::mt19937_64 path_engine(std::uint64_t seed, std::uint64_t path) {
    return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(path + 0x632BE59BD9B4E019ull)));
}

// Advances one path of (X, L) on the mesh t_k = k dt. Between calls to
// advance() the current coefficients s(X(t_k)), theta(X(t_k)) are available
// so callers can evaluate investment rules at the same state.
class PathStepper {
public:
    PathStepper(const CoefficientField& field, std::span<const double> x0, const SimConfig& cfg, std::uint64_t path)
        : field_(&field), cfg_(&cfg), n_(field.dimension()), engine_(path_engine(cfg.seed, path)),
          fine_per_step_(cfg.resolution() / cfg.steps),
          fine_scale_(std::sqrt(cfg.horizon / static_cast<double>(cfg.resolution()))), dt_(cfg.dt()),
          log_x_(n_), x_(n_), vol_(n_ * n_), risk_(n_), dw_(n_, 0.0), next_log_x_(n_) {
        for (std::size_t i = 0; i < n_; ++i) {
            x_[i] = x0[i];
            log_x_[i] = std::log(x0[i]);
        }
        refresh_coefficients();
    }

    std::size_t step() const { return step_; }
    double time() const { return static_cast<double>(step_) * dt_; }
    std::span<const double> x() const { return x_; }
    std::span<const double> log_x() const { return log_x_; }
    double total() const { return norm1(x_); }
    double log_deflator() const { return log_l_; }
    bool stopped() const { return stopped_; }
    // Coefficients at the current state.
    std::span<const double> vol() const { return vol_; }
    std::span<const double> risk() const { return risk_; }
    // Increment used by the most recent advance().
    std::span<const double> last_increment() const { return dw_; }

    void advance() {
        ++step_;
        if (stopped_) return;
        std::fill(dw_.begin(), dw_.end(), 0.0);
        for (std::size_t f = 0; f < fine_per_step_; ++f)
            for (std::size_t i = 0; i < n_; ++i) dw_[i] += fine_scale_ * normal_(engine_);

        double risk_dw = 0.0, risk_sq = 0.0;
        for (std::size_t k = 0; k < n_; ++k) {
            risk_dw += risk_[k] * dw_[k];
            risk_sq += risk_[k] * risk_[k];
        }
        bool capped = false;
        for (std::size_t i = 0; i < n_; ++i) {
            double drift = 0.0, half_var = 0.0, noise = 0.0;
            for (std::size_t k = 0; k < n_; ++k) {
                const double s = vol_[i * n_ + k];
                drift += s * risk_[k];
                half_var += s * s;
                noise += s * dw_[k];
            }
            const double dlog = (drift - 0.5 * half_var) * dt_ + noise;
            if (std::fabs(dlog) > cfg_->max_log_step) capped = true;
            next_log_x_[i] = log_x_[i] + dlog;
        }
        if (capped) {
            stopped_ = true;
            ++capped_count_;
            return;
        }
        log_l_ += -risk_dw - 0.5 * risk_sq * dt_;
        double total = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            log_x_[i] = next_log_x_[i];
            x_[i] = std::exp(log_x_[i]);
            total += x_[i];
        }
        if (cfg_->weight_floor > 0.0) {
            for (std::size_t i = 0; i < n_; ++i)
                if (x_[i] < cfg_->weight_floor * total) stopped_ = true;
        }
        if (!stopped_) refresh_coefficients();
    }

    std::size_t capped_count() const { return capped_count_; }

private:
    void refresh_coefficients() {
        field_->evaluate(x_, vol_, risk_);
        bool finite = true;
        for (double v : vol_) finite = finite && std::isfinite(v);
        for (double v : risk_) finite = finite && std::isfinite(v);
        for (double v : x_) finite = finite && std::isfinite(v) && v > 0.0;
        if (!finite) throw SimulationError("non-finite coefficient evaluation", dump());
    }

    std::string dump() const {
        std::ostringstream os;
        os.precision(17);
        os << "step=" << step_ << " t=" << time() << " X=(";
        for (std::size_t i = 0; i < n_; ++i) os << (i ? "," : "") << x_[i];
        os << ") logL=" << log_l_ << " s=(";
        for (std::size_t i = 0; i < vol_.size(); ++i) os << (i ? "," : "") << vol_[i];
        os << ") theta=(";
        for (std::size_t i = 0; i < n_; ++i) os << (i ? "," : "") << risk_[i];
        os << ")";
        return os.str();
    }

    const CoefficientField* field_;
    const SimConfig* cfg_;
    std::size_t n_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::size_t fine_per_step_;
    double fine_scale_;
    double dt_;
    std::size_t step_ = 0;
    bool stopped_ = false;
    std::size_t capped_count_ = 0;
    double log_l_ = 0.0;
    std::vector<double> log_x_, x_, vol_, risk_, dw_, next_log_x_;
};

// ---------------------------------------------------------------------------
// Investment rules and wealth
// ---------------------------------------------------------------------------

class InvestmentRule {
public:
    // Writes the proportions pi(t, y) of current wealth held in each asset.
    using Evaluator = std::function<void(double t, std::span<const double> y, std::span<double> pi)>;

    struct Flags {
        bool bounded = false;
        bool portfolio = false;  // sum pi_i = 1
        bool long_only = false;  // pi_i >= 0
    };

    InvestmentRule() = default;
    InvestmentRule(std::size_t n, Evaluator eval, Flags flags, std::string name)
        : n_(n), eval_(std::move(eval)), flags_(flags), name_(std::move(name)) {}

    // mu_i = y_i / |y|_1
    static InvestmentRule market(std::size_t n) {
        return InvestmentRule(
            n,
            [](double, std::span<const double> y, std::span<double> pi) {
                const double total = norm1(y);
                for (std::size_t i = 0; i < y.size(); ++i) pi[i] = y[i] / total;
            },
            {.bounded = true, .portfolio = true, .long_only = true}, "market");
    }

    static InvestmentRule cash(std::size_t n) {
        return InvestmentRule(
            n, [](double, std::span<const double>, std::span<double> pi) { std::fill(pi.begin(), pi.end(), 0.0); },
            {.bounded = true, .portfolio = false, .long_only = true}, "cash");
    }

    static InvestmentRule constant(std::vector<double> weights) {
        double sum = 0.0;
        bool nonneg = true;
        for (double w : weights) {
            sum += w;
            nonneg = nonneg && w >= 0.0;
        }
        const std::size_t n = weights.size();
        return InvestmentRule(
            n, [weights](double, std::span<const double>, std::span<double> pi) {
                std::copy(weights.begin(), weights.end(), pi.begin());
            },
            {.bounded = true, .portfolio = std::fabs(sum - 1.0) < 1e-12, .long_only = nonneg}, "constant");
    }

    std::size_t dimension() const { return n_; }
    const Flags& flags() const { return flags_; }
    const std::string& name() const { return name_; }

    void operator()(double t, std::span<const double> y, std::span<double> pi) const { eval_(t, y, pi); }

    // True when the declared flags hold on every sampled (t, y).
    bool flags_consistent(const std::vector<std::pair<double, Point>>& samples, double tol = 1e-10) const {
        std::vector<double> pi(n_);
        for (const auto& [t, y] : samples) {
            (*this)(t, y, pi);
            double sum = 0.0;
            for (double p : pi) {
                if (!std::isfinite(p)) return false;
                sum += p;
                if (flags_.long_only && p < -tol) return false;
            }
            if (flags_.portfolio && std::fabs(sum - 1.0) > tol) return false;
        }
        return true;
    }

private:
    std::size_t n_ = 0;
    Evaluator eval_;
    Flags flags_{};
    std::string name_;
};

// Self-financing wealth rebalanced to pi at every mesh point:
//   Z_{k+1} = Z_k (1 + sum_i pi_i (X_i(t_{k+1}) / X_i(t_k) - 1)).
// With pi = mu this reproduces v X(t_k)/X(0) exactly. A non-positive bracket
// ruins the path (log wealth -inf).
class WealthTracker {
public:
    WealthTracker(const InvestmentRule& rule, double v) : rule_(&rule), log_z_(std::log(v)), pi_(rule.dimension()) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("wealth: initial wealth must be positive");
    }

    // Call before stepper.advance(); fixes the proportions at the current state.
    void prepare(const PathStepper& s) {
        if (ruined_ || s.stopped()) return;
        (*rule_)(s.time(), s.x(), pi_);
        for (double p : pi_)
            if (!std::isfinite(p)) {
                std::ostringstream os;
                os.precision(17);
                os << "t=" << s.time() << " X=(";
                for (std::size_t i = 0; i < s.x().size(); ++i) os << (i ? "," : "") << s.x()[i];
                os << ")";
                throw SimulationError("investment rule '" + rule_->name() + "' returned a non-finite value", os.str());
            }
        prev_log_x_.assign(s.log_x().begin(), s.log_x().end());
        armed_ = true;
    }

    // Call after stepper.advance().
    void update(const PathStepper& s) {
        if (!armed_) return;
        armed_ = false;
        // The step that stops a path by the weight floor still moves X, so it
        // moves Z too; a capped step leaves X alone and growth is exactly 1.
        if (ruined_) return;
        double growth = 1.0;
        for (std::size_t i = 0; i < pi_.size(); ++i) growth += pi_[i] * std::expm1(s.log_x()[i] - prev_log_x_[i]);
        if (!(growth > 0.0)) {
            ruined_ = true;
            log_z_ = -std::numeric_limits<double>::infinity();
            return;
        }
        log_z_ += std::log(growth);
    }

    double log_wealth() const { return log_z_; }
    bool ruined() const { return ruined_; }

private:
    const InvestmentRule* rule_;
    double log_z_;
    bool ruined_ = false;
    bool armed_ = false;
    std::vector<double> pi_;
    std::vector<double> prev_log_x_;
};

// ---------------------------------------------------------------------------
// Materialized bundles
// ---------------------------------------------------------------------------

struct PathBundle {
    CoefficientField field;
    SimConfig config;
    Point x0;
    std::size_t n = 0;
    // [path][k][i] for k = 0..steps
    std::vector<double> log_x;
    // [path][k]
    std::vector<double> log_deflator;
    // [path][k][i] for k = 0..steps-1 (increment from t_k to t_{k+1})
    std::vector<double> increments;
    // first mesh index at which the path is stopped; steps + 1 if never
    std::vector<std::size_t> stopped_at;

    std::size_t paths() const { return config.paths; }
    std::size_t steps() const { return config.steps; }
    double time(std::size_t k) const { return static_cast<double>(k) * config.dt(); }
    std::size_t state_index(std::size_t p, std::size_t k) const { return (p * (steps() + 1) + k) * n; }
    double cap(std::size_t p, std::size_t k, std::size_t i) const {
        return std::exp(log_x[state_index(p, k) + i]);
    }
    double deflator(std::size_t p, std::size_t k) const { return std::exp(log_deflator[p * (steps() + 1) + k]); }
    bool alive(std::size_t p, std::size_t k) const { return k < stopped_at[p]; }
};

inline PathBundle simulate(const CoefficientField& field, std::span<const double> x, const SimConfig& cfg) {
    cfg.validate();
    const std::size_t n = field.dimension();
    if (x.size() != n) throw UsageError("simulate: initial configuration has wrong dimension");
    require_positive(x, "initial configuration");
    PathBundle b;
    b.field = field;
    b.config = cfg;
    b.x0.assign(x.begin(), x.end());
    b.n = n;
    const std::size_t m = cfg.steps;
    b.log_x.assign(cfg.paths * (m + 1) * n, 0.0);
    b.log_deflator.assign(cfg.paths * (m + 1), 0.0);
    b.increments.assign(cfg.paths * m * n, 0.0);
    b.stopped_at.assign(cfg.paths, m + 1);
    for_each_block(cfg.paths, cfg.block_size, cfg.workers, [&](std::size_t, std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            PathStepper s(field, x, cfg, p);
            auto record = [&](std::size_t k) {
                std::copy(s.log_x().begin(), s.log_x().end(), b.log_x.begin() + static_cast<std::ptrdiff_t>(b.state_index(p, k)));
                b.log_deflator[p * (m + 1) + k] = s.log_deflator();
            };
            record(0);
            for (std::size_t k = 0; k < m; ++k) {
                const bool was_stopped = s.stopped();
                s.advance();
                if (!was_stopped) {
                    std::copy(s.last_increment().begin(), s.last_increment().end(),
                              b.increments.begin() + static_cast<std::ptrdiff_t>((p * m + k) * n));
                }
                if (s.stopped() && b.stopped_at[p] == m + 1) b.stopped_at[p] = k + 1;
                record(k + 1);
            }
        }
    });
    return b;
}

// mu_i(t_k) per path, laid out like PathBundle::log_x; rows renormalized so
// that sum_i mu_i = 1.
inline std::vector<double> market_weights(const PathBundle& b) {
    std::vector<double> mu(b.log_x.size());
    const std::size_t rows = b.log_x.size() / b.n;
    for (std::size_t r = 0; r < rows; ++r) {
        double total = 0.0;
        for (std::size_t i = 0; i < b.n; ++i) {
            mu[r * b.n + i] = std::exp(b.log_x[r * b.n + i]);
            total += mu[r * b.n + i];
        }
        for (std::size_t i = 0; i < b.n; ++i) mu[r * b.n + i] /= total;
    }
    return mu;
}

// log Z(t_k) per path ([path][k]) for `rule` started from wealth v, using the
// bundle's own capitalization moves. Wealth freezes with X once a path stops.
inline std::vector<double> wealth_path(const PathBundle& b, const InvestmentRule& rule, double v) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("wealth_path: initial wealth must be positive");
    if (rule.dimension() != b.n) throw UsageError("wealth_path: rule dimension does not match the bundle");
    const std::size_t m = b.steps();
    std::vector<double> out(b.paths() * (m + 1));
    std::vector<double> pi(b.n), y(b.n);
    for (std::size_t p = 0; p < b.paths(); ++p) {
        double log_z = std::log(v);
        out[p * (m + 1)] = log_z;
        for (std::size_t k = 0; k < m; ++k) {
            if (b.alive(p, k) && std::isfinite(log_z)) {
                for (std::size_t i = 0; i < b.n; ++i) y[i] = b.cap(p, k, i);
                rule(b.time(k), y, pi);
                double growth = 1.0;
                for (std::size_t i = 0; i < b.n; ++i) {
                    if (!std::isfinite(pi[i])) throw SimulationError("investment rule returned a non-finite value", "");
                    growth += pi[i] * std::expm1(b.log_x[b.state_index(p, k + 1) + i] - b.log_x[b.state_index(p, k) + i]);
                }
                log_z = growth > 0.0 ? log_z + std::log(growth) : -std::numeric_limits<double>::infinity();
            }
            out[p * (m + 1) + k + 1] = log_z;
        }
    }
    return out;
}

// One row per (path, t_k), path-major: t, X_1..X_n, logL[, logZ].
inline void write_bundle_csv(std::ostream& os, const PathBundle& b, const std::vector<double>* log_wealth = nullptr) {
    csv::Writer w(os);
    std::vector<std::string> cols{"t"};
    for (std::size_t i = 0; i < b.n; ++i) cols.push_back("X_" + std::to_string(i + 1));
    cols.push_back("logL");
    if (log_wealth) cols.push_back("logZ");
    w.header(cols);
    const std::size_t m = b.steps();
    std::vector<double> row;
    for (std::size_t p = 0; p < b.paths(); ++p)
        for (std::size_t k = 0; k <= m; ++k) {
            row.clear();
            row.push_back(b.time(k));
            for (std::size_t i = 0; i < b.n; ++i) row.push_back(b.cap(p, k, i));
            row.push_back(b.log_deflator[p * (m + 1) + k]);
            if (log_wealth) row.push_back((*log_wealth)[p * (m + 1) + k]);
            w.row(row);
        }
}

}  // namespace robustarb
