#pragma once

// Grid-based numerical checks of the structural model assumptions: linear
// growth of (s, b), strong-arbitrage constants, positive-definiteness of a,
// local boundedness / continuity of the coefficients, Lipschitz slope of G.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "robustarb/errors.hpp"
#include "robustarb/model.hpp"

namespace robustarb {

namespace detail {

inline double euclid(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline void require_grid(const std::vector<Point>& grid, std::size_t n, const char* who) {
    if (grid.empty()) throw UsageError(std::string(who) + ": empty sample grid");
    for (const auto& y : grid) {
        if (y.size() != n) throw UsageError(std::string(who) + ": grid point has wrong dimension");
        require_positive(y, "grid point");
    }
}

}  // namespace detail

struct LinearGrowthReport {
    double worst_ratio = 0.0;
    Point worst_point;
    double bound = 0.0;
    bool passed = false;
};

// max over the grid of (|s(y)|_F + |b(y)|) / (1 + |y|); passes when finite and
// below `bound`.
inline LinearGrowthReport check_linear_growth(const CoefficientField& field, const std::vector<Point>& grid,
                                              double bound = 10.0) {
    detail::require_grid(grid, field.dimension(), "check_linear_growth");
    LinearGrowthReport r;
    r.bound = bound;
    for (const auto& y : grid) {
        const auto c = field.at(y);
        const double ratio = (detail::euclid(c.vol) + detail::euclid(c.rate_of_return())) / (1.0 + detail::euclid(y));
        if (!std::isfinite(ratio)) {
            r.worst_ratio = std::numeric_limits<double>::infinity();
            r.worst_point = y;
            break;
        }
        if (ratio > r.worst_ratio) {
            r.worst_ratio = ratio;
            r.worst_point = y;
        }
    }
    r.passed = std::isfinite(r.worst_ratio) && r.worst_ratio <= bound;
    return r;
}

struct StrongArbitrageReport {
    double expression_i = 0.0;   // inf over grid of sum y_i a_ii/|y| - sum y_i y_j a_ij/|y|^2
    double expression_ii = 0.0;  // inf over grid of (prod y)^{1/n}/|y| (tr a - 1'a1/n)
    double constant = 0.0;       // max of the two, clipped at 0 (0 = neither lower bound holds)
};

// Both expressions are linear and nonnegative in the covariance scaling r, so
// their infimum over A(y) sits at r = 1, i.e. at the base covariance.
inline StrongArbitrageReport check_strong_arbitrage(const UncertaintySet& uset, const std::vector<Point>& grid) {
    const std::size_t n = uset.dimension();
    detail::require_grid(grid, n, "check_strong_arbitrage");
    double inf_i = std::numeric_limits<double>::infinity();
    double inf_ii = std::numeric_limits<double>::infinity();
    for (const auto& y : grid) {
        const auto a = uset.base().covariance(y);
        const double total = norm1(y);
        double first = 0.0, second = 0.0, trace = 0.0, all = 0.0, log_prod = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            first += y[i] * a[i * n + i];
            trace += a[i * n + i];
            log_prod += std::log(y[i]);
            for (std::size_t j = 0; j < n; ++j) {
                second += y[i] * y[j] * a[i * n + j];
                all += a[i * n + j];
            }
        }
        const double e1 = first / total - second / (total * total);
        const double e2 = std::exp(log_prod / static_cast<double>(n)) / total * (trace - all / static_cast<double>(n));
        inf_i = std::min(inf_i, e1);
        inf_ii = std::min(inf_ii, e2);
    }
    StrongArbitrageReport r;
    r.expression_i = inf_i;
    r.expression_ii = inf_ii;
    r.constant = std::max({0.0, inf_i, inf_ii});
    return r;
}

struct CovarianceReport {
    double min_eigenvalue = 0.0;       // smallest eigenvalue of a(y) over the grid
    double max_factor_residual = 0.0;  // max |a - s s'| entry, relative to |a|
    double min_abs_det_vol = 0.0;      // smallest |det s(y)|
    bool passed = false;
};

inline CovarianceReport check_covariance(const CoefficientField& field, const std::vector<Point>& grid) {
    const std::size_t n = field.dimension();
    detail::require_grid(grid, n, "check_covariance");
    CovarianceReport r;
    r.min_eigenvalue = std::numeric_limits<double>::infinity();
    r.min_abs_det_vol = std::numeric_limits<double>::infinity();
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    for (const auto& y : grid) {
        const auto c = field.at(y);
        const auto a_vec = c.covariance();
        Eigen::Map<const RowMat> s(c.vol.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        Eigen::Map<const RowMat> a(a_vec.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        const RowMat direct = s * s.transpose();
        const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
        r.max_factor_residual = std::max(r.max_factor_residual, (direct - a).cwiseAbs().maxCoeff() / scale);
        Eigen::SelfAdjointEigenSolver<RowMat> eig(a, Eigen::EigenvaluesOnly);
        r.min_eigenvalue = std::min(r.min_eigenvalue, eig.eigenvalues().minCoeff());
        r.min_abs_det_vol = std::min(r.min_abs_det_vol, std::fabs(s.determinant()));
    }
    r.passed = r.min_eigenvalue > 0.0 && r.min_abs_det_vol > 0.0 && r.max_factor_residual < 1e-12;
    return r;
}

// Local boundedness and continuity of the coefficients on a compact grid:
// largest |theta| and largest a-entry, plus the largest relative change of
// (s, theta) under a multiplicative perturbation y_i -> y_i (1 + delta).
struct RegularityReport {
    double max_risk = 0.0;
    double max_covariance = 0.0;
    double max_relative_jump = 0.0;
    bool passed = false;
};

inline RegularityReport check_regularity(const CoefficientField& field, const std::vector<Point>& grid,
                                         double delta = 1e-6, double jump_tolerance = 1e-3) {
    const std::size_t n = field.dimension();
    detail::require_grid(grid, n, "check_regularity");
    RegularityReport r;
    for (const auto& y : grid) {
        const auto c = field.at(y);
        for (double v : c.risk) r.max_risk = std::max(r.max_risk, std::fabs(v));
        for (double v : c.covariance()) r.max_covariance = std::max(r.max_covariance, std::fabs(v));
        for (std::size_t i = 0; i < n; ++i) {
            Point z = y;
            z[i] *= 1.0 + delta;
            const auto d = field.at(z);
            double num = 0.0, den = 0.0;
            for (std::size_t k = 0; k < c.vol.size(); ++k) {
                num = std::max(num, std::fabs(d.vol[k] - c.vol[k]));
                den = std::max(den, std::fabs(c.vol[k]));
            }
            for (std::size_t k = 0; k < n; ++k) {
                num = std::max(num, std::fabs(d.risk[k] - c.risk[k]));
                den = std::max(den, std::fabs(c.risk[k]));
            }
            r.max_relative_jump = std::max(r.max_relative_jump, num / std::max(den, 1e-300));
        }
    }
    r.passed = std::isfinite(r.max_risk) && std::isfinite(r.max_covariance) && r.max_relative_jump <= jump_tolerance;
    return r;
}

// Largest finite-difference slope |G(y + h e_i) - G(y)| / h over the grid; a
// spot check of the user's local-Lipschitz declaration.
inline double leverage_slope_bound(const Leverage& G, const std::vector<Point>& grid, double h = 1e-5) {
    if (grid.empty()) throw UsageError("leverage_slope_bound: empty sample grid");
    double worst = 0.0;
    for (const auto& y : grid) {
        require_positive(y, "grid point");
        const double g0 = G(y);
        for (std::size_t i = 0; i < y.size(); ++i) {
            Point z = y;
            z[i] += h;
            worst = std::max(worst, std::fabs(G(z) - g0) / h);
        }
    }
    return worst;
}

}  // namespace robustarb
