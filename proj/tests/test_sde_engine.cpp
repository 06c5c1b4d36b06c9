#include <gtest/gtest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "robustarb/csv.hpp"
#include "robustarb/model.hpp"
#include "robustarb/sde.hpp"

using namespace robustarb;

namespace {

// Bounded, non-constant one-asset field.
CoefficientField wavy_field() {
    return CoefficientField(
        1,
        [](std::span<const double> y, std::span<double> s, std::span<double> th) {
            s[0] = 0.3 + 0.1 * std::sin(std::log(y[0]));
            th[0] = 0.2 * std::cos(std::log(y[0]));
        },
        {.diagonal = true}, "wavy");
}

SimConfig config(std::size_t paths, std::size_t steps, double T = 1.0, std::uint64_t seed = 11) {
    SimConfig c;
    c.paths = paths;
    c.steps = steps;
    c.horizon = T;
    c.seed = seed;
    return c;
}

struct Stats {
    double mean = 0.0, se = 0.0;
};

Stats stats(const std::vector<double>& v) {
    double s = 0.0, q = 0.0;
    for (double x : v) {
        s += x;
        q += x * x;
    }
    const double n = double(v.size());
    Stats r;
    r.mean = s / n;
    r.se = std::sqrt(std::max(0.0, (q - n * r.mean * r.mean) / (n - 1.0)) / n);
    return r;
}

}  // namespace

TEST(SimConfigTest, Validation) {
    auto c = config(10, 10);
    EXPECT_NO_THROW(c.validate());
    c.steps = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = config(10, 10);
    c.brownian_resolution = 15;
    EXPECT_THROW(c.validate(), ConfigError);
    c = config(10, 10);
    c.horizon = 0.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = config(10, 10);
    c.scheme = "milstein";
    EXPECT_THROW(c.validate(), ConfigError);
    c = config(0, 10);
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Simulate, InitialStateAndPositivity) {
    const Point x{2.0, 3.0};
    const auto b = simulate(vsm_field(2, 1.0, 1.0), x, config(200, 50));
    for (std::size_t p = 0; p < b.paths(); ++p) {
        EXPECT_DOUBLE_EQ(b.cap(p, 0, 0), 2.0);
        EXPECT_DOUBLE_EQ(b.cap(p, 0, 1), 3.0);
        EXPECT_EQ(b.deflator(p, 0), 1.0);
        for (std::size_t k = 0; k <= b.steps(); ++k)
            for (std::size_t i = 0; i < 2; ++i) {
                EXPECT_GT(b.cap(p, k, i), 0.0);
                EXPECT_TRUE(std::isfinite(b.cap(p, k, i)));
            }
    }
    EXPECT_THROW(simulate(vsm_field(2, 1.0, 1.0), Point{1.0, 0.0}, config(1, 1)), DomainError);
    EXPECT_THROW(simulate(vsm_field(2, 1.0, 1.0), Point{1.0}, config(1, 1)), UsageError);
}

TEST(Simulate, BitIdenticalAcrossRunsAndWorkers) {
    const Point x{1.0, 1.0};
    auto c = config(700, 40);
    c.block_size = 64;
    const auto a = simulate(vsm_field(2, 1.0, 1.0), x, c);
    const auto b = simulate(vsm_field(2, 1.0, 1.0), x, c);
    c.workers = 4;
    const auto d = simulate(vsm_field(2, 1.0, 1.0), x, c);
    EXPECT_EQ(a.log_x, b.log_x);
    EXPECT_EQ(a.log_x, d.log_x);
    EXPECT_EQ(a.log_deflator, d.log_deflator);
    EXPECT_EQ(a.increments, d.increments);
    EXPECT_EQ(a.stopped_at, d.stopped_at);
    c.seed = 12;
    const auto e = simulate(vsm_field(2, 1.0, 1.0), x, c);
    EXPECT_NE(a.log_x, e.log_x);
}

TEST(Simulate, IncrementsAreStandardGaussianScaled) {
    auto c = config(4000, 8, 2.0);
    const auto b = simulate(constant_field(2, {0.2, 0, 0, 0.2}, {0, 0}), Point{1.0, 1.0}, c);
    std::vector<double> z;
    for (double v : b.increments) z.push_back(v / std::sqrt(c.dt()));
    const auto s = stats(z);
    EXPECT_NEAR(s.mean, 0.0, 4.0 * s.se);
    double q = 0.0;
    for (double v : z) q += v * v;
    EXPECT_NEAR(q / double(z.size()), 1.0, 0.03);
}

TEST(Simulate, OneAssetDeflatedCapitalizationHasMeanX) {
    for (const auto& field : {wavy_field(), constant_field(1, {0.4}, {0.5}), vsm_field(1, 1.0, 1.0)}) {
        const auto b = simulate(field, Point{3.0}, config(20000, 50));
        std::vector<double> lx;
        for (std::size_t p = 0; p < b.paths(); ++p) lx.push_back(b.deflator(p, b.steps()) * b.cap(p, b.steps(), 0));
        const auto s = stats(lx);
        EXPECT_NEAR(s.mean, 3.0, 3.0 * s.se) << field.description();
    }
}

TEST(Simulate, VsmTotalCapitalizationIsGeometric) {
    // Summing the SDE: dX = X (n g1 g2^2 dt + g2 dB) for a Brownian motion B.
    const double g1 = 0.5, g2 = 2.0, T = 0.5;
    auto c = config(20000, 100, T);
    c.weight_floor = 0.0;
    const auto b = simulate(vsm_field(2, g1, g2), Point{1.0, 2.0}, c);
    std::vector<double> total;
    for (std::size_t p = 0; p < b.paths(); ++p) total.push_back(b.cap(p, b.steps(), 0) + b.cap(p, b.steps(), 1));
    const auto s = stats(total);
    EXPECT_NEAR(s.mean, 3.0 * std::exp(2.0 * g1 * g2 * g2 * T), 3.0 * s.se);
}

TEST(Simulate, StrongErrorDecreasesUnderRefinement) {
    const auto field = wavy_field();
    const std::size_t R = 256;
    auto fine = config(2000, R);
    const auto ref = simulate(field, Point{1.0}, fine);
    std::vector<double> errors;
    for (std::size_t m : {8u, 16u, 32u, 64u}) {
        auto c = config(2000, m);
        c.brownian_resolution = R;
        const auto b = simulate(field, Point{1.0}, c);
        double e = 0.0;
        for (std::size_t p = 0; p < b.paths(); ++p)
            e += std::fabs(b.cap(p, m, 0) - ref.cap(p, R, 0));
        errors.push_back(e / double(b.paths()));
    }
    for (std::size_t k = 1; k < errors.size(); ++k) EXPECT_LT(errors[k], errors[k - 1]);
    // empirical order over three halvings
    EXPECT_GT(std::log2(errors.front() / errors.back()) / 3.0, 0.5);
}

TEST(Simulate, CoarseIncrementsAreSumsOfFineOnes) {
    auto coarse = config(50, 4);
    coarse.brownian_resolution = 16;
    auto fine = config(50, 16);
    const auto field = constant_field(1, {0.3}, {0.0});
    const auto a = simulate(field, Point{1.0}, coarse);
    const auto b = simulate(field, Point{1.0}, fine);
    for (std::size_t p = 0; p < 50; ++p)
        for (std::size_t k = 0; k < 4; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < 4; ++j) s += b.increments[p * 16 + 4 * k + j];
            EXPECT_NEAR(a.increments[p * 4 + k], s, 1e-14);
        }
}

TEST(MarketWeights, Basics) {
    const auto b = simulate(vsm_field(2, 1.0, 1.0), Point{2.0, 3.0}, config(20, 10));
    const auto mu = market_weights(b);
    EXPECT_NEAR(mu[0], 0.4, 1e-15);
    EXPECT_NEAR(mu[1], 0.6, 1e-15);
    for (std::size_t r = 0; r < mu.size() / 2; ++r) EXPECT_NEAR(mu[2 * r] + mu[2 * r + 1], 1.0, 1e-15);
    const auto one = market_weights(simulate(wavy_field(), Point{4.0}, config(5, 5)));
    for (double v : one) EXPECT_EQ(v, 1.0);
}

TEST(WealthPath, MarketPortfolioReproducesTotalCapitalization) {
    const Point x{1.0, 2.5};
    const auto b = simulate(vsm_field(2, 1.0, 1.0), x, config(300, 100));
    const auto logz = wealth_path(b, InvestmentRule::market(2), 3.5);
    for (std::size_t p = 0; p < b.paths(); ++p)
        for (std::size_t k = 0; k <= b.steps(); ++k) {
            const double X = b.cap(p, k, 0) + b.cap(p, k, 1);
            EXPECT_NEAR(std::exp(logz[p * (b.steps() + 1) + k]) / X, 1.0, 1e-12);
        }
}

TEST(WealthPath, CashAndSingleAsset) {
    const auto b = simulate(vsm_field(2, 1.0, 1.0), Point{1.0, 1.0}, config(50, 20));
    for (double v : wealth_path(b, InvestmentRule::cash(2), 2.0)) EXPECT_DOUBLE_EQ(v, std::log(2.0));

    const auto one = simulate(wavy_field(), Point{2.0}, config(50, 40));
    const auto logz = wealth_path(one, InvestmentRule::constant({1.0}), 5.0);
    for (std::size_t p = 0; p < one.paths(); ++p)
        EXPECT_NEAR(std::exp(logz[p * 41 + 40]) / 5.0, one.cap(p, 40, 0) / 2.0, 1e-12 * one.cap(p, 40, 0));
    EXPECT_THROW(wealth_path(b, InvestmentRule::cash(2), 0.0), ConfigError);
}

TEST(WealthPath, DeflatedWealthDriftIsNonPositive) {
    const auto b = simulate(vsm_field(2, 1.0, 1.0), Point{1.0, 1.0}, config(20000, 40));
    const auto logz = wealth_path(b, InvestmentRule::constant({0.3, 0.5}), 1.0);
    double prev = 1.0, prev_se = 0.0;
    for (std::size_t k = 10; k <= b.steps(); k += 10) {
        std::vector<double> lz;
        for (std::size_t p = 0; p < b.paths(); ++p)
            lz.push_back(b.alive(p, k) ? b.deflator(p, k) * std::exp(logz[p * 41 + k]) : 0.0);
        const auto s = stats(lz);
        EXPECT_LE(s.mean, prev + 3.0 * std::hypot(s.se, prev_se));
        prev = s.mean;
        prev_se = s.se;
    }
}

TEST(InvestmentRuleTest, FlagsConsistency) {
    std::vector<std::pair<double, Point>> samples{{0.0, {1.0, 2.0}}, {0.5, {3.0, 0.1}}};
    EXPECT_TRUE(InvestmentRule::market(2).flags_consistent(samples));
    EXPECT_TRUE(InvestmentRule::cash(2).flags_consistent(samples));
    EXPECT_TRUE(InvestmentRule::constant({0.5, 0.5}).flags().portfolio);
    EXPECT_FALSE(InvestmentRule::constant({-0.5, 0.5}).flags().long_only);
    InvestmentRule liar(2, [](double, std::span<const double>, std::span<double> pi) { pi[0] = pi[1] = 0.7; },
                        {.bounded = true, .portfolio = true, .long_only = true}, "liar");
    EXPECT_FALSE(liar.flags_consistent(samples));
}

TEST(PathStepperTest, NonFiniteCoefficientsAbortWithState) {
    CoefficientField bad(
        1,
        [](std::span<const double> y, std::span<double> s, std::span<double> th) {
            s[0] = y[0] > 1.05 || y[0] < 0.95 ? std::nan("") : 0.5;
            th[0] = 0.0;
        },
        {.diagonal = true}, "bad");
    try {
        simulate(bad, Point{1.0}, config(100, 100));
        FAIL() << "expected SimulationError";
    } catch (const SimulationError& e) {
        EXPECT_NE(e.state().find("X=("), std::string::npos);
        EXPECT_NE(e.state().find("step="), std::string::npos);
    }
}

TEST(PathStepperTest, WeightFloorStopsPath) {
    auto c = config(1, 10);
    c.weight_floor = 0.2;
    PathStepper s(vsm_field(2, 1.0, 1.0), Point{1.0, 9.0}, c, 0);
    s.advance();
    EXPECT_TRUE(s.stopped());
    const auto log_l = s.log_deflator();
    const Point frozen(s.x().begin(), s.x().end());
    s.advance();
    EXPECT_EQ(s.log_deflator(), log_l);
    EXPECT_EQ(Point(s.x().begin(), s.x().end()), frozen);
}

TEST(PathStepperTest, WealthTrackerMatchesWealthPath) {
    const Point x{1.0, 2.0};
    auto c = config(40, 30);
    const auto field = vsm_field(2, 1.0, 1.5);
    const auto b = simulate(field, x, c);
    const auto rule = InvestmentRule::constant({0.7, 0.2});
    const auto logz = wealth_path(b, rule, 2.0);
    for (std::size_t p = 0; p < c.paths; ++p) {
        PathStepper s(field, x, c, p);
        WealthTracker z(rule, 2.0);
        for (std::size_t k = 0; k < c.steps; ++k) {
            z.prepare(s);
            s.advance();
            z.update(s);
        }
        EXPECT_NEAR(z.log_wealth(), logz[p * 31 + 30], 1e-12);
    }
}

TEST(WealthPath, MarketPortfolioTracksStoppedPaths) {
    // A high floor stops many paths; the stopping step still moves X and Z.
    const Point x{1.0, 2.5};
    auto c = config(300, 100);
    c.weight_floor = 0.25;
    const auto field = vsm_field(2, 1.0, 1.0);
    const auto b = simulate(field, x, c);
    const auto logz = wealth_path(b, InvestmentRule::market(2), 3.5);
    std::size_t stopped = 0;
    for (std::size_t p = 0; p < b.paths(); ++p) {
        stopped += b.stopped_at[p] <= b.steps();
        for (std::size_t k = 0; k <= b.steps(); ++k) {
            const double X = b.cap(p, k, 0) + b.cap(p, k, 1);
            EXPECT_NEAR(std::exp(logz[p * (b.steps() + 1) + k]) / X, 1.0, 1e-12);
        }
        PathStepper s(field, x, c, p);
        WealthTracker z(InvestmentRule::market(2), 3.5);
        for (std::size_t k = 0; k < c.steps; ++k) {
            z.prepare(s);
            s.advance();
            z.update(s);
        }
        EXPECT_NEAR(std::exp(z.log_wealth()) / s.total(), 1.0, 1e-12);
    }
    EXPECT_GT(stopped, 30u);
}

TEST(BundleCsv, HeaderAndRows) {
    const auto b = simulate(vsm_field(2, 1.0, 1.0), Point{1.0, 1.0}, config(3, 4));
    const auto logz = wealth_path(b, InvestmentRule::market(2), 2.0);
    std::ostringstream os;
    write_bundle_csv(os, b, &logz);
    std::istringstream is(os.str());
    const auto t = csv::read_numeric(is);
    EXPECT_EQ(t.columns, (std::vector<std::string>{"t", "X_1", "X_2", "logL", "logZ"}));
    ASSERT_EQ(t.rows.size(), 15u);
    EXPECT_EQ(t.rows[0][0], 0.0);
    EXPECT_EQ(t.rows[4][0], 1.0);
    EXPECT_EQ(t.rows[5][0], 0.0);
    EXPECT_EQ(t.rows[7][1], b.cap(1, 2, 0));
}
