#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "robustarb/hjb.hpp"

using namespace robustarb;

namespace {

BoundaryData wf_boundary(const oracle::WrightFisher& wf) {
    return [&wf](double t, std::size_t, std::span<const double> x) { return wf(t, x[0], x[1]); };
}

std::size_t node_at(const SpatialGrid& g, std::vector<std::size_t> idx) { return g.flat(idx); }

double max_error_vs_wf(const GridFunction& u, const oracle::WrightFisher& wf) {
    const auto& g = u.grid();
    const std::size_t j = u.slice_count() - 1;
    const double t = u.horizon();
    double worst = 0.0;
    for (std::size_t f = 0; f < g.size(); ++f) {
        const auto x = g.point(f);
        worst = std::max(worst, std::fabs(u.slice(j)[f] - wf(t, x[0], x[1])));
    }
    return worst;
}

GridFunction solve_vsm(std::size_t nodes, double c2, const oracle::WrightFisher& wf, double T = 1.0) {
    HJBProblem p(UncertaintySet::vsm(2, 1.0, 1.0, c2), SpatialGrid::cube(2, 0.1, 10.0, nodes), T, wf_boundary(wf));
    return solve(p);
}

}  // namespace

TEST(HjbSup, Examples) {
    EXPECT_EQ(hjb_sup(-1.0, 4.0), -1.0);
    EXPECT_EQ(hjb_sup(2.0, 4.0), 8.0);
    EXPECT_EQ(hjb_sup(0.0, 4.0), 0.0);
    EXPECT_EQ(hjb_sup(3.0, 1.0), 3.0);
    EXPECT_THROW(hjb_sup(1.0, 0.5), ConfigError);
    EXPECT_THROW(hjb_sup(1.0, INFINITY), ConfigError);
}

TEST(HjbSup, DominatesEveryScaling) {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> l(0.0, 10.0);
    std::uniform_real_distribution<double> c(1.0, 9.0), r(0.0, 1.0);
    for (int k = 0; k < 10000; ++k) {
        const double lv = l(rng), cv = c(rng);
        const double h = hjb_sup(lv, cv);
        const double s = 1.0 + (cv - 1.0) * r(rng);
        EXPECT_GE(h, s * lv);
        EXPECT_TRUE(h == lv || h == cv * lv);
    }
}

TEST(Generator, ConstantIsAnnihilated) {
    const auto g = SpatialGrid::cube(2, 0.5, 2.0, 9);
    const auto uset = UncertaintySet::vsm(2, 1.0, 1.0, 1.0);
    const std::vector<double> ones(g.size(), 1.0);
    for (std::size_t f = 0; f < g.size(); ++f) {
        if (g.is_boundary(f)) {
            EXPECT_THROW(apply_generator(g, uset.base().covariance(g.point(f)), ones, f), UsageError);
            continue;
        }
        EXPECT_EQ(apply_generator(g, uset.base().covariance(g.point(f)), ones, f), 0.0);
    }
}

TEST(Generator, LinearFunctionsUnderVsm) {
    // For the VSM, a_ii = g2^2 |x| / x_i, so L x_1 = g2^2 x_1 and L |x| = g2^2 |x|.
    const double g2 = 1.5;
    const auto field = vsm_field(2, 1.0, g2);
    std::vector<double> err;
    for (std::size_t nodes : {17u, 33u, 65u}) {
        const auto g = SpatialGrid::cube(2, 0.5, 2.0, nodes);
        std::vector<double> sum(g.size()), first(g.size());
        for (std::size_t f = 0; f < g.size(); ++f) {
            sum[f] = norm1(g.point(f));
            first[f] = g.point(f)[0];
        }
        const std::size_t c = node_at(g, {nodes / 2, nodes / 2});
        const auto x = g.point(c);
        const auto a = field.covariance(x);
        EXPECT_NEAR(apply_generator(g, a, first, c), g2 * g2 * x[0], 0.05);
        err.push_back(std::fabs(apply_generator(g, a, sum, c) - g2 * g2 * norm1(x)));
    }
    // Second order: the error drops by about four per halving of h.
    EXPECT_LT(err[1], err[0] / 3.0);
    EXPECT_LT(err[2], err[1] / 3.0);
}

TEST(Generator, RejectsCrossTerms) {
    const auto g = SpatialGrid::cube(2, 0.5, 2.0, 5);
    const std::vector<double> u(g.size(), 1.0);
    const std::vector<double> a{1.0, 0.3, 0.3, 1.0};
    EXPECT_THROW(apply_generator(g, a, u, node_at(g, {2, 2})), ConfigError);

    const auto field = constant_field(2, {1.0, 0.0, 0.5, 1.0}, {0.0, 0.0});
    EXPECT_THROW(HJBSolver(HJBProblem(UncertaintySet::singleton(field), g, 1.0, constant_boundary(1.0))), ConfigError);
    const auto three = UncertaintySet::vsm(3, 1.0, 1.0, 1.0);
    EXPECT_THROW(HJBSolver(HJBProblem(three, SpatialGrid::cube(3, 0.5, 2.0, 5), 1.0, constant_boundary(1.0))),
                 ConfigError);
}

TEST(Solver, CflViolationIsReported) {
    HJBProblem p(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), SpatialGrid::cube(2, 0.1, 10.0, 17), 1.0,
                 constant_boundary(1.0));
    const HJBSolver s(p);
    EXPECT_LE(s.dt(), 0.9 * s.stable_dt() * (1.0 + 1e-12));
    const std::vector<double> u(p.grid.size(), 1.0);
    EXPECT_NO_THROW(s.step(u, s.stable_dt(), s.stable_dt()));
    try {
        s.step(u, 1.0, 1.01 * s.stable_dt());
        FAIL() << "expected CflError";
    } catch (const CflError& e) {
        EXPECT_NE(std::string(e.what()).find("at node ("), std::string::npos);
    }
    // A user-set dt above the bound fails on the first step.
    p.dt = 2.0 * s.stable_dt();
    EXPECT_THROW(solve(p), CflError);
}

TEST(Solver, OneAssetAndConstantDataStayAtOne) {
    HJBProblem one(UncertaintySet::singleton(vsm_field(1, 1.0, 1.0)), SpatialGrid::cube(1, 0.1, 10.0, 41), 2.0,
                   constant_boundary(1.0));
    const auto u1 = solve(one);
    for (const auto& s : u1.slices())
        for (double v : s) EXPECT_EQ(v, 1.0);

    HJBProblem two(UncertaintySet::vsm(2, 1.0, 1.0, 3.0), SpatialGrid::cube(2, 0.1, 10.0, 17), 1.0,
                   constant_boundary(1.0));
    const auto u2 = solve(two);
    for (const auto& s : u2.slices())
        for (double v : s) EXPECT_EQ(v, 1.0);
    EXPECT_EQ(u2.extension(), Extension::rescale);
    EXPECT_EQ(u2.metadata().at("c_cov"), "9");
}

TEST(Solver, StepIsLocal) {
    const auto g = SpatialGrid::cube(2, 0.1, 10.0, 11);
    const HJBSolver s(HJBProblem(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), g, 1.0, constant_boundary(1.0)));
    std::vector<double> u(g.size(), 0.5), v = u;
    const std::size_t f = node_at(g, {5, 5});
    v[f] += 0.1;
    const auto a = s.step(u, s.dt()), b = s.step(v, s.dt());
    const std::vector<std::size_t> touched{f, f - g.stride(0), f + g.stride(0), f - g.stride(1), f + g.stride(1)};
    for (std::size_t k = 0; k < g.size(); ++k) {
        if (std::find(touched.begin(), touched.end(), k) != touched.end()) {
            EXPECT_NE(a[k], b[k]) << k;
        } else {
            EXPECT_EQ(a[k], b[k]) << k;
        }
    }
}

TEST(Solver, StepIsMonotone) {
    const auto g = SpatialGrid::cube(2, 0.1, 10.0, 13);
    const HJBSolver s(HJBProblem(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), g, 1.0, constant_boundary(0.3)));
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> u(g.size()), v(g.size());
        for (std::size_t k = 0; k < g.size(); ++k) {
            u[k] = U(rng);
            v[k] = u[k] + U(rng) * (trial % 2 ? 1.0 : 1e-9);
        }
        const auto a = s.step(u, s.dt()), b = s.step(v, s.dt());
        for (std::size_t k = 0; k < g.size(); ++k) ASSERT_LE(a[k], b[k]);
    }
}

TEST(Solver, ComparisonInBoundaryData) {
    const auto g = SpatialGrid::cube(2, 0.1, 10.0, 17);
    const auto uset = UncertaintySet::vsm(2, 1.0, 1.0, 2.0);
    const auto lo = solve(HJBProblem(uset, g, 1.0, [](double t, std::size_t, std::span<const double>) {
        return std::exp(-2.0 * t);
    }));
    const auto hi = solve(HJBProblem(uset, g, 1.0, [](double t, std::size_t, std::span<const double>) {
        return std::exp(-t);
    }));
    for (std::size_t j = 0; j < lo.slice_count(); ++j)
        for (std::size_t f = 0; f < g.size(); ++f) ASSERT_LE(lo.slice(j)[f], hi.slice(j)[f]);
}

TEST(Solver, LargerCovarianceSetGivesLargerValue) {
    const auto g = SpatialGrid::cube(2, 0.1, 10.0, 17);
    const auto b = [](double t, std::size_t, std::span<const double> x) {
        return std::exp(-t) * (0.5 + 0.5 * std::fabs(std::log(x[0] / x[1])) / std::log(100.0));
    };
    HJBProblem big(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), g, 1.0, b);
    HJBProblem small(UncertaintySet::vsm(2, 1.0, 1.0, 1.0), g, 1.0, b);
    small.dt = big.dt = HJBSolver(big).dt();
    const auto ub = solve(big), us = solve(small);
    for (std::size_t j = 0; j < ub.slice_count(); ++j)
        for (std::size_t f = 0; f < g.size(); ++f) ASSERT_GE(ub.slice(j)[f], us.slice(j)[f]);

    // One step from a rough slice: strictly larger wherever L u > 0.
    const HJBSolver sb(big), ss(small);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    std::vector<double> u(g.size());
    for (double& v : u) v = U(rng);
    const auto a = sb.step(u, sb.dt()), c = ss.step(u, sb.dt());
    std::size_t strict = 0;
    for (std::size_t f : sb.interior()) {
        const double l = sb.generator(u, f);
        EXPECT_GE(a[f], c[f]);
        if (l > 0.0) {
            EXPECT_NEAR(a[f] - c[f], 3.0 * sb.dt() * l, 1e-12);
            ++strict;
        } else {
            EXPECT_EQ(a[f], c[f]);
        }
    }
    EXPECT_GT(strict, 0u);
}

TEST(Solver, WorkerCountDoesNotChangeOutput) {
    const oracle::WrightFisher wf(1.0);
    HJBProblem p(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), SpatialGrid::cube(2, 0.1, 10.0, 33), 1.0, wf_boundary(wf));
    const auto a = solve(p);
    p.workers = 4;
    const auto b = solve(p);
    EXPECT_EQ(a.slices(), b.slices());
}

TEST(Solver, MatchesWrightFisherAndConverges) {
    // Robust VSM with gamma2 in [1, 2]: the solution is concave in the
    // market weight, so the sup picks the smallest covariance and the value
    // is the gamma2 = 1 Wright-Fisher solution.
    const oracle::WrightFisher wf(1.0);
    std::vector<double> err;
    for (std::size_t nodes : {17u, 33u, 65u}) {
        const auto u = solve_vsm(nodes, 2.0, wf);
        err.push_back(max_error_vs_wf(u, wf));
        const std::size_t c = u.grid().flat(std::vector<std::size_t>{nodes / 2, nodes / 2});
        EXPECT_NEAR(u.slice(u.slice_count() - 1)[c], wf(1.0, 0.5), err.back());
    }
    EXPECT_LT(err[2], 0.01);
    EXPECT_LT(err[1], err[0]);
    EXPECT_LT(err[2], err[1]);
}

TEST(Solver, NonIncreasingInTimeWithMonotoneBoundary) {
    // The extrapolated oracle is monotone in t only up to ~1e-7, so the
    // boundary goes through the monotone projection first.
    const oracle::WrightFisher wf(1.0);
    const auto g = SpatialGrid::cube(2, 0.1, 10.0, 33);
    std::vector<double> times(201);
    for (std::size_t k = 0; k < times.size(); ++k) times[k] = double(k) / 200.0;
    BoundaryTable table(g, times);
    for (std::size_t k = 0; k < table.nodes().size(); ++k) {
        const auto x = g.point(table.nodes()[k]);
        for (std::size_t j = 0; j < times.size(); ++j) table.values(k)[j] = wf(times[j], x[0], x[1]);
    }
    table.make_monotone();
    const auto u = solve(HJBProblem(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), g, 1.0, table.as_boundary()));
    EXPECT_LE(max_time_increase(u), 0.0);
    for (const auto& s : u.slices())
        for (double v : s) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
}

TEST(Residual, VanishesForConstantAndFlagsSpike) {
    const auto g = SpatialGrid::cube(2, 0.1, 10.0, 17);
    const HJBSolver s(HJBProblem(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), g, 1.0, constant_boundary(1.0)));
    const auto u = s.solve();
    std::vector<Probe> probes;
    for (std::size_t j : {2u, 32u, 62u}) probes.push_back({j, node_at(g, {8, 8})});
    EXPECT_EQ(residual(u, s, probes).max_residual, 0.0);

    auto slices = u.slices();
    slices[32][node_at(g, {8, 8})] += 0.01;
    const GridFunction spiked(g, u.times(), slices, u.extension());
    const auto r = residual(spiked, s, probes);
    EXPECT_GT(r.max_residual, 0.1);
    EXPECT_EQ(r.worst_probe, 1u);
    EXPECT_THROW(residual(u, s, {{0, node_at(g, {8, 8})}}), UsageError);
    EXPECT_THROW(residual(u, s, {{5, node_at(g, {0, 8})}}), UsageError);
}

TEST(Residual, SolverOutputIsConsistentAndPucciFormAgrees) {
    const oracle::WrightFisher wf(1.0);
    std::vector<double> own, pucci;
    for (std::size_t nodes : {17u, 33u, 65u}) {
        HJBProblem p(UncertaintySet::vsm(2, 1.0, 1.0, 2.0), SpatialGrid::cube(2, 0.1, 10.0, nodes), 1.0,
                     wf_boundary(wf));
        const HJBSolver s(p);
        const auto u = s.solve();
        std::vector<Probe> probes;
        const std::size_t m = nodes / 2, q = nodes / 4;
        for (std::size_t j : {32u, 48u, 62u})
            for (auto idx : {std::vector<std::size_t>{m, m}, {q, m}, {m, 3 * q}}) probes.push_back({j, u.grid().flat(idx)});
        own.push_back(residual(u, s, probes).max_residual);
        const auto pc = pucci_transform_check(u, p.uset, probes);
        EXPECT_EQ(pc.initial_error, 0.0);
        pucci.push_back(pc.residual.max_residual);
    }
    for (std::size_t k = 1; k < 3; ++k) {
        EXPECT_LT(pucci[k], pucci[k - 1]);
        EXPECT_LT(own[k], own[k - 1] + 1e-3);
    }
    EXPECT_LT(pucci[2], 0.05);
}

TEST(BoundaryTables, MonotoneProjection) {
    const auto g = SpatialGrid::cube(2, 0.5, 2.0, 3);
    BoundaryTable b(g, {0.0, 0.5, 1.0});
    ASSERT_EQ(b.nodes().size(), 8u);
    b.values(0) = {1.02, 0.7, 0.75};
    b.values(1) = {1.0, -0.01, 0.2};
    b.make_monotone();
    EXPECT_EQ(b.values(0), (std::vector<double>{1.0, 0.7, 0.7}));
    EXPECT_EQ(b.values(1), (std::vector<double>{1.0, 0.0, 0.0}));
    EXPECT_DOUBLE_EQ(b.value(0.25, b.nodes()[0]), 0.85);
    EXPECT_THROW(b.value(0.25, node_at(g, {1, 1})), UsageError);
}

TEST(GridFunctions, RoundTripAndRescale) {
    const oracle::WrightFisher wf(1.0);
    const auto u = solve_vsm(17, 1.0, wf);
    const auto dir = std::filesystem::temp_directory_path() / "robustarb_hjb_test";
    std::filesystem::create_directories(dir);
    u.write((dir / "u.csv").string(), (dir / "u.json").string());
    const auto back = GridFunction::read((dir / "u.csv").string(), (dir / "u.json").string());
    EXPECT_EQ(back.slices(), u.slices());
    EXPECT_EQ(back.times(), u.times());
    EXPECT_TRUE(back.grid() == u.grid());
    EXPECT_EQ(back.extension(), Extension::rescale);
    EXPECT_EQ(back.metadata(), u.metadata());

    const Point x{0.4, 1.7};
    for (double c : {0.5, 3.0}) {
        const Point y{c * x[0], c * x[1]};
        EXPECT_NEAR(u.value(0.7, y), u.value(0.7, x), 1e-3);
    }
    // Outside the box the point is moved along its ray to the nearest node box.
    const Point far{40.0, 170.0}, shifted{10.0 * 0.4 / 1.7, 10.0};
    EXPECT_NEAR(u.value(0.7, far), u.value(0.7, shifted), 1e-12);
    EXPECT_NEAR(u.value(0.7, far), wf(0.7, 0.4, 1.7), 0.02);
    // Market weight 1/1000 is not representable on the box.
    EXPECT_FALSE(u.covers(Point{0.01, 10.0}));
    EXPECT_TRUE(u.covers(Point{5.0, 50.0}));
    EXPECT_THROW(u.value(1.5, x), UsageError);
    std::filesystem::remove_all(dir);
}

TEST(GridFunctions, SectionExtensionIsScaleInvariantEverywhere) {
    const oracle::WrightFisher wf(1.0);
    auto u = solve_vsm(17, 1.0, wf);
    u.set_extension(Extension::section);
    for (const Point& x : {Point{0.4, 1.7}, Point{3.0, 0.2}, Point{40.0, 170.0}}) {
        const double base = u.value(0.7, x);
        for (double c : {0.05, 0.5, 3.0, 200.0}) EXPECT_NEAR(u.value(0.7, Point{c * x[0], c * x[1]}), base, 1e-12);
        EXPECT_NEAR(base, wf(0.7, x[0], x[1]), 0.02);
    }
    // On the section itself nothing moves.
    const Point centre{0.5, 2.0};
    u.set_extension(Extension::rescale);
    const double direct = u.value(0.7, centre);
    u.set_extension(Extension::section);
    EXPECT_NEAR(u.value(0.7, centre), direct, 1e-12);
    EXPECT_FALSE(u.covers(Point{0.01, 10.0}));

    const auto dir = std::filesystem::temp_directory_path() / "robustarb_section_test";
    std::filesystem::create_directories(dir);
    u.write((dir / "u.csv").string(), (dir / "u.json").string());
    EXPECT_EQ(GridFunction::read((dir / "u.csv").string(), (dir / "u.json").string()).extension(), Extension::section);
    std::filesystem::remove_all(dir);
}
