#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "auditsamp/chi_square.hpp"
#include "auditsamp/rng.hpp"
#include "auditsamp/solver.hpp"
#include "auditsamp/table.hpp"
#include "oracles.hpp"

using audit::AdjustedTable;
using audit::AuditPlan;
using audit::ContingencyTable3;
using audit::ObjectiveKind;
using audit::ObjectiveSpec;
using audit::SolverConfig;

namespace {

ContingencyTable3 uniform_2x1() { return ContingencyTable3(2, 1, {10, 10, 10, 10}); }

AdjustedTable random_interior_point(const ContingencyTable3& t, audit::Rng& rng) {
    const std::size_t cells = static_cast<std::size_t>(t.num_x()) * t.num_y();
    std::vector<double> dp(cells, 0.0), dm(cells, 0.0);
    for (int i = 1; i <= t.num_x(); ++i) {
        for (int j = 1; j <= t.num_y(); ++j) {
            const std::size_t c = t.cell(i, j);
            if (t.count(i, j, 0) > 0) {
                dp[c] = (0.1 + 0.8 * audit::uniform01(rng)) * 0.5 *
                        static_cast<double>(t.count(i, j, 0));
            }
            if (t.count(i, j, 1) > 0) {
                dm[c] = (0.1 + 0.8 * audit::uniform01(rng)) * 0.5 *
                        static_cast<double>(t.count(i, j, 1));
            }
        }
    }
    return AdjustedTable(t, std::move(dp), std::move(dm));
}

}  // namespace

TEST_CASE("objective variants collapse to the deviance at zero deltas") {
    const auto t = uniform_2x1();
    const AdjustedTable adj(t, {0, 0}, {0, 0});
    const double d = audit::deviance(t);
    CHECK(audit::objective(adj, {ObjectiveKind::Deviance, 0, 0}) == doctest::Approx(d));
    CHECK(audit::objective(adj, {ObjectiveKind::LinearPenalty, 0.01, 0}) ==
          doctest::Approx(d));
    CHECK(audit::objective(adj, {ObjectiveKind::DampedPenalty, 0, 14.7}) ==
          doctest::Approx(d));
}

TEST_CASE("damped penalty arithmetic") {
    // the damped form adds exp(-D/kappa) * sum(delta)
    CHECK(117.27 + std::exp(-117.27 / 14.7) * 1200.0 ==
          doctest::Approx(117.6825).epsilon(1e-4));

    audit::Rng rng = audit::make_rng(5);
    const auto t = oracles::random_table(rng, 3, 2, 60);
    const AdjustedTable adj = random_interior_point(t, rng);
    const double d = audit::deviance(adj);
    const double s = adj.delta_total();
    const double kappa = 3.7;
    CHECK(audit::objective(adj, {ObjectiveKind::DampedPenalty, 0, kappa}) ==
          doctest::Approx(d + std::exp(-d / kappa) * s).epsilon(1e-12));
    CHECK(audit::objective(adj, {ObjectiveKind::LinearPenalty, 0.01, 0}) ==
          doctest::Approx(d + 0.01 * s).epsilon(1e-12));

    // once D >= 10 kappa the penalty is bounded by sum(delta) * e^-10
    const double k2 = d / 15.0;
    const double f2 = audit::objective(adj, {ObjectiveKind::DampedPenalty, 0, k2});
    CHECK(std::abs(f2 - d) <= s * std::exp(-10.0) + 1e-12);
}

TEST_CASE("gradient vanishes at proportional strata") {
    const auto t = uniform_2x1();
    const AdjustedTable adj(t, {1.0, 1.0}, {0.0, 0.0});
    const auto g = audit::gradient(adj, {ObjectiveKind::Deviance, 0, 0});
    for (double v : g) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("gradient matches central finite differences") {
    audit::Rng rng = audit::make_rng(77);
    const std::vector<ObjectiveSpec> specs = {
        {ObjectiveKind::Deviance, 0, 0},
        {ObjectiveKind::LinearPenalty, 0.01, 0},
        {ObjectiveKind::DampedPenalty, 0, 5.0},
    };
    for (int rep = 0; rep < 6; ++rep) {
        ContingencyTable3 t = oracles::random_table(rng, 3, 3, 60);
        const AdjustedTable adj = random_interior_point(t, rng);
        for (const auto& spec : specs) {
            const auto analytic = audit::gradient(adj, spec);
            const auto numeric = oracles::fd_gradient(adj, spec);
            REQUIRE(analytic.size() == numeric.size());
            for (std::size_t c = 0; c < analytic.size(); ++c) {
                const double scale = std::max({1.0, std::abs(analytic[c]), std::abs(numeric[c])});
                CHECK(std::abs(analytic[c] - numeric[c]) / scale < 1e-5);
            }
        }
    }
}

TEST_CASE("deviance gradient is antisymmetric in the two delta directions") {
    audit::Rng rng = audit::make_rng(13);
    const auto t = oracles::random_table(rng, 3, 2, 50);
    const AdjustedTable adj = random_interior_point(t, rng);
    const auto g = audit::gradient(adj, {ObjectiveKind::Deviance, 0, 0});
    const std::size_t cells = 6;
    for (int i = 1; i <= 3; ++i) {
        for (int j = 1; j <= 2; ++j) {
            const std::size_t c = t.cell(i, j);
            if (t.count(i, j, 0) > 0 && t.count(i, j, 1) > 0) {
                CHECK(g[c] == doctest::Approx(-g[cells + c]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("gradient errors at a boundary point") {
    // n_111 = 0 and delta zero puts m_111 on the boundary
    const ContingencyTable3 t(2, 1, {10, 0, 10, 5});
    const AdjustedTable adj(t, {0.0, 0.0}, {0.0, 0.0});
    CHECK_THROWS_AS(audit::gradient(adj, ObjectiveSpec{}), std::domain_error);
}

TEST_CASE("delta normalization") {
    const std::vector<double> plus = {5.0, 0.0, 2.5};
    const std::vector<double> minus = {3.0, 4.0, 2.5};
    const auto [np, nm] = audit::normalize_deltas(plus, minus);
    CHECK(np == std::vector<double>{2.0, 0.0, 0.0});
    CHECK(nm == std::vector<double>{0.0, 4.0, 0.0});
    for (std::size_t c = 0; c < np.size(); ++c) {
        CHECK(np[c] - nm[c] == doctest::Approx(plus[c] - minus[c]));
        CHECK(np[c] * nm[c] == 0.0);
    }
}

TEST_CASE("normalization never changes the deviance") {
    audit::Rng rng = audit::make_rng(21);
    const auto t = oracles::random_table(rng, 3, 2, 40);
    const AdjustedTable adj = random_interior_point(t, rng);
    std::vector<double> dp(adj.delta_plus().begin(), adj.delta_plus().end());
    std::vector<double> dm(adj.delta_minus().begin(), adj.delta_minus().end());
    const auto [np, nm] = audit::normalize_deltas(dp, dm);
    CHECK(audit::deviance(AdjustedTable(t, np, nm)) ==
          doctest::Approx(audit::deviance(adj)).epsilon(1e-12));
}

TEST_CASE("integer rounding") {
    SUBCASE("integer input is a fixed point") {
        const ContingencyTable3 t(2, 1, {10, 3, 8, 5});
        SolverConfig cfg;
        cfg.m_plus = 6;
        cfg.m_minus = 4;
        const std::vector<double> dp = {3.0, 2.0}, dm = {1.0, 0.0};
        const auto [rp, rm] = audit::round_to_integer_plan(dp, dm, t, cfg);
        CHECK(rp == std::vector<std::int64_t>{3, 2});
        CHECK(rm == std::vector<std::int64_t>{1, 0});
    }
    SUBCASE("tie keeps the unit in the lowest cell") {
        const ContingencyTable3 t(2, 1, {10, 2, 10, 2});
        SolverConfig cfg;
        cfg.m_plus = 1;
        cfg.m_minus = 0;
        const std::vector<double> dp = {0.6, 0.6}, dm = {0.0, 0.0};
        const auto [rp, rm] = audit::round_to_integer_plan(dp, dm, t, cfg);
        CHECK(rp == std::vector<std::int64_t>{1, 0});
        CHECK(rm == std::vector<std::int64_t>{0, 0});
    }
    SUBCASE("non-tie keeps the larger deviance reduction") {
        // adding to the unaudited row balances the sample far better
        const ContingencyTable3 t(2, 1, {10, 8, 10, 0});
        SolverConfig cfg;
        cfg.m_plus = 1;
        cfg.m_minus = 0;
        const std::vector<double> dp = {0.6, 0.6}, dm = {0.0, 0.0};
        const auto [rp, rm] = audit::round_to_integer_plan(dp, dm, t, cfg);
        const double keep_first =
            audit::deviance(AdjustedTable(t, {1.0, 0.0}, {0.0, 0.0}));
        const double keep_second =
            audit::deviance(AdjustedTable(t, {0.0, 1.0}, {0.0, 0.0}));
        REQUIRE(keep_second < keep_first);
        CHECK(rp == std::vector<std::int64_t>{0, 1});
        (void)rm;
    }
    SUBCASE("feasibility on random continuous deltas") {
        audit::Rng rng = audit::make_rng(3);
        for (int rep = 0; rep < 20; ++rep) {
            const auto t = oracles::random_table(rng, 3, 2, 20);
            SolverConfig cfg;
            cfg.m_plus = 5;
            cfg.m_minus = 3;
            std::vector<double> dp(6, 0.0), dm(6, 0.0);
            for (int i = 1; i <= 3; ++i) {
                for (int j = 1; j <= 2; ++j) {
                    const std::size_t c = t.cell(i, j);
                    dp[c] = audit::uniform01(rng) * std::min<double>(
                                static_cast<double>(t.count(i, j, 0)), 3.0);
                    dm[c] = audit::uniform01(rng) * std::min<double>(
                                static_cast<double>(t.count(i, j, 1)), 2.0);
                }
            }
            const auto [np, nm] = audit::normalize_deltas(dp, dm);
            const auto [rp, rm] = audit::round_to_integer_plan(np, nm, t, cfg);
            std::int64_t sp = 0, sm = 0;
            for (int i = 1; i <= 3; ++i) {
                for (int j = 1; j <= 2; ++j) {
                    const std::size_t c = t.cell(i, j);
                    CHECK(rp[c] >= 0);
                    CHECK(rp[c] <= t.count(i, j, 0));
                    CHECK(rm[c] >= 0);
                    CHECK(rm[c] <= t.count(i, j, 1));
                    sp += rp[c];
                    sm += rm[c];
                }
            }
            CHECK(sp <= cfg.m_plus);
            CHECK(sm <= cfg.m_minus);
        }
    }
}

TEST_CASE("solve_single") {
    SUBCASE("a zero-deviance start stays at zero") {
        const auto t = uniform_2x1();
        SolverConfig cfg;
        cfg.m_plus = 4;
        cfg.m_minus = 0;
        const AdjustedTable start(t, {1.0, 1.0}, {0.0, 0.0});
        REQUIRE(audit::deviance(start) == doctest::Approx(0.0).epsilon(1e-12));
        const AdjustedTable out = audit::solve_single(start, cfg);
        CHECK(audit::deviance(out) <= 1e-9);
    }
    SUBCASE("merit is nonincreasing within each barrier round") {
        audit::Rng rng = audit::make_rng(44);
        const auto t = oracles::random_table(rng, 3, 2, 40);
        SolverConfig cfg;
        cfg.m_plus = std::min<std::int64_t>(8, t.total() - t.audit_size());
        cfg.m_minus = std::min<std::int64_t>(4, t.audit_size());
        const AdjustedTable start = [&] {
            // spread most of each budget over the free cells, proportional to
            // the per-cell capacity, so the point is strictly interior
            std::vector<double> dp(6, 0.0), dm(6, 0.0);
            double cap0 = 0.0, cap1 = 0.0;
            for (std::size_t c = 0; c < 6; ++c) {
                cap0 += static_cast<double>(t.counts()[c * 2]);
                cap1 += static_cast<double>(t.counts()[c * 2 + 1]);
            }
            for (std::size_t c = 0; c < 6; ++c) {
                const double n0 = static_cast<double>(t.counts()[c * 2]);
                const double n1 = static_cast<double>(t.counts()[c * 2 + 1]);
                if (n0 > 0) dp[c] = std::min(0.6 * cfg.m_plus * n0 / cap0, 0.9 * n0);
                if (n1 > 0) dm[c] = std::min(0.6 * cfg.m_minus * n1 / cap1, 0.9 * n1);
            }
            return AdjustedTable(t, dp, dm);
        }();
        audit::SolveTrace trace;
        const AdjustedTable out = audit::solve_single(start, cfg, &trace);
        REQUIRE(!trace.merit_per_round.empty());
        for (const auto& round : trace.merit_per_round) {
            for (std::size_t s = 1; s < round.size(); ++s) {
                CHECK(round[s] <= round[s - 1] + 1e-9);
            }
        }
        CHECK(audit::deviance(out) <=
              audit::deviance(start) + 1e-9);
    }
    SUBCASE("matches a continuous grid oracle on a toy problem") {
        const ContingencyTable3 t(2, 2, {9, 1, 3, 0, 2, 0, 6, 2});
        SolverConfig cfg;
        cfg.m_plus = 4;
        cfg.m_minus = 0;
        const double grid_best = oracles::grid_best_deviance_plus_only(t, 4.0, 0.25);
        audit::Rng rng = audit::make_rng(123);
        double found = std::numeric_limits<double>::infinity();
        for (int s = 0; s < 10; ++s) {
            std::vector<double> dp(4, 0.0), dm(4, 0.0);
            double total = 0.9 + 2.0 * audit::uniform01(rng);
            double left = total;
            for (int c = 0; c < 4; ++c) {
                const double cap = static_cast<double>(t.counts()[c * 2]);
                if (cap == 0.0) continue;
                dp[c] = std::min(0.25 * left + 0.5 * audit::uniform01(rng), cap * 0.8);
                left -= dp[c];
            }
            const AdjustedTable out = audit::solve_single(AdjustedTable(t, dp, dm), cfg);
            found = std::min(found, audit::deviance(out));
        }
        CHECK(found <= grid_best + 1e-6);
    }
    SUBCASE("rejects starts outside the strict interior") {
        const auto t = uniform_2x1();
        SolverConfig cfg;
        cfg.m_plus = 4;
        cfg.m_minus = 0;
        CHECK_THROWS_AS(
            audit::solve_single(AdjustedTable(t, {0.0, 0.0}, {0.0, 0.0}), cfg),
            std::invalid_argument);
        CHECK_THROWS_AS(  // sums to the budget exactly
            audit::solve_single(AdjustedTable(t, {2.0, 2.0}, {0.0, 0.0}), cfg),
            std::invalid_argument);
        // mass on a parameter fixed by m_minus = 0
        CHECK_THROWS_AS(
            audit::solve_single(AdjustedTable(t, {1.0, 1.0}, {0.5, 0.0}), cfg),
            std::invalid_argument);
    }
}

TEST_CASE("optimize") {
    SUBCASE("an independent table yields the accepted null plan") {
        const auto t = uniform_2x1();
        SolverConfig cfg;
        cfg.m_plus = 5;
        cfg.m_minus = 5;
        cfg.n_attempts = 10;
        cfg.master_seed = 9;
        const AuditPlan plan = audit::optimize(t, cfg);
        CHECK(plan.total_added() == 0);
        CHECK(plan.total_removed() == 0);
        CHECK(plan.achieved_deviance == doctest::Approx(0.0));
        CHECK(plan.accepted);
        CHECK(plan.best_attempt_index == -1);
        CHECK(plan.cutoff == doctest::Approx(audit::chi_square_cutoff(1, 0.05)));
    }
    SUBCASE("zero attempts produce the null plan") {
        const ContingencyTable3 t(2, 1, {20, 9, 20, 1});
        SolverConfig cfg;
        cfg.m_plus = 5;
        cfg.m_minus = 2;
        cfg.n_attempts = 0;
        const AuditPlan plan = audit::optimize(t, cfg);
        CHECK(plan.total_added() == 0);
        CHECK(plan.achieved_deviance == doctest::Approx(audit::deviance(t)));
        CHECK(plan.attempts_run == 0);
    }
    SUBCASE("plans satisfy every constraint and never worsen the deviance") {
        audit::Rng rng = audit::make_rng(1000);
        for (int rep = 0; rep < 8; ++rep) {
            const auto t = oracles::random_table(rng, 3, 2, 25);
            SolverConfig cfg;
            cfg.m_plus = std::min<std::int64_t>(6, t.total() - t.audit_size());
            cfg.m_minus = std::min<std::int64_t>(3, t.audit_size());
            cfg.n_attempts = 12;
            cfg.master_seed = 500 + rep;
            const AuditPlan plan = audit::optimize(t, cfg);
            CHECK(plan.total_added() <= cfg.m_plus);
            CHECK(plan.total_removed() <= cfg.m_minus);
            for (int i = 1; i <= 3; ++i) {
                for (int j = 1; j <= 2; ++j) {
                    const std::size_t c = t.cell(i, j);
                    CHECK(plan.delta_plus[c] >= 0);
                    CHECK(plan.delta_plus[c] <= t.count(i, j, 0));
                    CHECK(plan.delta_minus[c] >= 0);
                    CHECK(plan.delta_minus[c] <= t.count(i, j, 1));
                    CHECK(plan.delta_plus[c] * plan.delta_minus[c] == 0);
                }
            }
            CHECK(plan.achieved_deviance <= plan.deviance_before + 1e-9);
            // recomputing the deviance from the plan reproduces the report
            std::vector<double> dp(plan.delta_plus.begin(), plan.delta_plus.end());
            std::vector<double> dm(plan.delta_minus.begin(), plan.delta_minus.end());
            CHECK(audit::deviance(AdjustedTable(t, dp, dm)) ==
                  doctest::Approx(plan.achieved_deviance));
        }
    }
    SUBCASE("deterministic replay, independent of thread count") {
        const ContingencyTable3 t(3, 2, {40, 2, 30, 1, 25, 9, 35, 0, 20, 3, 10, 0});
        SolverConfig cfg;
        cfg.m_plus = 12;
        cfg.m_minus = 4;
        cfg.n_attempts = 16;
        cfg.master_seed = 77;
        const AuditPlan a = audit::optimize(t, cfg, 1);
        const AuditPlan b = audit::optimize(t, cfg, 1);
        const AuditPlan c = audit::optimize(t, cfg, 2);
        CHECK(a.delta_plus == b.delta_plus);
        CHECK(a.delta_minus == b.delta_minus);
        CHECK(a.achieved_deviance == b.achieved_deviance);
        CHECK(a.best_attempt_index == b.best_attempt_index);
        CHECK(a.delta_plus == c.delta_plus);
        CHECK(a.delta_minus == c.delta_minus);
        CHECK(a.achieved_deviance == c.achieved_deviance);
        CHECK(a.best_attempt_index == c.best_attempt_index);
    }
    SUBCASE("best objective is nonincreasing in the attempt count") {
        const ContingencyTable3 t(3, 2, {40, 2, 30, 1, 25, 9, 35, 0, 20, 3, 10, 0});
        SolverConfig cfg;
        cfg.m_plus = 12;
        cfg.m_minus = 4;
        cfg.master_seed = 4242;
        double prev = std::numeric_limits<double>::infinity();
        for (int n : {2, 5, 10, 20}) {
            cfg.n_attempts = n;
            const AuditPlan plan = audit::optimize(t, cfg);
            CHECK(plan.continuous_deviance <= prev + 1e-12);
            prev = plan.continuous_deviance;
        }
    }
    SUBCASE("small instances match exhaustive enumeration") {
        audit::Rng rng = audit::make_rng(31337);
        int exact = 0;
        const int reps = 6;
        for (int rep = 0; rep < reps; ++rep) {
            const auto t = oracles::random_table(rng, 2, 2, 12);
            SolverConfig cfg;
            cfg.m_plus = std::min<std::int64_t>(4, t.total() - t.audit_size());
            cfg.m_minus = std::min<std::int64_t>(2, t.audit_size());
            cfg.n_attempts = 60;
            cfg.master_seed = 900 + rep;
            const AuditPlan plan = audit::optimize(t, cfg, 2);
            const double best =
                oracles::enumerate_best_integer_deviance(t, cfg.m_plus, cfg.m_minus);
            if (std::abs(plan.achieved_deviance - best) <= 1e-9 * std::max(1.0, best)) {
                ++exact;
            }
            CHECK(plan.achieved_deviance <= best * 1.05 + 1e-9);
        }
        CHECK(exact >= reps - 1);
    }
    SUBCASE("invalid budgets are rejected") {
        const ContingencyTable3 t(2, 1, {5, 5, 5, 5});
        SolverConfig cfg;
        cfg.m_plus = 11;  // only 10 units with z = 0
        CHECK_THROWS_AS(audit::optimize(t, cfg), std::invalid_argument);
        cfg.m_plus = 2;
        cfg.m_minus = 11;  // only 10 units with z = 1
        CHECK_THROWS_AS(audit::optimize(t, cfg), std::invalid_argument);
        cfg.m_minus = 0;
        cfg.start_lo_plus = 0.9;
        cfg.start_hi_plus = 0.1;
        CHECK_THROWS_AS(audit::optimize(t, cfg), std::invalid_argument);
    }
}
