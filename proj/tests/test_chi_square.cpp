#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <stdexcept>

#include "auditsamp/chi_square.hpp"
#include "auditsamp/rng.hpp"
#include "oracles.hpp"

TEST_CASE("reference quantiles") {
    CHECK(audit::chi_square_cutoff(1, 0.05) == doctest::Approx(3.8415).epsilon(1e-4));
    CHECK(audit::chi_square_cutoff(120, 0.05) == doctest::Approx(146.567).epsilon(1e-4));
    CHECK(audit::chi_square_cutoff(2, 0.05) == doctest::Approx(5.9915).epsilon(1e-4));
}

TEST_CASE("quantile agrees with the quadrature oracle") {
    for (int df : {1, 2, 5, 10, 53, 120}) {
        for (double alpha : {0.01, 0.05, 0.5}) {
            const double q = audit::chi_square_cutoff(df, alpha);
            const double oracle = oracles::chi2_quantile_by_quadrature(1.0 - alpha, df);
            CHECK(q == doctest::Approx(oracle).epsilon(1e-6));
        }
    }
}

TEST_CASE("cdf inverts the quantile") {
    audit::Rng rng = audit::make_rng(31);
    for (int rep = 0; rep < 40; ++rep) {
        const int df = 1 + static_cast<int>(audit::uniform_below(rng, 200));
        const double p = 0.001 + 0.998 * audit::uniform01(rng);
        const double q = audit::chi_square_cutoff(df, 1.0 - p);
        CHECK(audit::chi_square_cdf(q, df) == doctest::Approx(p).epsilon(1e-6));
    }
}

TEST_CASE("invalid arguments are rejected") {
    CHECK_THROWS_AS(audit::chi_square_cutoff(0, 0.05), std::invalid_argument);
    CHECK_THROWS_AS(audit::chi_square_cutoff(5, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(audit::chi_square_cutoff(5, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(audit::chi_square_cutoff(5, -0.2), std::invalid_argument);
}
