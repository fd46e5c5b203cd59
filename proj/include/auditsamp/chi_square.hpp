#pragma once

namespace audit {

// Regularized lower incomplete gamma function P(a, x), a > 0, x >= 0.
// Series expansion for x < a+1, continued fraction otherwise.
double gamma_p(double a, double x);

// CDF of the chi-square distribution with df degrees of freedom.
double chi_square_cdf(double x, int df);

// The (1 - alpha) quantile of chi-square with df degrees of freedom, found by
// bisecting the CDF. Absolute accuracy better than 1e-6.
// Throws std::invalid_argument unless df >= 1 and 0 < alpha < 1.
double chi_square_cutoff(int df, double alpha);

}  // namespace audit
