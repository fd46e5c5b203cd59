#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace audit {

// Known population distribution of the Y strata, P_y >= 0, summing to 1.
struct PopulationMargins {
    std::vector<double> p_y;

    void validate() const;  // throws std::invalid_argument when malformed
    int num_y() const { return static_cast<int>(p_y.size()); }
};

struct AuditedRecord {
    int w = 0;  // audited (true) category, 1..H
    int x = 0;  // observed error-prone category, 1..I
    int y = 0;  // background stratum, 1..J
};

// The audited sample with its per-stratum count tables precomputed. The
// number of W categories is inferred from the data and need not equal the
// number of X categories.
class AuditedData {
public:
    AuditedData(std::vector<AuditedRecord> records, int num_y);

    int num_w() const { return num_w_; }
    int num_x() const { return num_x_; }
    int num_y() const { return num_y_; }
    std::int64_t size() const { return static_cast<std::int64_t>(records_.size()); }
    std::span<const std::int64_t> stratum_sizes() const { return n_y_; }  // n_y

    // Unweighted in-stratum proportions; 0 when the stratum is empty.
    double p_w_given_y(int w, int y) const;
    double p_wx_given_y(int w, int x, int y) const;

private:
    std::vector<AuditedRecord> records_;
    int num_w_;
    int num_x_;
    int num_y_;
    std::vector<std::int64_t> n_y_;
    std::vector<std::int64_t> count_wy_;   // (w-1)*J + (y-1)
    std::vector<std::int64_t> count_wxy_;  // ((w-1)*I + (x-1))*J + (y-1)
};

struct EstimateReport {
    std::vector<double> p_w;     // H entries
    std::vector<double> se_p_w;  // H entries
    // (w-1)*I + (x-1); NaN when p_w[w] = 0 makes the ratio undefined.
    std::vector<double> p_x_given_w;
    std::vector<double> se_p_x_given_w;
    std::vector<std::int64_t> stratum_sizes;  // n_y
    std::vector<int> empty_strata;            // strata with n_y = 0 (P_y = 0 there)
    std::vector<int> single_unit_strata;      // n_y = 1: variances are unreliable
    int negative_variance_clamps = 0;
    int num_w = 0;
    int num_x = 0;
};

// Stratified estimate of the true-category distribution,
// P_w = sum_y P_y * p(w|y). Throws when a stratum with P_y > 0 has no
// audited units, listing the strata.
std::vector<double> estimate_pw(const AuditedData& data, const PopulationMargins& margins);

// Combined ratio estimate of the error probabilities P(X = x | W = w); NaN
// entries mark categories with estimated P_w = 0.
std::vector<double> estimate_px_given_w(const AuditedData& data,
                                        const PopulationMargins& margins);

// Variance of estimate_pw, treating the audit sample as a stratified simple
// random sample with no finite-population correction:
// sum_y (P_y^2 / n_y) p(w|y) (1 - p(w|y)).
std::vector<double> variance_pw(const AuditedData& data, const PopulationMargins& margins);

// Three-term stratified ratio-estimator variance of estimate_px_given_w.
// Tiny negative results (within 1e-12) clamp to zero; `clamps`, when given,
// receives the number of clamped entries.
std::vector<double> variance_px_given_w(const AuditedData& data,
                                        const PopulationMargins& margins,
                                        int* clamps = nullptr);

EstimateReport make_report(const AuditedData& data, const PopulationMargins& margins);

}  // namespace audit
