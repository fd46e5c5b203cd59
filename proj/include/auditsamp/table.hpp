#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace audit {

// Cross-classification of an observed population by an error-prone category X
// (i = 1..I), a background stratum Y (j = 1..J) and the audit-inclusion flag
// Z (k = 0,1). Counts are stored row-major as (i-1)*J*2 + (j-1)*2 + k.
//
// Immutable after construction; all operations on it are pure functions.
class ContingencyTable3 {
public:
    ContingencyTable3(int num_x, int num_y, std::vector<std::int64_t> counts);

    int num_x() const { return num_x_; }
    int num_y() const { return num_y_; }

    std::int64_t count(int i, int j, int k) const {
        return counts_[index(i, j, k, num_y_)];
    }
    std::int64_t margin_xy(int i, int j) const {  // n_ij+
        return margin_xy_[cell(i, j)];
    }
    std::int64_t margin_yz(int j, int k) const {  // n_+jk
        return margin_yz_[(j - 1) * 2 + k];
    }
    std::int64_t margin_y(int j) const {  // n_+j+
        return margin_y_[j - 1];
    }
    std::int64_t total() const { return total_; }       // N
    std::int64_t audit_size() const { return audit_; }  // current units with Z=1

    std::span<const std::int64_t> counts() const { return counts_; }

    std::size_t cell(int i, int j) const {
        return static_cast<std::size_t>(i - 1) * num_y_ + (j - 1);
    }
    static std::size_t index(int i, int j, int k, int num_y) {
        return (static_cast<std::size_t>(i - 1) * num_y + (j - 1)) * 2 + k;
    }

private:
    int num_x_;
    int num_y_;
    std::vector<std::int64_t> counts_;
    std::vector<std::int64_t> margin_xy_;
    std::vector<std::int64_t> margin_yz_;
    std::vector<std::int64_t> margin_y_;
    std::int64_t total_;
    std::int64_t audit_;
};

// A base table plus per-stratum continuous adjustments: delta_plus units moved
// into the audit sample (Z 0->1) and delta_minus moved out (Z 1->0), per (i,j)
// cell. The adjusted counts are
//     m_ij1 = n_ij1 + delta_plus_ij - delta_minus_ij
//     m_ij0 = n_ij0 - delta_plus_ij + delta_minus_ij
// so the (X,Y) margins of the base table are preserved by construction.
// Feasibility (0 <= delta_plus <= n_ij0, 0 <= delta_minus <= n_ij1, up to
// 1e-9 slack) is checked at construction.
class AdjustedTable {
public:
    AdjustedTable(ContingencyTable3 base, std::vector<double> delta_plus,
                  std::vector<double> delta_minus);

    const ContingencyTable3& base() const { return base_; }
    std::span<const double> delta_plus() const { return delta_plus_; }
    std::span<const double> delta_minus() const { return delta_minus_; }

    double m(int i, int j, int k) const {
        const std::size_t c = base_.cell(i, j);
        const double shift = delta_plus_[c] - delta_minus_[c];
        return k == 1 ? base_.count(i, j, 1) + shift : base_.count(i, j, 0) - shift;
    }

    // Full m_ijk array in ContingencyTable3 layout.
    std::vector<double> adjusted_counts() const;

    // Sum of all delta_plus and delta_minus entries.
    double delta_total() const;

private:
    ContingencyTable3 base_;
    std::vector<double> delta_plus_;
    std::vector<double> delta_minus_;
};

// Deviance of the within-stratum X-Z independence fit against the saturated
// model, on real-valued counts in ContingencyTable3 layout:
//   D = 2 sum m_ijk log m_ijk - 2 sum_ij m_ij+ log m_ij+
//       - 2 sum_jk m_+jk log m_+jk + 2 sum_j m_+j+ log m_+j+
// evaluated with the 0*log(0) = 0 convention. Counts below -1e-9 are
// rejected; a tiny negative result (floating-point noise) is clamped to 0.
double deviance_counts(int num_x, int num_y, std::span<const double> m);

double deviance(const ContingencyTable3& table);
double deviance(const AdjustedTable& adjusted);

// Closed-form fitted counts of the independence model,
// nhat_ijk = n_ij+ n_+jk / n_+j+, with empty strata fitted as 0.
std::vector<double> fitted_counts(const ContingencyTable3& table);

// The part of the deviance that depends only on the (X,Y) margin:
//   C = 2 sum_j n_+j+ log n_+j+ - 2 sum_ij n_ij+ log n_ij+.
// Identical for every feasible adjustment of the same base table.
double constant_term(const ContingencyTable3& table);

}  // namespace audit
