#include "auditsamp/table.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace audit {

namespace {

// Compensated (Kahan) accumulator. The deviance is a small difference of
// large x*log(x) sums, so plain summation can lose the result entirely on
// large tables.
struct KahanSum {
    double sum = 0.0;
    double carry = 0.0;
    void add(double v) {
        const double y = v - carry;
        const double t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
};

inline double xlogx(double v) { return v > 0.0 ? v * std::log(v) : 0.0; }

constexpr double kNegativeCountSlack = 1e-9;

}  // namespace

ContingencyTable3::ContingencyTable3(int num_x, int num_y, std::vector<std::int64_t> counts)
    : num_x_(num_x), num_y_(num_y), counts_(std::move(counts)) {
    if (num_x_ < 1 || num_y_ < 1) {
        throw std::invalid_argument("table: category counts must be positive");
    }
    const std::size_t expected = static_cast<std::size_t>(num_x_) * num_y_ * 2;
    if (counts_.size() != expected) {
        throw std::invalid_argument("table: expected " + std::to_string(expected) +
                                    " counts, got " + std::to_string(counts_.size()));
    }
    margin_xy_.assign(static_cast<std::size_t>(num_x_) * num_y_, 0);
    margin_yz_.assign(static_cast<std::size_t>(num_y_) * 2, 0);
    margin_y_.assign(num_y_, 0);
    total_ = 0;
    audit_ = 0;
    for (int i = 1; i <= num_x_; ++i) {
        for (int j = 1; j <= num_y_; ++j) {
            for (int k = 0; k <= 1; ++k) {
                const std::int64_t n = counts_[index(i, j, k, num_y_)];
                if (n < 0) {
                    throw std::invalid_argument("table: negative count in cell (i=" +
                                                std::to_string(i) + ", j=" + std::to_string(j) +
                                                ", k=" + std::to_string(k) + ")");
                }
                margin_xy_[cell(i, j)] += n;
                margin_yz_[(j - 1) * 2 + k] += n;
                margin_y_[j - 1] += n;
                total_ += n;
                if (k == 1) audit_ += n;
            }
        }
    }
    if (total_ <= 0) {
        throw std::invalid_argument("table: total count must be positive");
    }
}

AdjustedTable::AdjustedTable(ContingencyTable3 base, std::vector<double> delta_plus,
                             std::vector<double> delta_minus)
    : base_(std::move(base)),
      delta_plus_(std::move(delta_plus)),
      delta_minus_(std::move(delta_minus)) {
    const std::size_t cells = static_cast<std::size_t>(base_.num_x()) * base_.num_y();
    if (delta_plus_.size() != cells || delta_minus_.size() != cells) {
        throw std::invalid_argument("adjustment: delta arrays must have one entry per (i,j) cell");
    }
    for (int i = 1; i <= base_.num_x(); ++i) {
        for (int j = 1; j <= base_.num_y(); ++j) {
            const std::size_t c = base_.cell(i, j);
            const double dp = delta_plus_[c];
            const double dm = delta_minus_[c];
            const double n0 = static_cast<double>(base_.count(i, j, 0));
            const double n1 = static_cast<double>(base_.count(i, j, 1));
            if (!(dp >= -kNegativeCountSlack && dp <= n0 + kNegativeCountSlack) ||
                !(dm >= -kNegativeCountSlack && dm <= n1 + kNegativeCountSlack) ||
                !std::isfinite(dp) || !std::isfinite(dm)) {
                throw std::invalid_argument("adjustment: infeasible delta in cell (i=" +
                                            std::to_string(i) + ", j=" + std::to_string(j) + ")");
            }
        }
    }
}

std::vector<double> AdjustedTable::adjusted_counts() const {
    const int I = base_.num_x();
    const int J = base_.num_y();
    std::vector<double> m(static_cast<std::size_t>(I) * J * 2);
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            m[ContingencyTable3::index(i, j, 0, J)] = this->m(i, j, 0);
            m[ContingencyTable3::index(i, j, 1, J)] = this->m(i, j, 1);
        }
    }
    return m;
}

double AdjustedTable::delta_total() const {
    double s = 0.0;
    for (double v : delta_plus_) s += v;
    for (double v : delta_minus_) s += v;
    return s;
}

double deviance_counts(int num_x, int num_y, std::span<const double> m) {
    const std::size_t expected = static_cast<std::size_t>(num_x) * num_y * 2;
    if (m.size() != expected) {
        throw std::invalid_argument("deviance: count array has wrong size");
    }
    KahanSum dev;
    double term_mass = 0.0;  // running scale of the summed terms, for the clamp window
    for (int j = 1; j <= num_y; ++j) {
        double s0 = 0.0, s1 = 0.0;
        KahanSum cells;
        for (int i = 1; i <= num_x; ++i) {
            double m0 = m[ContingencyTable3::index(i, j, 0, num_y)];
            double m1 = m[ContingencyTable3::index(i, j, 1, num_y)];
            if (m0 < -kNegativeCountSlack || m1 < -kNegativeCountSlack) {
                throw std::invalid_argument("deviance: negative count in cell (i=" +
                                            std::to_string(i) + ", j=" + std::to_string(j) + ")");
            }
            if (m0 < 0.0) m0 = 0.0;
            if (m1 < 0.0) m1 = 0.0;
            cells.add(xlogx(m0));
            cells.add(xlogx(m1));
            cells.add(-xlogx(m0 + m1));  // n_ij+ term
            s0 += m0;
            s1 += m1;
        }
        cells.add(-xlogx(s0));      // n_+j0 term
        cells.add(-xlogx(s1));      // n_+j1 term
        cells.add(xlogx(s0 + s1));  // n_+j+ term
        dev.add(cells.sum);
        term_mass += std::abs(xlogx(s0 + s1));
    }
    double d = 2.0 * dev.sum;
    // Mathematically D >= 0; clamp floating-point noise, widened with scale.
    const double clamp = std::max(kNegativeCountSlack,
                                  64.0 * std::numeric_limits<double>::epsilon() * term_mass);
    if (d < 0.0) {
        if (d < -clamp) {
            throw std::runtime_error("deviance: negative value beyond numerical slack");
        }
        d = 0.0;
    }
    return d;
}

double deviance(const ContingencyTable3& table) {
    std::vector<double> m(table.counts().begin(), table.counts().end());
    return deviance_counts(table.num_x(), table.num_y(), m);
}

double deviance(const AdjustedTable& adjusted) {
    return deviance_counts(adjusted.base().num_x(), adjusted.base().num_y(),
                           adjusted.adjusted_counts());
}

std::vector<double> fitted_counts(const ContingencyTable3& table) {
    const int I = table.num_x();
    const int J = table.num_y();
    std::vector<double> fitted(static_cast<std::size_t>(I) * J * 2, 0.0);
    for (int j = 1; j <= J; ++j) {
        const std::int64_t ny = table.margin_y(j);
        if (ny == 0) continue;  // empty stratum: fitted 0 everywhere
        for (int i = 1; i <= I; ++i) {
            const double row = static_cast<double>(table.margin_xy(i, j));
            for (int k = 0; k <= 1; ++k) {
                fitted[ContingencyTable3::index(i, j, k, J)] =
                    row * static_cast<double>(table.margin_yz(j, k)) / static_cast<double>(ny);
            }
        }
    }
    return fitted;
}

double constant_term(const ContingencyTable3& table) {
    KahanSum s;
    for (int j = 1; j <= table.num_y(); ++j) {
        s.add(xlogx(static_cast<double>(table.margin_y(j))));
        for (int i = 1; i <= table.num_x(); ++i) {
            s.add(-xlogx(static_cast<double>(table.margin_xy(i, j))));
        }
    }
    return 2.0 * s.sum;
}

}  // namespace audit
