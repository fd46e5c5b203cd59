#include "auditsamp/estimators.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace audit {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Strata with positive population share need at least one audited unit;
// silently renormalizing over observed strata would hide selectivity.
void require_populated_strata(const AuditedData& data, const PopulationMargins& margins) {
    std::string missing;
    for (int y = 1; y <= data.num_y(); ++y) {
        if (margins.p_y[y - 1] > 0.0 && data.stratum_sizes()[y - 1] == 0) {
            if (!missing.empty()) missing += ", ";
            missing += std::to_string(y);
        }
    }
    if (!missing.empty()) {
        throw std::runtime_error("estimate: no audited units in strata with positive "
                                 "population share: y = " + missing);
    }
}

}  // namespace

void PopulationMargins::validate() const {
    if (p_y.empty()) throw std::invalid_argument("margins: empty");
    double sum = 0.0;
    for (double v : p_y) {
        if (!(v >= 0.0)) throw std::invalid_argument("margins: proportions must be >= 0");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
        throw std::invalid_argument("margins: proportions sum to " + std::to_string(sum) +
                                    ", expected 1");
    }
}

AuditedData::AuditedData(std::vector<AuditedRecord> records, int num_y)
    : records_(std::move(records)), num_y_(num_y) {
    if (records_.empty()) throw std::invalid_argument("audited data: no records");
    if (num_y_ < 1) throw std::invalid_argument("audited data: num_y must be >= 1");
    num_w_ = 0;
    num_x_ = 0;
    for (const AuditedRecord& r : records_) {
        if (r.w < 1 || r.x < 1 || r.y < 1 || r.y > num_y_) {
            throw std::invalid_argument("audited data: record with out-of-range categories");
        }
        num_w_ = std::max(num_w_, r.w);
        num_x_ = std::max(num_x_, r.x);
    }
    n_y_.assign(num_y_, 0);
    count_wy_.assign(static_cast<std::size_t>(num_w_) * num_y_, 0);
    count_wxy_.assign(static_cast<std::size_t>(num_w_) * num_x_ * num_y_, 0);
    for (const AuditedRecord& r : records_) {
        ++n_y_[r.y - 1];
        ++count_wy_[static_cast<std::size_t>(r.w - 1) * num_y_ + (r.y - 1)];
        ++count_wxy_[(static_cast<std::size_t>(r.w - 1) * num_x_ + (r.x - 1)) * num_y_ +
                     (r.y - 1)];
    }
}

double AuditedData::p_w_given_y(int w, int y) const {
    const std::int64_t n = n_y_[y - 1];
    if (n == 0) return 0.0;
    return static_cast<double>(count_wy_[static_cast<std::size_t>(w - 1) * num_y_ + (y - 1)]) /
           static_cast<double>(n);
}

double AuditedData::p_wx_given_y(int w, int x, int y) const {
    const std::int64_t n = n_y_[y - 1];
    if (n == 0) return 0.0;
    return static_cast<double>(
               count_wxy_[(static_cast<std::size_t>(w - 1) * num_x_ + (x - 1)) * num_y_ +
                          (y - 1)]) /
           static_cast<double>(n);
}

std::vector<double> estimate_pw(const AuditedData& data, const PopulationMargins& margins) {
    margins.validate();
    if (margins.num_y() != data.num_y()) {
        throw std::invalid_argument("estimate_pw: margins and data disagree on strata");
    }
    require_populated_strata(data, margins);
    std::vector<double> est(data.num_w(), 0.0);
    for (int w = 1; w <= data.num_w(); ++w) {
        double s = 0.0;
        for (int y = 1; y <= data.num_y(); ++y) {
            s += margins.p_y[y - 1] * data.p_w_given_y(w, y);
        }
        est[w - 1] = s;
    }
    return est;
}

std::vector<double> estimate_px_given_w(const AuditedData& data,
                                        const PopulationMargins& margins) {
    const std::vector<double> pw = estimate_pw(data, margins);
    const int H = data.num_w();
    const int I = data.num_x();
    std::vector<double> est(static_cast<std::size_t>(H) * I, kNan);
    for (int w = 1; w <= H; ++w) {
        if (!(pw[w - 1] > 0.0)) continue;  // undefined; reported as missing
        for (int x = 1; x <= I; ++x) {
            double num = 0.0;
            for (int y = 1; y <= data.num_y(); ++y) {
                num += margins.p_y[y - 1] * data.p_wx_given_y(w, x, y);
            }
            est[static_cast<std::size_t>(w - 1) * I + (x - 1)] = num / pw[w - 1];
        }
    }
    return est;
}

std::vector<double> variance_pw(const AuditedData& data, const PopulationMargins& margins) {
    margins.validate();
    if (margins.num_y() != data.num_y()) {
        throw std::invalid_argument("variance_pw: margins and data disagree on strata");
    }
    require_populated_strata(data, margins);
    std::vector<double> var(data.num_w(), 0.0);
    for (int w = 1; w <= data.num_w(); ++w) {
        double s = 0.0;
        for (int y = 1; y <= data.num_y(); ++y) {
            const double py = margins.p_y[y - 1];
            if (py == 0.0) continue;
            const double p = data.p_w_given_y(w, y);
            s += py * py / static_cast<double>(data.stratum_sizes()[y - 1]) * p * (1.0 - p);
        }
        var[w - 1] = s;
    }
    return var;
}

std::vector<double> variance_px_given_w(const AuditedData& data,
                                        const PopulationMargins& margins, int* clamps) {
    const std::vector<double> pw = estimate_pw(data, margins);
    const std::vector<double> pxw = estimate_px_given_w(data, margins);
    const int H = data.num_w();
    const int I = data.num_x();
    std::vector<double> var(static_cast<std::size_t>(H) * I, kNan);
    int clamped = 0;
    for (int w = 1; w <= H; ++w) {
        if (!(pw[w - 1] > 0.0)) continue;
        for (int x = 1; x <= I; ++x) {
            const double ratio = pxw[static_cast<std::size_t>(w - 1) * I + (x - 1)];
            double s = 0.0;
            for (int y = 1; y <= data.num_y(); ++y) {
                const double py = margins.p_y[y - 1];
                if (py == 0.0) continue;
                const double pwx = data.p_wx_given_y(w, x, y);
                const double pwy = data.p_w_given_y(w, y);
                s += py * py / static_cast<double>(data.stratum_sizes()[y - 1]) *
                     (pwx * (1.0 - pwx) + ratio * ratio * pwy * (1.0 - pwy) -
                      2.0 * ratio * pwx * (1.0 - pwy));
            }
            double v = s / (pw[w - 1] * pw[w - 1]);
            if (v < 0.0) {
                if (v < -1e-12) {
                    throw std::runtime_error(
                        "variance_px_given_w: negative variance beyond numerical slack");
                }
                v = 0.0;
                ++clamped;
            }
            var[static_cast<std::size_t>(w - 1) * I + (x - 1)] = v;
        }
    }
    if (clamps) *clamps = clamped;
    return var;
}

EstimateReport make_report(const AuditedData& data, const PopulationMargins& margins) {
    EstimateReport rep;
    rep.num_w = data.num_w();
    rep.num_x = data.num_x();
    rep.p_w = estimate_pw(data, margins);
    rep.p_x_given_w = estimate_px_given_w(data, margins);

    const std::vector<double> vw = variance_pw(data, margins);
    rep.se_p_w.resize(vw.size());
    for (std::size_t i = 0; i < vw.size(); ++i) rep.se_p_w[i] = std::sqrt(vw[i]);

    const std::vector<double> vxw = variance_px_given_w(data, margins,
                                                        &rep.negative_variance_clamps);
    rep.se_p_x_given_w.resize(vxw.size());
    for (std::size_t i = 0; i < vxw.size(); ++i) {
        rep.se_p_x_given_w[i] = std::isnan(vxw[i]) ? vxw[i] : std::sqrt(vxw[i]);
    }

    rep.stratum_sizes.assign(data.stratum_sizes().begin(), data.stratum_sizes().end());
    for (int y = 1; y <= data.num_y(); ++y) {
        if (rep.stratum_sizes[y - 1] == 0) rep.empty_strata.push_back(y);
        if (rep.stratum_sizes[y - 1] == 1) rep.single_unit_strata.push_back(y);
    }
    return rep;
}

}  // namespace audit
