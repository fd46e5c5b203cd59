#include "auditsamp/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>

namespace audit {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Bivariate probability blocks, three-decimal values as published; the joint
// is renormalized after the product, so only ratios matter.
constexpr std::array<std::array<std::array<double, 3>, 2>, 4> kXZ = {{
    {{{0.323, 0.323, 0.323}, {0.010, 0.010, 0.010}}},
    {{{0.323, 0.323, 0.323}, {0.012, 0.010, 0.008}}},
    {{{0.323, 0.323, 0.323}, {0.015, 0.010, 0.005}}},
    {{{0.323, 0.323, 0.323}, {0.018, 0.010, 0.002}}},
}};

constexpr std::array<std::array<std::array<double, 3>, 3>, 4> kWX = {{
    {{{0.333, 0.0, 0.0}, {0.0, 0.333, 0.0}, {0.0, 0.0, 0.333}}},
    {{{0.267, 0.033, 0.033}, {0.033, 0.267, 0.033}, {0.033, 0.033, 0.267}}},
    {{{0.333, 0.0, 0.0}, {0.017, 0.300, 0.017}, {0.033, 0.033, 0.267}}},
    {{{0.300, 0.017, 0.017}, {0.033, 0.267, 0.033}, {0.050, 0.050, 0.233}}},
}};

constexpr std::array<std::array<std::array<double, 3>, 3>, 4> kWY = {{
    {{{0.267, 0.033, 0.033}, {0.033, 0.267, 0.033}, {0.033, 0.033, 0.267}}},
    {{{0.200, 0.067, 0.067}, {0.067, 0.200, 0.067}, {0.067, 0.067, 0.267}}},
    {{{0.300, 0.017, 0.017}, {0.033, 0.267, 0.033}, {0.050, 0.050, 0.233}}},
    {{{0.267, 0.033, 0.033}, {0.067, 0.200, 0.067}, {0.100, 0.100, 0.133}}},
}};

int check_variant(int variant, const char* name) {
    if (variant < 1 || variant > 4) {
        throw std::invalid_argument(std::string("simulation: ") + name +
                                    " variant must be in 1..4");
    }
    return variant - 1;
}

void run_replicates(int count, int num_threads, const std::function<void(int)>& body) {
    const int threads = std::clamp(num_threads, 1, std::max(1, count));
    if (threads <= 1) {
        for (int r = 0; r < count; ++r) body(r);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
            for (int r = t; r < count; r += threads) body(r);
        });
    }
    for (auto& th : pool) th.join();
}

// Estimates on a subset of units (those with the given audit flag set).
struct EstimationSnapshot {
    std::vector<double> pw, se_pw;    // 3
    std::vector<double> pxw, se_pxw;  // 9
};

EstimationSnapshot estimate_sample(const std::vector<SimUnit>& units,
                                   const std::vector<char>& in_sample,
                                   const PopulationMargins& margins) {
    std::vector<AuditedRecord> recs;
    for (std::size_t g = 0; g < units.size(); ++g) {
        if (in_sample[g]) recs.push_back({units[g].w, units[g].x, units[g].y});
    }
    AuditedData data(std::move(recs), margins.num_y());
    EstimationSnapshot snap;
    snap.pw = estimate_pw(data, margins);
    snap.pxw = estimate_px_given_w(data, margins);
    const auto vw = variance_pw(data, margins);
    const auto vxw = variance_px_given_w(data, margins);
    snap.se_pw.resize(vw.size());
    for (std::size_t i = 0; i < vw.size(); ++i) snap.se_pw[i] = std::sqrt(vw[i]);
    snap.se_pxw.resize(vxw.size());
    for (std::size_t i = 0; i < vxw.size(); ++i) {
        snap.se_pxw[i] = std::isnan(vxw[i]) ? vxw[i] : std::sqrt(vxw[i]);
    }
    // The data may not contain every category; pad to the full grid.
    const int H = kSimCategories, I = kSimCategories;
    const int h = data.num_w(), i = data.num_x();
    if (h < H || i < I) {
        std::vector<double> pw(H, 0.0), se(H, 0.0);
        std::vector<double> pxw(static_cast<std::size_t>(H) * I, kNan),
            sexw(static_cast<std::size_t>(H) * I, kNan);
        for (int w = 0; w < h; ++w) {
            pw[w] = snap.pw[w];
            se[w] = snap.se_pw[w];
            for (int xx = 0; xx < i; ++xx) {
                pxw[static_cast<std::size_t>(w) * I + xx] =
                    snap.pxw[static_cast<std::size_t>(w) * i + xx];
                sexw[static_cast<std::size_t>(w) * I + xx] =
                    snap.se_pxw[static_cast<std::size_t>(w) * i + xx];
            }
        }
        snap.pw = std::move(pw);
        snap.se_pw = std::move(se);
        snap.pxw = std::move(pxw);
        snap.se_pxw = std::move(sexw);
    }
    return snap;
}

std::vector<double> minus_each(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

}  // namespace

const std::array<std::array<double, 3>, 2>& xz_block(int variant) {
    return kXZ[check_variant(variant, "xz")];
}
const std::array<std::array<double, 3>, 3>& wx_block(int variant) {
    return kWX[check_variant(variant, "wx")];
}
const std::array<std::array<double, 3>, 3>& wy_block(int variant) {
    return kWY[check_variant(variant, "wy")];
}

ConditionSpec make_condition(int wx_variant, int wy_variant, int xz_variant, Scale scale) {
    check_variant(wx_variant, "wx");
    check_variant(wy_variant, "wy");
    check_variant(xz_variant, "xz");
    ConditionSpec cond;
    cond.wx_variant = wx_variant;
    cond.wy_variant = wy_variant;
    cond.xz_variant = xz_variant;
    cond.n_pop = 10000;
    cond.n_replicates = scale == Scale::Desk ? 100 : 1000;
    cond.solver.m_plus = 100;
    cond.solver.m_minus = 10;
    cond.solver.n_attempts = scale == Scale::Desk ? 50 : 200;
    return cond;
}

void JointDist::draw(Rng& rng, int& w, int& x, int& y, int& z) const {
    const double u = uniform01(rng);
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    std::size_t idx = static_cast<std::size_t>(it - cumulative.begin());
    if (idx >= p.size()) idx = p.size() - 1;
    z = static_cast<int>(idx % 2);
    idx /= 2;
    y = static_cast<int>(idx % 3) + 1;
    idx /= 3;
    x = static_cast<int>(idx % 3) + 1;
    w = static_cast<int>(idx / 3) + 1;
}

double JointDist::pr_z1_given_x(int x) const {
    double z1 = 0.0, all = 0.0;
    for (int w = 1; w <= 3; ++w) {
        for (int y = 1; y <= 3; ++y) {
            z1 += pr(w, x, y, 1);
            all += pr(w, x, y, 0) + pr(w, x, y, 1);
        }
    }
    return all > 0.0 ? z1 / all : 0.0;
}

JointDist build_joint(const ConditionSpec& condition) {
    const auto& a = xz_block(condition.xz_variant);
    const auto& b = wx_block(condition.wx_variant);
    const auto& c = wy_block(condition.wy_variant);
    JointDist joint;
    double total = 0.0;
    for (int w = 1; w <= 3; ++w) {
        for (int x = 1; x <= 3; ++x) {
            for (int y = 1; y <= 3; ++y) {
                for (int z = 0; z <= 1; ++z) {
                    const double v = a[z][x - 1] * b[x - 1][w - 1] * c[y - 1][w - 1];
                    joint.p[JointDist::index(w, x, y, z)] = v;
                    total += v;
                }
            }
        }
    }
    if (!(total > 0.0)) throw std::invalid_argument("build_joint: blocks have zero mass");
    double cum = 0.0;
    for (std::size_t i = 0; i < joint.p.size(); ++i) {
        joint.p[i] /= total;
        cum += joint.p[i];
        joint.cumulative[i] = cum;
    }
    joint.cumulative.back() = 1.0;
    return joint;
}

Population draw_population(const JointDist& joint, int n_pop, Rng& rng) {
    if (n_pop < 1) throw std::invalid_argument("draw_population: n_pop must be positive");
    Population pop;
    pop.units.resize(n_pop);
    std::array<std::int64_t, 3> count_y{}, count_w{};
    std::array<std::int64_t, 9> count_wx{};
    for (int g = 0; g < n_pop; ++g) {
        SimUnit& u = pop.units[g];
        joint.draw(rng, u.w, u.x, u.y, u.z);
        ++count_y[u.y - 1];
        ++count_w[u.w - 1];
        ++count_wx[static_cast<std::size_t>(u.w - 1) * 3 + (u.x - 1)];
    }
    pop.margins.p_y.resize(3);
    pop.true_pw.resize(3);
    pop.true_pxw.assign(9, kNan);
    for (int k = 0; k < 3; ++k) {
        pop.margins.p_y[k] = static_cast<double>(count_y[k]) / n_pop;
        pop.true_pw[k] = static_cast<double>(count_w[k]) / n_pop;
        if (count_w[k] > 0) {
            for (int x = 0; x < 3; ++x) {
                pop.true_pxw[static_cast<std::size_t>(k) * 3 + x] =
                    static_cast<double>(count_wx[static_cast<std::size_t>(k) * 3 + x]) /
                    static_cast<double>(count_w[k]);
            }
        }
    }
    return pop;
}

std::vector<ReplicateResult> run_condition(const ConditionSpec& condition,
                                           std::uint64_t master_seed, int num_threads) {
    const JointDist joint = build_joint(condition);
    std::vector<ReplicateResult> results(condition.n_replicates);
    std::vector<std::string> errors(std::max(1, condition.n_replicates));

    run_replicates(condition.n_replicates, num_threads, [&](int r) {
        try {
            const std::uint64_t rep_seed = derive_seed(master_seed, r);
            Rng pop_rng = make_rng(derive_seed(rep_seed, 0));
            const Population pop = draw_population(joint, condition.n_pop, pop_rng);

            // Table over (x, y, z) and unit records for the sampler.
            std::vector<UnitRecord> units(pop.units.size());
            std::vector<char> initial(pop.units.size(), 0);
            for (std::size_t g = 0; g < pop.units.size(); ++g) {
                units[g].unit_id = "u" + std::to_string(g);
                units[g].x = pop.units[g].x;
                units[g].y = pop.units[g].y;
                units[g].z_initial = pop.units[g].z;
                initial[g] = static_cast<char>(pop.units[g].z);
            }
            const ContingencyTable3 table =
                tabulate(units, kSimCategories, kSimCategories);

            ReplicateResult& res = results[r];
            res.seed = rep_seed;
            res.deviance_before = deviance(table);

            std::vector<char> final_flags = initial;
            if (condition.apply_optimization) {
                SolverConfig cfg = condition.solver;
                cfg.master_seed = derive_seed(rep_seed, 1);
                const AuditPlan plan = optimize(table, cfg);
                res.deviance_after = plan.achieved_deviance;

                const SampleSelection sel = realize(plan, units, derive_seed(rep_seed, 2));
                // Unit ids are "u<g>"; flip flags from the selection.
                for (const std::string& id : sel.added) {
                    final_flags[std::stoul(id.substr(1))] = 1;
                }
                for (const std::string& id : sel.removed) {
                    final_flags[std::stoul(id.substr(1))] = 0;
                }
            } else {
                res.deviance_after = res.deviance_before;
            }
            res.relative_deviance = res.deviance_before > 0.0
                                        ? res.deviance_after / res.deviance_before
                                        : kNan;

            const EstimationSnapshot before =
                estimate_sample(pop.units, initial, pop.margins);
            const EstimationSnapshot after =
                estimate_sample(pop.units, final_flags, pop.margins);
            res.bias_pw_before = minus_each(before.pw, pop.true_pw);
            res.bias_pw_after = minus_each(after.pw, pop.true_pw);
            res.bias_pxw_before = minus_each(before.pxw, pop.true_pxw);
            res.bias_pxw_after = minus_each(after.pxw, pop.true_pxw);
            res.se_pw_before = before.se_pw;
            res.se_pw_after = after.se_pw;
            res.se_pxw_before = before.se_pxw;
            res.se_pxw_after = after.se_pxw;
        } catch (const std::exception& e) {
            errors[r] = "replicate " + std::to_string(r) + ": " + e.what();
        }
    });

    for (const std::string& err : errors) {
        if (!err.empty()) throw std::runtime_error("run_condition: " + err);
    }
    return results;
}

std::vector<ConditionSpec> variance_study_conditions(Scale scale) {
    std::vector<ConditionSpec> conds;
    for (int wy = 1; wy <= 4; ++wy) {
        ConditionSpec c = make_condition(4, wy, 4, scale);
        c.n_replicates = scale == Scale::Desk ? 200 : 1000;
        conds.push_back(c);
    }
    ConditionSpec bench = make_condition(4, 1, 1, scale);
    bench.n_replicates = scale == Scale::Desk ? 200 : 1000;
    bench.apply_optimization = false;
    conds.push_back(bench);
    return conds;
}

std::vector<VarianceStudyRow> run_variance_study(const std::vector<ConditionSpec>& conditions,
                                                 std::uint64_t master_seed, int num_threads) {
    std::vector<VarianceStudyRow> rows;
    rows.reserve(conditions.size());
    for (std::size_t ci = 0; ci < conditions.size(); ++ci) {
        const ConditionSpec& cond = conditions[ci];
        const std::uint64_t cond_seed = derive_seed(master_seed, ci);
        const JointDist joint = build_joint(cond);

        // One fixed population of (w, x, y); audit inclusion is redrawn per
        // replicate from the X-Z block's conditional rates.
        Rng pop_rng = make_rng(derive_seed(cond_seed, 0));
        Population pop = draw_population(joint, cond.n_pop, pop_rng);
        std::array<double, 3> z_rate{};
        for (int x = 1; x <= 3; ++x) z_rate[x - 1] = joint.pr_z1_given_x(x);

        std::vector<UnitRecord> base_units(pop.units.size());
        for (std::size_t g = 0; g < pop.units.size(); ++g) {
            base_units[g].unit_id = "u" + std::to_string(g);
            base_units[g].x = pop.units[g].x;
            base_units[g].y = pop.units[g].y;
        }

        const int R = cond.n_replicates;
        std::vector<EstimationSnapshot> snaps(R);
        std::vector<std::string> errors(std::max(1, R));
        run_replicates(R, num_threads, [&](int r) {
            try {
                const std::uint64_t rep_seed = derive_seed(cond_seed, 1, r);
                Rng zrng = make_rng(derive_seed(rep_seed, 0));
                std::vector<UnitRecord> units = base_units;
                std::vector<char> flags(units.size(), 0);
                for (std::size_t g = 0; g < units.size(); ++g) {
                    const int z = uniform01(zrng) < z_rate[units[g].x - 1] ? 1 : 0;
                    units[g].z_initial = z;
                    flags[g] = static_cast<char>(z);
                }
                if (cond.apply_optimization) {
                    const ContingencyTable3 table =
                        tabulate(units, kSimCategories, kSimCategories);
                    SolverConfig cfg = cond.solver;
                    cfg.master_seed = derive_seed(rep_seed, 1);
                    const AuditPlan plan = optimize(table, cfg);
                    const SampleSelection sel =
                        realize(plan, units, derive_seed(rep_seed, 2));
                    for (const std::string& id : sel.added) {
                        flags[std::stoul(id.substr(1))] = 1;
                    }
                    for (const std::string& id : sel.removed) {
                        flags[std::stoul(id.substr(1))] = 0;
                    }
                }
                snaps[r] = estimate_sample(pop.units, flags, pop.margins);
            } catch (const std::exception& e) {
                errors[r] = "replicate " + std::to_string(r) + ": " + e.what();
            }
        });
        for (const std::string& err : errors) {
            if (!err.empty()) throw std::runtime_error("run_variance_study: " + err);
        }

        VarianceStudyRow row;
        row.condition = cond;
        row.replicates_used = R;
        const auto summarize = [&](auto estimate_of, auto se_of, int count,
                                   std::vector<double>& sd_out, std::vector<double>& se_out,
                                   std::vector<double>& ratio_out) {
            sd_out.assign(count, kNan);
            se_out.assign(count, kNan);
            ratio_out.assign(count, kNan);
            for (int k = 0; k < count; ++k) {
                double sum = 0.0, sums = 0.0;
                int n = 0;
                double se_sum = 0.0;
                int se_n = 0;
                for (int r = 0; r < R; ++r) {
                    const double est = estimate_of(snaps[r], k);
                    if (!std::isnan(est)) {
                        sum += est;
                        sums += est * est;
                        ++n;
                    }
                    const double se = se_of(snaps[r], k);
                    if (!std::isnan(se)) {
                        se_sum += se;
                        ++se_n;
                    }
                }
                if (n >= 2) {
                    const double mean = sum / n;
                    const double var = std::max(0.0, (sums - n * mean * mean) / (n - 1));
                    sd_out[k] = std::sqrt(var);
                }
                if (se_n > 0) se_out[k] = se_sum / se_n;
                if (!std::isnan(sd_out[k]) && sd_out[k] > 0.0 && !std::isnan(se_out[k])) {
                    ratio_out[k] = se_out[k] / sd_out[k];
                }
            }
        };
        summarize([](const EstimationSnapshot& s, int k) { return s.pw[k]; },
                  [](const EstimationSnapshot& s, int k) { return s.se_pw[k]; }, 3,
                  row.empirical_sd_pw, row.mean_se_pw, row.ratio_pw);
        summarize([](const EstimationSnapshot& s, int k) { return s.pxw[k]; },
                  [](const EstimationSnapshot& s, int k) { return s.se_pxw[k]; }, 9,
                  row.empirical_sd_pxw, row.mean_se_pxw, row.ratio_pxw);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace audit
