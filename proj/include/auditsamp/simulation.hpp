#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "auditsamp/estimators.hpp"
#include "auditsamp/rng.hpp"
#include "auditsamp/sampler.hpp"
#include "auditsamp/solver.hpp"

namespace audit {

// The study generates populations over (W, X, Y, Z) with three categories for
// W, X and Y, from pairwise probability blocks: an X-Z block controlling how
// selective the initial audit inclusion is, a W-X block controlling the
// measurement error in X, and a W-Y block controlling how strongly the
// background strata relate to the true category. Four variants per block,
// ordered from benign (1) to adverse (4).
inline constexpr int kSimCategories = 3;

// Block accessors; variant in 1..4.
const std::array<std::array<double, 3>, 2>& xz_block(int variant);  // [z][x]
const std::array<std::array<double, 3>, 3>& wx_block(int variant);  // [x][w]
const std::array<std::array<double, 3>, 3>& wy_block(int variant);  // [y][w]

enum class Scale { Desk, Paper };

struct ConditionSpec {
    int wx_variant = 1;
    int wy_variant = 1;
    int xz_variant = 1;
    int n_pop = 10000;
    int n_replicates = 100;
    bool apply_optimization = true;  // benchmark rows of the variance study skip it
    SolverConfig solver;             // per-replicate solver settings (seed is overridden)
};

// Standard settings: M+ = 100, M- = 10; desk scale runs 100 replicates with
// 50 attempts, paper scale 1000 replicates with 200 attempts.
ConditionSpec make_condition(int wx_variant, int wy_variant, int xz_variant, Scale scale);

// Joint probability over (w, x, y, z), built as the normalized product of the
// three blocks. Index layout: ((w-1)*3 + (x-1))*3*2 + (y-1)*2 + z.
struct JointDist {
    std::array<double, 54> p{};
    std::array<double, 54> cumulative{};

    double pr(int w, int x, int y, int z) const {
        return p[index(w, x, y, z)];
    }
    static std::size_t index(int w, int x, int y, int z) {
        return ((static_cast<std::size_t>(w - 1) * 3 + (x - 1)) * 3 + (y - 1)) * 2 + z;
    }
    // Inverse-CDF draw of one (w, x, y, z) tuple.
    void draw(Rng& rng, int& w, int& x, int& y, int& z) const;
    // Audit-inclusion probability Pr(Z = 1 | X = x) implied by the joint.
    double pr_z1_given_x(int x) const;
};

JointDist build_joint(const ConditionSpec& condition);

// One unit of a generated population. The audited category w is known to the
// generator; estimators only ever see it for units in the audit sample.
struct SimUnit {
    int w = 0, x = 0, y = 0, z = 0;
};

struct Population {
    std::vector<SimUnit> units;
    PopulationMargins margins;      // realized Y proportions
    std::vector<double> true_pw;    // realized P_w, 3 entries
    std::vector<double> true_pxw;   // realized P(x|w), (w-1)*3 + (x-1); NaN if no w
};

Population draw_population(const JointDist& joint, int n_pop, Rng& rng);

// Per-replicate outcome of the deviance/bias study. Bias entries are
// estimate minus the replicate's own finite-population truth.
struct ReplicateResult {
    double deviance_before = 0.0;
    double deviance_after = 0.0;
    double relative_deviance = 0.0;  // NaN when deviance_before == 0
    std::vector<double> bias_pw_before, bias_pw_after;    // 3 entries
    std::vector<double> bias_pxw_before, bias_pxw_after;  // 9 entries
    std::vector<double> se_pw_before, se_pw_after;        // 3 entries
    std::vector<double> se_pxw_before, se_pxw_after;      // 9 entries
    std::uint64_t seed = 0;
};

// Draw n_replicates populations, run the full pipeline on each, and collect
// the metrics. Deterministic in (condition, master_seed) for any num_threads.
std::vector<ReplicateResult> run_condition(const ConditionSpec& condition,
                                           std::uint64_t master_seed, int num_threads = 1);

// Variance-study outcome for one condition: one fixed population, repeated
// audit-sample draws, empirical sd versus mean estimated se per parameter.
struct VarianceStudyRow {
    ConditionSpec condition;
    std::vector<double> empirical_sd_pw, mean_se_pw, ratio_pw;     // 3 entries each
    std::vector<double> empirical_sd_pxw, mean_se_pxw, ratio_pxw;  // 9 entries each
    int replicates_used = 0;
};

std::vector<VarianceStudyRow> run_variance_study(const std::vector<ConditionSpec>& conditions,
                                                 std::uint64_t master_seed,
                                                 int num_threads = 1);

// The standard variance-study grid: the adverse W-X and X-Z blocks crossed
// with all four W-Y variants, plus the no-optimization benchmark with the
// benign X-Z block. Desk scale uses 200 samples per condition, paper 1000.
std::vector<ConditionSpec> variance_study_conditions(Scale scale);

}  // namespace audit
