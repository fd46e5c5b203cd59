#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "auditsamp/table.hpp"

namespace audit {

// Objective minimized over the adjustments.
//   Deviance       : D(m)
//   LinearPenalty  : D(m) + lambda * sum(delta)        (CLI name "f1")
//   DampedPenalty  : D(m) + exp(-D(m)/kappa) * sum(delta)   (CLI name "f2")
// The penalty variants discourage solutions that add and remove units in the
// same stratum; the damped one only bites once the deviance is already small.
enum class ObjectiveKind { Deviance, LinearPenalty, DampedPenalty };

struct ObjectiveSpec {
    ObjectiveKind kind = ObjectiveKind::Deviance;
    double lambda = 0.01;  // weight of the linear penalty
    double kappa = 0.0;    // damping scale; <= 0 means "derive as cutoff/10"
};

struct SolverConfig {
    std::int64_t m_plus = 0;   // max units to add to the audit sample
    std::int64_t m_minus = 0;  // max previously audited units to drop
    int n_attempts = 100;      // multi-start attempts

    // Each attempt draws its starting budget uniformly from
    // [lo * M, hi * M]; requires 0 < lo < hi < 1.
    double start_lo_plus = 0.1;
    double start_hi_plus = 0.9;
    double start_lo_minus = 0.1;
    double start_hi_minus = 0.9;

    ObjectiveSpec objective;

    double alpha = 0.05;        // significance level for the chi-square cutoff
    double inner_tol = 1e-8;    // relative objective-change stop per barrier round
    int max_inner_iters = 500;  // iteration cap per barrier round

    std::uint64_t master_seed = 0;
};

// Integer adjustment plan. delta arrays are laid out per (i,j) cell in
// row-major order, matching ContingencyTable3::cell.
struct AuditPlan {
    int num_x = 0;
    int num_y = 0;
    std::vector<std::int64_t> delta_plus;
    std::vector<std::int64_t> delta_minus;
    std::vector<std::int64_t> base_n0;  // n_ij0 of the table the plan was built for
    std::vector<std::int64_t> base_n1;  // n_ij1 likewise

    double deviance_before = 0.0;      // deviance of the unadjusted table
    double continuous_deviance = 0.0;  // deviance of the best continuous solution
    double achieved_deviance = 0.0;    // deviance of the integer plan
    double cutoff = 0.0;               // chi-square (1-alpha) quantile, J(I-1) df
    bool accepted = false;             // achieved_deviance <= cutoff
    int attempts_run = 0;
    // index of the winning attempt; -1 for the null plan; equal to
    // attempts_run when the exact-fit probe produced the plan
    int best_attempt_index = -1;

    std::int64_t total_added() const;
    std::int64_t total_removed() const;
};

// Objective value at a feasible adjustment. DampedPenalty requires kappa > 0
// here (optimize() resolves the cutoff/10 default before it runs).
double objective(const AdjustedTable& adjusted, const ObjectiveSpec& spec);

// Gradient with respect to (delta_plus_ij, delta_minus_ij), returned as a
// 2*I*J array: first all delta_plus entries row-major, then all delta_minus.
// Entries for structurally fixed parameters (n_ij0 = 0 resp. n_ij1 = 0) are 0.
// Throws if an adjusted count needed by a free entry is not strictly positive.
std::vector<double> gradient(const AdjustedTable& adjusted, const ObjectiveSpec& spec);

// Per-round objective values at accepted line-search steps, for inspecting
// descent behaviour.
struct SolveTrace {
    std::vector<std::vector<double>> merit_per_round;  // barrier merit values
    std::vector<double> objective_per_round_end;       // raw objective at round end
};

// Local minimization from a strictly feasible start: log-barrier on the
// inequality constraints, gradient descent with backtracking inside each
// round, barrier weight shrunk geometrically across rounds. The returned
// point is feasible and its objective never exceeds the start's.
AdjustedTable solve_single(const AdjustedTable& start, const SolverConfig& config,
                           SolveTrace* trace = nullptr);

// Replace (delta_plus, delta_minus) by the equivalent pair with
// delta_plus * delta_minus = 0 per cell and the same net shift.
std::pair<std::vector<double>, std::vector<double>> normalize_deltas(
    std::span<const double> delta_plus, std::span<const double> delta_minus);

// Round continuous deltas to a feasible integer plan: nearest-integer
// rounding, then greedy removal of whichever unit costs the least deviance
// until the total budgets hold. Ties keep the unit in the lowest (i,j) cell.
std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> round_to_integer_plan(
    std::span<const double> delta_plus, std::span<const double> delta_minus,
    const ContingencyTable3& table, const SolverConfig& config);

// Full multi-start optimization: n_attempts independent seeded starts, best
// solution kept (ties to the lowest attempt index), delta-normalized, rounded
// to integers, re-evaluated and compared against the chi-square cutoff with
// J*(I-1) degrees of freedom. The best solution is initialized from the
// unadjusted table, so the returned plan never has a recomputed deviance
// above the base table's. Runs are deterministic in (table, config),
// regardless of num_threads.
AuditPlan optimize(const ContingencyTable3& table, const SolverConfig& config,
                   int num_threads = 1);

}  // namespace audit
