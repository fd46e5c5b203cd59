#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "auditsamp/solver.hpp"
#include "auditsamp/table.hpp"

namespace audit {

// One population unit: opaque identifier, X category, Y stratum, and whether
// it sits in the audit sample before any adjustment.
struct UnitRecord {
    std::string unit_id;
    int x = 0;
    int y = 0;
    int z_initial = 0;
};

// The realized unit-level outcome of a plan. All id vectors are sorted.
struct SampleSelection {
    std::vector<std::string> added;         // moved 0 -> 1
    std::vector<std::string> removed;       // moved 1 -> 0
    std::vector<std::string> final_sample;  // all units with final Z = 1
    // Inclusion probability delta_plus_ij / n_ij0 of the added units, per
    // (i,j) cell in row-major order; 0 where nothing is added.
    std::vector<double> add_inclusion_prob;
    std::uint64_t seed = 0;
};

// Count the units into a ContingencyTable3 over (x, y, z_initial).
ContingencyTable3 tabulate(std::span<const UnitRecord> units, int num_x, int num_y);

// Realize an integer plan by stratified simple random sampling without
// replacement: per stratum, delta_plus units are drawn from the z=0 pool and
// delta_minus units from the z=1 pool. Each stratum draws from its own
// substream of `seed`, over unit ids in sorted order, so results do not
// depend on the input ordering and other strata's draws. Throws if the
// stratum counts of `units` do not match the plan's base table.
SampleSelection realize(const AuditPlan& plan, std::span<const UnitRecord> units,
                        std::uint64_t seed);

}  // namespace audit
