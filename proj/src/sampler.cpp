#include "auditsamp/sampler.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

#include "auditsamp/rng.hpp"

namespace audit {

namespace {

// First `take` elements of a Fisher-Yates partial shuffle of `pool`.
std::vector<const std::string*> draw_without_replacement(
    std::vector<const std::string*>& pool, std::size_t take, Rng& rng) {
    for (std::size_t t = 0; t < take; ++t) {
        const std::size_t j = t + uniform_below(rng, pool.size() - t);
        std::swap(pool[t], pool[j]);
    }
    return {pool.begin(), pool.begin() + take};
}

}  // namespace

ContingencyTable3 tabulate(std::span<const UnitRecord> units, int num_x, int num_y) {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(num_x) * num_y * 2, 0);
    for (const UnitRecord& u : units) {
        if (u.x < 1 || u.x > num_x || u.y < 1 || u.y > num_y ||
            (u.z_initial != 0 && u.z_initial != 1)) {
            throw std::invalid_argument("tabulate: unit '" + u.unit_id +
                                        "' has out-of-range categories");
        }
        ++counts[ContingencyTable3::index(u.x, u.y, u.z_initial, num_y)];
    }
    return ContingencyTable3(num_x, num_y, std::move(counts));
}

SampleSelection realize(const AuditPlan& plan, std::span<const UnitRecord> units,
                        std::uint64_t seed) {
    const int I = plan.num_x;
    const int J = plan.num_y;
    const std::size_t cells = static_cast<std::size_t>(I) * J;
    if (plan.delta_plus.size() != cells || plan.delta_minus.size() != cells ||
        plan.base_n0.size() != cells || plan.base_n1.size() != cells) {
        throw std::invalid_argument("realize: malformed plan");
    }

    std::vector<std::vector<const std::string*>> pool0(cells), pool1(cells);
    std::unordered_set<std::string_view> seen;
    seen.reserve(units.size());
    for (const UnitRecord& u : units) {
        if (u.x < 1 || u.x > I || u.y < 1 || u.y > J ||
            (u.z_initial != 0 && u.z_initial != 1)) {
            throw std::invalid_argument("realize: unit '" + u.unit_id +
                                        "' has out-of-range categories");
        }
        if (!seen.insert(u.unit_id).second) {
            throw std::invalid_argument("realize: duplicate unit_id '" + u.unit_id + "'");
        }
        const std::size_t c = static_cast<std::size_t>(u.x - 1) * J + (u.y - 1);
        (u.z_initial == 1 ? pool1 : pool0)[c].push_back(&u.unit_id);
    }

    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            const std::size_t c = static_cast<std::size_t>(i - 1) * J + (j - 1);
            if (static_cast<std::int64_t>(pool0[c].size()) != plan.base_n0[c] ||
                static_cast<std::int64_t>(pool1[c].size()) != plan.base_n1[c]) {
                throw std::invalid_argument(
                    "realize: stratum (i=" + std::to_string(i) + ", j=" + std::to_string(j) +
                    ") has " + std::to_string(pool0[c].size()) + "/" +
                    std::to_string(pool1[c].size()) + " units with z=0/1, plan expects " +
                    std::to_string(plan.base_n0[c]) + "/" + std::to_string(plan.base_n1[c]));
            }
            if (plan.delta_plus[c] < 0 || plan.delta_plus[c] > plan.base_n0[c] ||
                plan.delta_minus[c] < 0 || plan.delta_minus[c] > plan.base_n1[c]) {
                throw std::invalid_argument("realize: plan deltas exceed the pool in stratum (i=" +
                                            std::to_string(i) + ", j=" + std::to_string(j) + ")");
            }
        }
    }

    SampleSelection sel;
    sel.seed = seed;
    sel.add_inclusion_prob.assign(cells, 0.0);
    std::unordered_set<std::string_view> removed_set;

    const auto by_id = [](const std::string* a, const std::string* b) { return *a < *b; };
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            const std::size_t c = static_cast<std::size_t>(i - 1) * J + (j - 1);
            const std::int64_t dp = plan.delta_plus[c];
            const std::int64_t dm = plan.delta_minus[c];
            if (dp == 0 && dm == 0) continue;
            Rng rng = make_rng(derive_seed(seed, static_cast<std::uint64_t>(i),
                                           static_cast<std::uint64_t>(j)));
            if (dp > 0) {
                std::sort(pool0[c].begin(), pool0[c].end(), by_id);
                for (const std::string* id :
                     draw_without_replacement(pool0[c], static_cast<std::size_t>(dp), rng)) {
                    sel.added.push_back(*id);
                }
                sel.add_inclusion_prob[c] =
                    static_cast<double>(dp) / static_cast<double>(plan.base_n0[c]);
            }
            if (dm > 0) {
                std::sort(pool1[c].begin(), pool1[c].end(), by_id);
                for (const std::string* id :
                     draw_without_replacement(pool1[c], static_cast<std::size_t>(dm), rng)) {
                    sel.removed.push_back(*id);
                    removed_set.insert(*id);
                }
            }
        }
    }

    for (const UnitRecord& u : units) {
        if (u.z_initial == 1 && !removed_set.contains(u.unit_id)) {
            sel.final_sample.push_back(u.unit_id);
        }
    }
    sel.final_sample.insert(sel.final_sample.end(), sel.added.begin(), sel.added.end());
    std::sort(sel.added.begin(), sel.added.end());
    std::sort(sel.removed.begin(), sel.removed.end());
    std::sort(sel.final_sample.begin(), sel.final_sample.end());
    return sel;
}

}  // namespace audit
