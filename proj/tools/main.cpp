// auditsamp: select representative audit samples by minimizing the deviance
// of the X-Z independence model under add/remove budgets, realize them as
// unit-level selections, and estimate category distributions and error
// probabilities from audited data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "auditsamp/csv.hpp"
#include "auditsamp/estimators.hpp"
#include "auditsamp/rng.hpp"
#include "auditsamp/sampler.hpp"
#include "auditsamp/simulation.hpp"
#include "auditsamp/solver.hpp"
#include "auditsamp/table.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct LabelMap {
    std::vector<std::string> labels;  // index -> label, 1-based externally
    std::map<std::string, int> index;

    int get_or_add(const std::string& label) {
        const auto it = index.find(label);
        if (it != index.end()) return it->second;
        labels.push_back(label);
        index[label] = static_cast<int>(labels.size());
        return static_cast<int>(labels.size());
    }
    int lookup(const std::string& label) const {
        const auto it = index.find(label);
        return it == index.end() ? -1 : it->second;
    }
};

struct UnitData {
    std::vector<audit::UnitRecord> units;
    LabelMap x_labels;
    LabelMap y_labels;
};

UnitData read_units(const std::string& path) {
    const audit::CsvTable csv = audit::read_csv(path);
    const int c_id = csv.require_column("unit_id");
    const int c_x = csv.require_column("x");
    const int c_y = csv.require_column("y");
    const int c_z = csv.require_column("z");
    UnitData data;
    data.units.reserve(csv.rows.size());
    for (std::size_t r = 0; r < csv.rows.size(); ++r) {
        const auto& row = csv.rows[r];
        audit::UnitRecord u;
        u.unit_id = row[c_id];
        u.x = data.x_labels.get_or_add(row[c_x]);
        u.y = data.y_labels.get_or_add(row[c_y]);
        if (row[c_z] == "0") {
            u.z_initial = 0;
        } else if (row[c_z] == "1") {
            u.z_initial = 1;
        } else {
            throw std::runtime_error(path + ":" + std::to_string(csv.line_numbers[r]) +
                                     ": z must be 0 or 1, got '" + row[c_z] + "'");
        }
        data.units.push_back(std::move(u));
    }
    if (data.units.empty()) throw std::runtime_error(path + ": no units");
    return data;
}

// Re-map units against a previously emitted mapping; new labels are an error.
UnitData read_units_with_mapping(const std::string& units_path,
                                 const std::string& mapping_path) {
    const audit::CsvTable csv = audit::read_csv(mapping_path);
    const int c_kind = csv.require_column("kind");
    const int c_idx = csv.require_column("index");
    const int c_label = csv.require_column("label");
    UnitData data;
    for (const auto& row : csv.rows) {
        LabelMap& map = row[c_kind] == "x" ? data.x_labels : data.y_labels;
        const int idx = std::stoi(row[c_idx]);
        if (idx != static_cast<int>(map.labels.size()) + 1) {
            throw std::runtime_error(mapping_path + ": indices must be contiguous from 1");
        }
        map.get_or_add(row[c_label]);
    }

    const audit::CsvTable ucsv = audit::read_csv(units_path);
    const int c_id = ucsv.require_column("unit_id");
    const int c_x = ucsv.require_column("x");
    const int c_y = ucsv.require_column("y");
    const int c_z = ucsv.require_column("z");
    std::vector<std::string> unknown;
    for (std::size_t r = 0; r < ucsv.rows.size(); ++r) {
        const auto& row = ucsv.rows[r];
        audit::UnitRecord u;
        u.unit_id = row[c_id];
        u.x = data.x_labels.lookup(row[c_x]);
        u.y = data.y_labels.lookup(row[c_y]);
        if (u.x < 0) unknown.push_back("x='" + row[c_x] + "'");
        if (u.y < 0) unknown.push_back("y='" + row[c_y] + "'");
        if (row[c_z] != "0" && row[c_z] != "1") {
            throw std::runtime_error(units_path + ":" + std::to_string(ucsv.line_numbers[r]) +
                                     ": z must be 0 or 1");
        }
        u.z_initial = row[c_z] == "1" ? 1 : 0;
        data.units.push_back(std::move(u));
    }
    if (!unknown.empty()) {
        std::sort(unknown.begin(), unknown.end());
        unknown.erase(std::unique(unknown.begin(), unknown.end()), unknown.end());
        std::string msg = units_path + ": labels absent from " + mapping_path + ":";
        for (const auto& s : unknown) msg += " " + s;
        throw std::runtime_error(msg);
    }
    return data;
}

void write_mapping(const fs::path& path, const UnitData& data) {
    audit::CsvTable csv;
    csv.header = {"kind", "index", "label"};
    for (std::size_t i = 0; i < data.x_labels.labels.size(); ++i) {
        csv.rows.push_back({"x", std::to_string(i + 1), data.x_labels.labels[i]});
    }
    for (std::size_t j = 0; j < data.y_labels.labels.size(); ++j) {
        csv.rows.push_back({"y", std::to_string(j + 1), data.y_labels.labels[j]});
    }
    audit::write_csv(path.string(), csv);
}

void write_plan_csv(const fs::path& path, const audit::AuditPlan& plan) {
    audit::CsvTable csv;
    csv.header = {"i", "j", "n_ij0", "n_ij1", "delta_plus", "delta_minus"};
    for (int i = 1; i <= plan.num_x; ++i) {
        for (int j = 1; j <= plan.num_y; ++j) {
            const std::size_t c = static_cast<std::size_t>(i - 1) * plan.num_y + (j - 1);
            csv.rows.push_back({std::to_string(i), std::to_string(j),
                                std::to_string(plan.base_n0[c]), std::to_string(plan.base_n1[c]),
                                std::to_string(plan.delta_plus[c]),
                                std::to_string(plan.delta_minus[c])});
        }
    }
    audit::write_csv(path.string(), csv);
}

void write_plan_summary(const fs::path& path, const audit::AuditPlan& plan,
                        const audit::SolverConfig& cfg) {
    audit::CsvTable csv;
    csv.header = {"d_before", "d_after", "cutoff", "accepted", "m_plus", "m_minus",
                  "total_added", "total_removed", "attempts", "best_attempt", "seed"};
    csv.rows.push_back({audit::format_double(plan.deviance_before),
                        audit::format_double(plan.achieved_deviance),
                        audit::format_double(plan.cutoff), plan.accepted ? "true" : "false",
                        std::to_string(cfg.m_plus), std::to_string(cfg.m_minus),
                        std::to_string(plan.total_added()), std::to_string(plan.total_removed()),
                        std::to_string(plan.attempts_run),
                        std::to_string(plan.best_attempt_index),
                        std::to_string(cfg.master_seed)});
    audit::write_csv(path.string(), csv);
}

audit::AuditPlan read_plan_csv(const std::string& path) {
    const audit::CsvTable csv = audit::read_csv(path);
    const int c_i = csv.require_column("i");
    const int c_j = csv.require_column("j");
    const int c_n0 = csv.require_column("n_ij0");
    const int c_n1 = csv.require_column("n_ij1");
    const int c_dp = csv.require_column("delta_plus");
    const int c_dm = csv.require_column("delta_minus");
    int I = 0, J = 0;
    for (const auto& row : csv.rows) {
        I = std::max(I, std::stoi(row[c_i]));
        J = std::max(J, std::stoi(row[c_j]));
    }
    if (I < 1 || J < 1) throw std::runtime_error(path + ": empty plan");
    audit::AuditPlan plan;
    plan.num_x = I;
    plan.num_y = J;
    const std::size_t cells = static_cast<std::size_t>(I) * J;
    plan.base_n0.assign(cells, 0);
    plan.base_n1.assign(cells, 0);
    plan.delta_plus.assign(cells, 0);
    plan.delta_minus.assign(cells, 0);
    for (const auto& row : csv.rows) {
        const std::size_t c =
            static_cast<std::size_t>(std::stoi(row[c_i]) - 1) * J + (std::stoi(row[c_j]) - 1);
        plan.base_n0[c] = std::stoll(row[c_n0]);
        plan.base_n1[c] = std::stoll(row[c_n1]);
        plan.delta_plus[c] = std::stoll(row[c_dp]);
        plan.delta_minus[c] = std::stoll(row[c_dm]);
    }
    return plan;
}

void write_manifest(const fs::path& path, const json& manifest) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << manifest.dump(2) << "\n";
}

std::uint64_t resolve_seed(std::int64_t seed_flag) {
    if (seed_flag >= 0) return static_cast<std::uint64_t>(seed_flag);
    std::random_device rd;
    const std::uint64_t seed =
        (static_cast<std::uint64_t>(rd()) << 32) ^ static_cast<std::uint64_t>(rd());
    std::cout << "seed: " << seed << "\n";
    return seed;
}

struct SolverFlags {
    std::int64_t m_plus = 0;
    std::int64_t m_minus = 0;
    std::string objective = "d";
    double lambda = 0.01;
    double kappa = 0.0;
    double alpha = 0.05;
    int attempts = 200;
    std::int64_t seed = -1;
    int threads = 0;

    void attach(CLI::App* cmd, bool with_budgets) {
        if (with_budgets) {
            cmd->add_option("--m-plus", m_plus, "max units to add to the audit sample")
                ->required();
            cmd->add_option("--m-minus", m_minus, "max previously audited units to remove")
                ->required();
        } else {
            cmd->add_option("--m-plus", m_plus, "max units to add per replicate");
            cmd->add_option("--m-minus", m_minus, "max units to remove per replicate");
        }
        cmd->add_option("--objective", objective, "objective: d, f1 or f2")
            ->check(CLI::IsMember({"d", "f1", "f2"}));
        cmd->add_option("--lambda", lambda, "penalty weight for --objective f1");
        cmd->add_option("--kappa", kappa, "damping scale for --objective f2 (0 = cutoff/10)");
        cmd->add_option("--alpha", alpha, "significance level for the chi-square cutoff");
        cmd->add_option("--attempts", attempts, "multi-start attempts");
        cmd->add_option("--seed", seed, "master seed (omitted: generated and printed)");
        cmd->add_option("--threads", threads, "worker threads (0 = hardware)");
    }

    audit::SolverConfig to_config() const {
        audit::SolverConfig cfg;
        cfg.m_plus = m_plus;
        cfg.m_minus = m_minus;
        cfg.n_attempts = attempts;
        cfg.alpha = alpha;
        if (objective == "f1") {
            cfg.objective.kind = audit::ObjectiveKind::LinearPenalty;
            cfg.objective.lambda = lambda;
        } else if (objective == "f2") {
            cfg.objective.kind = audit::ObjectiveKind::DampedPenalty;
            cfg.objective.kappa = kappa;
        }
        return cfg;
    }
    int resolve_threads() const {
        if (threads > 0) return threads;
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }
    json to_json() const {
        return json{{"m_plus", m_plus},   {"m_minus", m_minus}, {"objective", objective},
                    {"lambda", lambda},   {"kappa", kappa},     {"alpha", alpha},
                    {"attempts", attempts}};
    }
};

json base_manifest(const std::string& command, std::uint64_t seed) {
    return json{{"tool", "auditsamp"}, {"version", kVersion}, {"command", command},
                {"seed", seed}};
}

int cmd_plan(const std::string& units_path, const std::string& out_dir, SolverFlags& flags) {
    const UnitData data = read_units(units_path);
    const int I = static_cast<int>(data.x_labels.labels.size());
    const int J = static_cast<int>(data.y_labels.labels.size());
    const audit::ContingencyTable3 table = audit::tabulate(data.units, I, J);

    audit::SolverConfig cfg = flags.to_config();
    cfg.master_seed = resolve_seed(flags.seed);
    const audit::AuditPlan plan = audit::optimize(table, cfg, flags.resolve_threads());

    fs::create_directories(out_dir);
    write_plan_csv(fs::path(out_dir) / "plan.csv", plan);
    write_mapping(fs::path(out_dir) / "mapping.csv", data);
    write_plan_summary(fs::path(out_dir) / "summary.csv", plan, cfg);
    json manifest = base_manifest("plan", cfg.master_seed);
    manifest["solver"] = flags.to_json();
    manifest["inputs"] = {{"units", units_path}};
    manifest["table"] = {{"num_x", I}, {"num_y", J}, {"total", table.total()},
                         {"audit_size", table.audit_size()}};
    write_manifest(fs::path(out_dir) / "manifest.json", manifest);

    std::cout << "deviance before: " << audit::format_double(plan.deviance_before) << "\n"
              << "deviance after:  " << audit::format_double(plan.achieved_deviance) << "\n"
              << "cutoff (alpha=" << flags.alpha << ", df=" << J * (I - 1)
              << "): " << audit::format_double(plan.cutoff) << "\n"
              << "added " << plan.total_added() << ", removed " << plan.total_removed()
              << ", plan " << (plan.accepted ? "ACCEPTED" : "NOT ACCEPTED") << "\n";
    return plan.accepted ? 0 : 2;
}

int cmd_realize(const std::string& plan_path, const std::string& mapping_path,
                const std::string& units_path, const std::string& out_dir,
                std::int64_t seed_flag) {
    const audit::AuditPlan plan = read_plan_csv(plan_path);
    const UnitData data = read_units_with_mapping(units_path, mapping_path);
    const std::uint64_t seed = resolve_seed(seed_flag);
    const audit::SampleSelection sel = audit::realize(plan, data.units, seed);

    // cross-check: the realized table must equal the plan's adjusted counts
    std::vector<char> in_final(data.units.size(), 0);
    {
        std::map<std::string, std::size_t> pos;
        for (std::size_t g = 0; g < data.units.size(); ++g) {
            pos[data.units[g].unit_id] = g;
        }
        for (const auto& id : sel.final_sample) in_final[pos.at(id)] = 1;
        std::vector<std::int64_t> m1(static_cast<std::size_t>(plan.num_x) * plan.num_y, 0);
        for (std::size_t g = 0; g < data.units.size(); ++g) {
            if (in_final[g]) {
                ++m1[static_cast<std::size_t>(data.units[g].x - 1) * plan.num_y +
                     (data.units[g].y - 1)];
            }
        }
        for (std::size_t c = 0; c < m1.size(); ++c) {
            if (m1[c] != plan.base_n1[c] + plan.delta_plus[c] - plan.delta_minus[c]) {
                throw std::runtime_error("realize: internal count mismatch after realization");
            }
        }
    }

    fs::create_directories(out_dir);
    audit::CsvTable csv;
    csv.header = {"unit_id", "action"};
    for (std::size_t g = 0; g < data.units.size(); ++g) {
        const audit::UnitRecord& u = data.units[g];
        const char* action = u.z_initial == 1 ? (in_final[g] ? "keep-in" : "remove")
                                              : (in_final[g] ? "add" : "keep-out");
        csv.rows.push_back({u.unit_id, action});
    }
    audit::write_csv((fs::path(out_dir) / "selection.csv").string(), csv);
    json manifest = base_manifest("realize", seed);
    manifest["inputs"] = {{"plan", plan_path}, {"mapping", mapping_path},
                          {"units", units_path}};
    manifest["final_sample_size"] = sel.final_sample.size();
    write_manifest(fs::path(out_dir) / "manifest.json", manifest);

    std::cout << "added " << sel.added.size() << ", removed " << sel.removed.size()
              << ", final audit sample " << sel.final_sample.size() << " units\n";
    return 0;
}

int cmd_estimate(const std::string& audited_path, const std::string& margins_path,
                 const std::string& out_dir) {
    const audit::CsvTable mcsv = audit::read_csv(margins_path);
    const int c_my = mcsv.require_column("y");
    const int c_mp = mcsv.require_column("proportion");
    LabelMap y_labels;
    audit::PopulationMargins margins;
    for (const auto& row : mcsv.rows) {
        y_labels.get_or_add(row[c_my]);
        margins.p_y.push_back(std::stod(row[c_mp]));
    }
    margins.validate();

    const audit::CsvTable acsv = audit::read_csv(audited_path);
    const int c_w = acsv.require_column("w");
    const int c_x = acsv.require_column("x");
    const int c_y = acsv.require_column("y");
    LabelMap w_labels, x_labels;
    std::vector<audit::AuditedRecord> recs;
    std::vector<std::string> unknown;
    for (const auto& row : acsv.rows) {
        audit::AuditedRecord rec;
        rec.w = w_labels.get_or_add(row[c_w]);
        rec.x = x_labels.get_or_add(row[c_x]);
        rec.y = y_labels.lookup(row[c_y]);
        if (rec.y < 0) {
            unknown.push_back("'" + row[c_y] + "'");
            continue;
        }
        recs.push_back(rec);
    }
    if (!unknown.empty()) {
        std::sort(unknown.begin(), unknown.end());
        unknown.erase(std::unique(unknown.begin(), unknown.end()), unknown.end());
        std::string msg = audited_path + ": y labels absent from " + margins_path + ":";
        for (const auto& s : unknown) msg += " " + s;
        throw std::runtime_error(msg);
    }
    const audit::AuditedData data(std::move(recs), margins.num_y());
    const audit::EstimateReport rep = audit::make_report(data, margins);

    fs::create_directories(out_dir);
    audit::CsvTable csv;
    csv.header = {"parameter", "w", "x", "estimate", "se"};
    for (int w = 1; w <= rep.num_w; ++w) {
        csv.rows.push_back({"p_w", w_labels.labels[w - 1], "",
                            audit::format_double(rep.p_w[w - 1]),
                            audit::format_double(rep.se_p_w[w - 1])});
    }
    for (int w = 1; w <= rep.num_w; ++w) {
        for (int x = 1; x <= rep.num_x; ++x) {
            const std::size_t k = static_cast<std::size_t>(w - 1) * rep.num_x + (x - 1);
            csv.rows.push_back({"p_x_given_w", w_labels.labels[w - 1], x_labels.labels[x - 1],
                                audit::format_double(rep.p_x_given_w[k]),
                                audit::format_double(rep.se_p_x_given_w[k])});
        }
    }
    audit::write_csv((fs::path(out_dir) / "report.csv").string(), csv);

    std::ofstream txt(fs::path(out_dir) / "report.txt", std::ios::binary);
    txt << "audit estimate report\n";
    txt << "audited units: " << data.size() << "\n";
    txt << "strata (y, n_y, population share):\n";
    for (int y = 1; y <= data.num_y(); ++y) {
        txt << "  " << y_labels.labels[y - 1] << "  " << rep.stratum_sizes[y - 1] << "  "
            << audit::format_double(margins.p_y[y - 1]) << "\n";
    }
    if (!rep.single_unit_strata.empty()) {
        txt << "note: strata with a single audited unit make the variance estimates "
               "unreliable:";
        for (int y : rep.single_unit_strata) txt << " " << y_labels.labels[y - 1];
        txt << "\n";
    }
    txt << "\nestimated category distribution P(W = w):\n";
    for (int w = 1; w <= rep.num_w; ++w) {
        txt << "  " << w_labels.labels[w - 1] << "  " << audit::format_double(rep.p_w[w - 1])
            << "  (se " << audit::format_double(rep.se_p_w[w - 1]) << ")\n";
    }
    txt << "\nestimated error probabilities P(X = x | W = w):\n";
    for (int w = 1; w <= rep.num_w; ++w) {
        for (int x = 1; x <= rep.num_x; ++x) {
            const std::size_t k = static_cast<std::size_t>(w - 1) * rep.num_x + (x - 1);
            txt << "  w=" << w_labels.labels[w - 1] << " x=" << x_labels.labels[x - 1] << "  "
                << audit::format_double(rep.p_x_given_w[k]) << "  (se "
                << audit::format_double(rep.se_p_x_given_w[k]) << ")\n";
        }
    }
    txt << "\nStandard errors treat the audit sample as a stratified simple random\n"
           "sample without finite-population correction. For samples produced by\n"
           "the deviance-minimizing planner they tend to overestimate the realized\n"
           "sampling variability.\n";

    json manifest = base_manifest("estimate", 0);
    manifest.erase("seed");
    manifest["inputs"] = {{"audited", audited_path}, {"margins", margins_path}};
    manifest["n"] = data.size();
    manifest["negative_variance_clamps"] = rep.negative_variance_clamps;
    write_manifest(fs::path(out_dir) / "manifest.json", manifest);

    std::cout << "estimated " << rep.num_w << " categories from " << data.size()
              << " audited units across " << data.num_y() << " strata\n";
    return 0;
}

int cmd_simulate(const std::string& study, int wx, int wy, int xz,
                 const std::string& scale_name, int replicates, int n_pop,
                 const std::string& out_dir, SolverFlags& flags) {
    const audit::Scale scale =
        scale_name == "paper" ? audit::Scale::Paper : audit::Scale::Desk;
    const std::uint64_t seed = resolve_seed(flags.seed);
    const int threads = flags.resolve_threads();
    fs::create_directories(out_dir);

    json manifest = base_manifest("simulate", seed);
    manifest["study"] = study;
    manifest["scale"] = scale_name;

    if (study == "bias") {
        audit::ConditionSpec cond = audit::make_condition(wx, wy, xz, scale);
        if (replicates > 0) cond.n_replicates = replicates;
        if (n_pop > 0) cond.n_pop = n_pop;
        if (flags.m_plus > 0) cond.solver.m_plus = flags.m_plus;
        if (flags.m_minus > 0) cond.solver.m_minus = flags.m_minus;
        if (flags.attempts > 0) cond.solver.n_attempts = flags.attempts;
        const auto results = audit::run_condition(cond, seed, threads);

        audit::CsvTable csv;
        csv.header = {"replicate", "deviance_before", "deviance_after", "relative_deviance"};
        for (int k = 1; k <= 3; ++k) {
            csv.header.push_back("bias_pw" + std::to_string(k) + "_before");
        }
        for (int k = 1; k <= 3; ++k) {
            csv.header.push_back("bias_pw" + std::to_string(k) + "_after");
        }
        for (int w = 1; w <= 3; ++w) {
            for (int x = 1; x <= 3; ++x) {
                csv.header.push_back("bias_px" + std::to_string(x) + "w" + std::to_string(w) +
                                     "_before");
                csv.header.push_back("bias_px" + std::to_string(x) + "w" + std::to_string(w) +
                                     "_after");
            }
        }
        for (std::size_t r = 0; r < results.size(); ++r) {
            const auto& res = results[r];
            std::vector<std::string> row = {std::to_string(r),
                                            audit::format_double(res.deviance_before),
                                            audit::format_double(res.deviance_after),
                                            audit::format_double(res.relative_deviance)};
            for (double v : res.bias_pw_before) row.push_back(audit::format_double(v));
            for (double v : res.bias_pw_after) row.push_back(audit::format_double(v));
            for (int w = 0; w < 3; ++w) {
                for (int x = 0; x < 3; ++x) {
                    row.push_back(audit::format_double(res.bias_pxw_before[w * 3 + x]));
                    row.push_back(audit::format_double(res.bias_pxw_after[w * 3 + x]));
                }
            }
            csv.rows.push_back(std::move(row));
        }
        audit::write_csv((fs::path(out_dir) / "replicates.csv").string(), csv);

        std::vector<double> rel;
        double mean_abs_before = 0.0, mean_abs_after = 0.0;
        for (const auto& res : results) {
            if (!std::isnan(res.relative_deviance)) rel.push_back(res.relative_deviance);
            mean_abs_before += std::abs(res.bias_pw_before[0]);
            mean_abs_after += std::abs(res.bias_pw_after[0]);
        }
        std::sort(rel.begin(), rel.end());
        const double median_rel =
            rel.empty()
                ? 0.0
                : (rel.size() % 2 == 1
                       ? rel[rel.size() / 2]
                       : 0.5 * (rel[rel.size() / 2 - 1] + rel[rel.size() / 2]));
        audit::CsvTable sum;
        sum.header = {"condition", "replicates", "median_relative_deviance",
                      "mean_abs_bias_pw1_before", "mean_abs_bias_pw1_after"};
        sum.rows.push_back({"WX" + std::to_string(wx) + ",WY" + std::to_string(wy) + ",XZ" +
                                std::to_string(xz),
                            std::to_string(results.size()), audit::format_double(median_rel),
                            audit::format_double(mean_abs_before / results.size()),
                            audit::format_double(mean_abs_after / results.size())});
        audit::write_csv((fs::path(out_dir) / "summary.csv").string(), sum);
        manifest["condition"] = {{"wx", wx}, {"wy", wy}, {"xz", xz},
                                 {"n_pop", cond.n_pop}, {"replicates", cond.n_replicates}};
        manifest["solver"] = {{"m_plus", cond.solver.m_plus},
                              {"m_minus", cond.solver.m_minus},
                              {"attempts", cond.solver.n_attempts}};
        std::cout << "ran " << results.size() << " replicates; median relative deviance "
                  << audit::format_double(median_rel) << "\n";
    } else {
        auto conditions = audit::variance_study_conditions(scale);
        for (auto& cond : conditions) {
            if (replicates > 0) cond.n_replicates = replicates;
            if (n_pop > 0) cond.n_pop = n_pop;
            if (flags.attempts > 0) cond.solver.n_attempts = flags.attempts;
        }
        const auto rows = audit::run_variance_study(conditions, seed, threads);

        const auto cond_name = [](const audit::ConditionSpec& c) {
            std::string name = "WX" + std::to_string(c.wx_variant) + ",WY" +
                               std::to_string(c.wy_variant) + ",XZ" +
                               std::to_string(c.xz_variant);
            if (!c.apply_optimization) name += "*";
            return name;
        };
        audit::CsvTable pw;
        pw.header = {"condition", "sd_w1", "sd_w2", "sd_w3", "ratio_w1", "ratio_w2",
                     "ratio_w3"};
        for (const auto& row : rows) {
            std::vector<std::string> r = {cond_name(row.condition)};
            for (double v : row.empirical_sd_pw) r.push_back(audit::format_double(v));
            for (double v : row.ratio_pw) r.push_back(audit::format_double(v));
            pw.rows.push_back(std::move(r));
        }
        audit::write_csv((fs::path(out_dir) / "sesd_pw.csv").string(), pw);

        audit::CsvTable pxw;
        pxw.header = {"condition"};
        for (int w = 1; w <= 3; ++w) {
            for (int x = 1; x <= 3; ++x) {
                pxw.header.push_back("ratio_x" + std::to_string(x) + "w" + std::to_string(w));
            }
        }
        for (const auto& row : rows) {
            std::vector<std::string> r = {cond_name(row.condition)};
            for (double v : row.ratio_pxw) r.push_back(audit::format_double(v));
            pxw.rows.push_back(std::move(r));
        }
        audit::write_csv((fs::path(out_dir) / "sesd_pxw.csv").string(), pxw);
        manifest["conditions"] = json::array();
        for (const auto& cond : conditions) {
            manifest["conditions"].push_back(
                {{"name", cond_name(cond)}, {"replicates", cond.n_replicates}});
        }
        std::cout << "variance study finished: " << rows.size() << " conditions\n";
    }
    write_manifest(fs::path(out_dir) / "manifest.json", manifest);
    return 0;
}

int cmd_sweep(const std::string& units_path, const std::string& out_dir,
              const std::vector<std::int64_t>& m_plus_list,
              const std::vector<double>& factor_list, SolverFlags& flags) {
    const UnitData data = read_units(units_path);
    const int I = static_cast<int>(data.x_labels.labels.size());
    const int J = static_cast<int>(data.y_labels.labels.size());
    const audit::ContingencyTable3 table = audit::tabulate(data.units, I, J);
    const std::uint64_t seed = resolve_seed(flags.seed);
    const int threads = flags.resolve_threads();

    fs::create_directories(out_dir);
    audit::CsvTable csv;
    csv.header = {"m_plus", "m_minus_factor", "m_minus", "d_before", "d_after", "cutoff",
                  "accepted", "total_added", "total_removed"};
    int combo = 0;
    for (const std::int64_t mp : m_plus_list) {
        for (const double factor : factor_list) {
            audit::SolverConfig cfg = flags.to_config();
            cfg.m_plus = std::min<std::int64_t>(mp, table.total() - table.audit_size());
            cfg.m_minus = std::min<std::int64_t>(
                static_cast<std::int64_t>(factor * static_cast<double>(mp)),
                table.audit_size());
            cfg.master_seed = audit::derive_seed(seed, combo++);
            const audit::AuditPlan plan = audit::optimize(table, cfg, threads);
            csv.rows.push_back({std::to_string(mp), audit::format_double(factor),
                                std::to_string(cfg.m_minus),
                                audit::format_double(plan.deviance_before),
                                audit::format_double(plan.achieved_deviance),
                                audit::format_double(plan.cutoff),
                                plan.accepted ? "true" : "false",
                                std::to_string(plan.total_added()),
                                std::to_string(plan.total_removed())});
            std::cout << "m_plus=" << mp << " factor=" << factor << " -> deviance "
                      << audit::format_double(plan.achieved_deviance)
                      << (plan.accepted ? " (accepted)" : " (above cutoff)") << "\n";
        }
    }
    audit::write_csv((fs::path(out_dir) / "sweep.csv").string(), csv);
    json manifest = base_manifest("sweep", seed);
    manifest["solver"] = flags.to_json();
    manifest["inputs"] = {{"units", units_path}};
    manifest["m_plus_list"] = m_plus_list;
    manifest["m_minus_factor_list"] = factor_list;
    write_manifest(fs::path(out_dir) / "manifest.json", manifest);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"representative audit sample selection"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("auditsamp ") + kVersion);

    auto* plan = app.add_subcommand("plan", "optimize an audit plan from unit-level data");
    std::string plan_units, plan_out = "plan_out";
    SolverFlags plan_flags;
    plan->add_option("--units", plan_units, "unit CSV (unit_id,x,y,z)")->required();
    plan->add_option("--out-dir", plan_out, "output directory");
    plan_flags.attach(plan, true);

    auto* realize = app.add_subcommand("realize", "draw the unit-level sample for a plan");
    std::string rz_plan, rz_mapping, rz_units, rz_out = "realize_out";
    std::int64_t rz_seed = -1;
    realize->add_option("--plan", rz_plan, "plan.csv from the plan step")->required();
    realize->add_option("--mapping", rz_mapping, "mapping.csv from the plan step")->required();
    realize->add_option("--units", rz_units, "unit CSV (unit_id,x,y,z)")->required();
    realize->add_option("--out-dir", rz_out, "output directory");
    realize->add_option("--seed", rz_seed, "sampling seed (omitted: generated and printed)");

    auto* estimate = app.add_subcommand("estimate", "estimate from an audited sample");
    std::string es_audited, es_margins, es_out = "estimate_out";
    estimate->add_option("--audited", es_audited, "audited CSV (unit_id,w,x,y)")->required();
    estimate->add_option("--margins", es_margins, "margins CSV (y,proportion)")->required();
    estimate->add_option("--out-dir", es_out, "output directory");

    auto* simulate = app.add_subcommand("simulate", "run the simulation studies");
    std::string sim_study = "bias", sim_scale = "desk", sim_out = "simulate_out";
    int sim_wx = 1, sim_wy = 1, sim_xz = 1, sim_replicates = 0, sim_npop = 0;
    SolverFlags sim_flags;
    sim_flags.attempts = 0;
    simulate->add_option("--study", sim_study, "bias or variance")
        ->check(CLI::IsMember({"bias", "variance"}));
    simulate->add_option("--wx", sim_wx, "W-X block variant 1..4")->check(CLI::Range(1, 4));
    simulate->add_option("--wy", sim_wy, "W-Y block variant 1..4")->check(CLI::Range(1, 4));
    simulate->add_option("--xz", sim_xz, "X-Z block variant 1..4")->check(CLI::Range(1, 4));
    simulate->add_option("--scale", sim_scale, "desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    simulate->add_option("--replicates", sim_replicates, "override replicate count");
    simulate->add_option("--n-pop", sim_npop, "override population size");
    simulate->add_option("--out-dir", sim_out, "output directory");
    sim_flags.attach(simulate, false);

    auto* sweep = app.add_subcommand("sweep", "tabulate plans over budget combinations");
    std::string sw_units, sw_out = "sweep_out";
    std::vector<std::int64_t> sw_mplus;
    std::vector<double> sw_factors;
    SolverFlags sw_flags;
    sweep->add_option("--units", sw_units, "unit CSV (unit_id,x,y,z)")->required();
    sweep->add_option("--sweep-m-plus", sw_mplus, "list of m_plus values")
        ->required()
        ->delimiter(',');
    sweep->add_option("--sweep-m-minus-factor", sw_factors, "m_minus = factor * m_plus (list)")
        ->required()
        ->delimiter(',');
    sweep->add_option("--out-dir", sw_out, "output directory");
    sw_flags.attach(sweep, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (plan->parsed()) return cmd_plan(plan_units, plan_out, plan_flags);
        if (realize->parsed()) {
            return cmd_realize(rz_plan, rz_mapping, rz_units, rz_out, rz_seed);
        }
        if (estimate->parsed()) return cmd_estimate(es_audited, es_margins, es_out);
        if (simulate->parsed()) {
            return cmd_simulate(sim_study, sim_wx, sim_wy, sim_xz, sim_scale, sim_replicates,
                                sim_npop, sim_out, sim_flags);
        }
        if (sweep->parsed()) return cmd_sweep(sw_units, sw_out, sw_mplus, sw_factors, sw_flags);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
