#include "auditsamp/solver.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>

#include "auditsamp/chi_square.hpp"
#include "auditsamp/rng.hpp"

namespace audit {

namespace {

constexpr double kEpsOffset = 1e-6;  // interior offset from the raw bounds
constexpr double kInf = std::numeric_limits<double>::infinity();

inline double xlogx(double v) { return v > 0.0 ? v * std::log(v) : 0.0; }

// Free-parameter view of one minimization instance. Parameters are the
// delta_plus entries of cells with n_ij0 > 0 (when m_plus > 0) followed by
// the delta_minus entries of cells with n_ij1 > 0 (when m_minus > 0).
struct Problem {
    int I = 0;
    int J = 0;
    std::vector<double> base0, base1;  // n_ij0 / n_ij1 per cell
    int n_plus = 0;                    // number of delta_plus parameters
    std::vector<int> cell_of;          // parameter -> cell index
    std::vector<double> cap;           // parameter -> per-cell upper bound
    double budget_plus = 0.0;
    double budget_minus = 0.0;
    ObjectiveSpec obj;
    double const_term = 0.0;  // margins-only part of the deviance

    int n_params() const { return static_cast<int>(cell_of.size()); }
    int cells() const { return I * J; }
};

Problem make_problem(const ContingencyTable3& table, const SolverConfig& config) {
    Problem pb;
    pb.I = table.num_x();
    pb.J = table.num_y();
    pb.base0.resize(pb.cells());
    pb.base1.resize(pb.cells());
    for (int i = 1; i <= pb.I; ++i) {
        for (int j = 1; j <= pb.J; ++j) {
            const std::size_t c = table.cell(i, j);
            pb.base0[c] = static_cast<double>(table.count(i, j, 0));
            pb.base1[c] = static_cast<double>(table.count(i, j, 1));
        }
    }
    if (config.m_plus > 0) {
        for (int c = 0; c < pb.cells(); ++c) {
            if (pb.base0[c] > 0.0) {
                pb.cell_of.push_back(c);
                pb.cap.push_back(pb.base0[c]);
            }
        }
    }
    pb.n_plus = static_cast<int>(pb.cell_of.size());
    if (config.m_minus > 0) {
        for (int c = 0; c < pb.cells(); ++c) {
            if (pb.base1[c] > 0.0) {
                pb.cell_of.push_back(c);
                pb.cap.push_back(pb.base1[c]);
            }
        }
    }
    pb.budget_plus = static_cast<double>(config.m_plus);
    pb.budget_minus = static_cast<double>(config.m_minus);
    pb.obj = config.objective;
    pb.const_term = constant_term(table);
    return pb;
}

struct Value {
    double f = kInf;    // raw objective
    double phi = kInf;  // barrier merit
    double dev = 0.0;
    double dsum = 0.0;
};

struct Evaluator {
    const Problem& pb;
    std::vector<double> m1, m0, s1, s0;

    explicit Evaluator(const Problem& p)
        : pb(p), m1(p.cells()), m0(p.cells()), s1(p.J), s0(p.J) {}

    // Adjusted counts and stratum sums for x; returns deviance and delta sum.
    void build(std::span<const double> x, double& dev, double& dsum) {
        std::copy(pb.base1.begin(), pb.base1.end(), m1.begin());
        std::copy(pb.base0.begin(), pb.base0.end(), m0.begin());
        dsum = 0.0;
        for (int t = 0; t < pb.n_params(); ++t) {
            const int c = pb.cell_of[t];
            const double d = x[t];
            dsum += d;
            if (t < pb.n_plus) {
                m1[c] += d;
                m0[c] -= d;
            } else {
                m1[c] -= d;
                m0[c] += d;
            }
        }
        std::fill(s1.begin(), s1.end(), 0.0);
        std::fill(s0.begin(), s0.end(), 0.0);
        double cell_terms = 0.0;
        for (int c = 0; c < pb.cells(); ++c) {
            const int j = c % pb.J;
            s1[j] += m1[c];
            s0[j] += m0[c];
            cell_terms += xlogx(m1[c]) + xlogx(m0[c]);
        }
        double stratum_terms = 0.0;
        for (int j = 0; j < pb.J; ++j) {
            stratum_terms += xlogx(s1[j]) + xlogx(s0[j]);
        }
        dev = pb.const_term + 2.0 * cell_terms - 2.0 * stratum_terms;
        if (dev < 0.0) dev = 0.0;  // floating-point noise near an exact fit
    }

    double raw_objective(double dev, double dsum) const {
        switch (pb.obj.kind) {
            case ObjectiveKind::Deviance:
                return dev;
            case ObjectiveKind::LinearPenalty:
                return dev + pb.obj.lambda * dsum;
            case ObjectiveKind::DampedPenalty:
                return dev + std::exp(-dev / pb.obj.kappa) * dsum;
        }
        return dev;
    }

    // Log-barrier over the offset-feasible region; +inf outside it.
    double barrier(std::span<const double> x, double& sum_plus, double& sum_minus) const {
        double b = 0.0;
        sum_plus = 0.0;
        sum_minus = 0.0;
        for (int t = 0; t < pb.n_params(); ++t) {
            const double sl = x[t] - kEpsOffset;
            const double sh = (pb.cap[t] - kEpsOffset) - x[t];
            if (!(sl > 0.0) || !(sh > 0.0)) return kInf;
            b -= std::log(sl) + std::log(sh);
            (t < pb.n_plus ? sum_plus : sum_minus) += x[t];
        }
        if (pb.n_plus > 0) {
            const double slack = (pb.budget_plus - kEpsOffset) - sum_plus;
            if (!(slack > 0.0)) return kInf;
            b -= std::log(slack);
        }
        if (pb.n_params() > pb.n_plus) {
            const double slack = (pb.budget_minus - kEpsOffset) - sum_minus;
            if (!(slack > 0.0)) return kInf;
            b -= std::log(slack);
        }
        return b;
    }

    Value eval(std::span<const double> x, double mu) {
        Value v;
        double sp = 0.0, sm = 0.0;
        const double b = barrier(x, sp, sm);
        if (b == kInf) return v;
        build(x, v.dev, v.dsum);
        v.f = raw_objective(v.dev, v.dsum);
        v.phi = v.f + mu * b;
        return v;
    }

    // Gradient of the barrier merit. Assumes build() last ran at this x.
    void grad_phi(std::span<const double> x, double mu, const Value& at,
                  std::span<double> g) const {
        const double expfac = pb.obj.kind == ObjectiveKind::DampedPenalty
                                  ? std::exp(-at.dev / pb.obj.kappa)
                                  : 0.0;
        double sum_plus = 0.0, sum_minus = 0.0;
        for (int t = 0; t < pb.n_params(); ++t) {
            (t < pb.n_plus ? sum_plus : sum_minus) += x[t];
        }
        const double slack_plus = (pb.budget_plus - kEpsOffset) - sum_plus;
        const double slack_minus = (pb.budget_minus - kEpsOffset) - sum_minus;
        for (int t = 0; t < pb.n_params(); ++t) {
            const int c = pb.cell_of[t];
            const int j = c % pb.J;
            double gd = 2.0 * (std::log(m1[c]) - std::log(m0[c]) - std::log(s1[j]) +
                               std::log(s0[j]));
            if (t >= pb.n_plus) gd = -gd;
            double gf = gd;
            if (pb.obj.kind == ObjectiveKind::LinearPenalty) {
                gf += pb.obj.lambda;
            } else if (pb.obj.kind == ObjectiveKind::DampedPenalty) {
                gf += expfac * (1.0 - gd * at.dsum / pb.obj.kappa);
            }
            gf += mu * (-1.0 / (x[t] - kEpsOffset) +
                        1.0 / ((pb.cap[t] - kEpsOffset) - x[t]));
            gf += mu / (t < pb.n_plus ? slack_plus : slack_minus);
            g[t] = gf;
        }
    }
};

struct SolveResult {
    std::vector<double> x;
    double f = kInf;
};

// Largest step from x along d that keeps every slack strictly positive.
double max_feasible_step(const Problem& pb, std::span<const double> x,
                         std::span<const double> d) {
    double tmax = kInf;
    double dir_plus = 0.0, dir_minus = 0.0;
    double sum_plus = 0.0, sum_minus = 0.0;
    for (int t = 0; t < pb.n_params(); ++t) {
        if (d[t] > 0.0) {
            tmax = std::min(tmax, ((pb.cap[t] - kEpsOffset) - x[t]) / d[t]);
        } else if (d[t] < 0.0) {
            tmax = std::min(tmax, (x[t] - kEpsOffset) / -d[t]);
        }
        if (t < pb.n_plus) {
            dir_plus += d[t];
            sum_plus += x[t];
        } else {
            dir_minus += d[t];
            sum_minus += x[t];
        }
    }
    if (pb.n_plus > 0 && dir_plus > 0.0) {
        tmax = std::min(tmax, ((pb.budget_plus - kEpsOffset) - sum_plus) / dir_plus);
    }
    if (pb.n_params() > pb.n_plus && dir_minus > 0.0) {
        tmax = std::min(tmax, ((pb.budget_minus - kEpsOffset) - sum_minus) / dir_minus);
    }
    return tmax;
}

// Barrier rounds: gradient descent with a Barzilai-Borwein step guess and
// Armijo backtracking on the merit, barrier weight shrunk x0.2 per round.
SolveResult solve_from(const Problem& pb, const SolverConfig& config, std::vector<double> x,
                       SolveTrace* trace) {
    const int P = pb.n_params();
    Evaluator ev(pb);
    SolveResult best;
    if (P == 0) {
        best.x = std::move(x);
        double dev = 0.0, dsum = 0.0;
        ev.build(best.x, dev, dsum);
        best.f = ev.raw_objective(dev, dsum);
        return best;
    }

    {
        const Value v0 = ev.eval(x, 0.0);
        if (!std::isfinite(v0.phi)) {
            throw std::invalid_argument("solver: start is not strictly feasible");
        }
        best.x = x;
        best.f = v0.f;
    }

    std::vector<double> g(P), gn(P), d(P), xn(P);
    double mu = 1.0;
    constexpr int kRounds = 8;
    for (int round = 0; round < kRounds; ++round, mu *= 0.2) {
        Value val = ev.eval(x, mu);
        ev.grad_phi(x, mu, val, g);
        std::vector<double>* merits = nullptr;
        if (trace) {
            trace->merit_per_round.emplace_back();
            merits = &trace->merit_per_round.back();
            merits->push_back(val.phi);
        }
        double gnorm2 = 0.0;
        for (double v : g) gnorm2 += v * v;
        double t_guess = 1.0 / (1.0 + std::sqrt(gnorm2));

        for (int iter = 0; iter < config.max_inner_iters; ++iter) {
            if (gnorm2 <= 1e-24 * std::max(1.0, val.f * val.f)) break;
            for (int t = 0; t < P; ++t) d[t] = -g[t];
            const double tmax = max_feasible_step(pb, x, d);
            if (!(tmax > 0.0)) break;
            double step = std::min(t_guess, 0.995 * tmax);
            const double slope = -gnorm2;

            Value vn;
            bool accepted = false;
            for (int bt = 0; bt < 60 && step > 0.0; ++bt) {
                for (int t = 0; t < P; ++t) xn[t] = x[t] + step * d[t];
                vn = ev.eval(xn, mu);
                if (vn.phi <= val.phi + 1e-4 * step * slope) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted) break;

            ev.grad_phi(xn, mu, vn, gn);
            double sy = 0.0, ss = 0.0;
            for (int t = 0; t < P; ++t) {
                const double si = xn[t] - x[t];
                const double yi = gn[t] - g[t];
                sy += si * yi;
                ss += si * si;
            }
            t_guess = sy > 1e-300 ? std::clamp(ss / sy, 1e-12, 1e12) : step * 2.0;

            const double phi_prev = val.phi;
            x.swap(xn);
            g.swap(gn);
            val = vn;
            gnorm2 = 0.0;
            for (double v : g) gnorm2 += v * v;
            if (merits) merits->push_back(val.phi);
            if (val.f < best.f) {
                best.f = val.f;
                best.x = x;
            }
            if (std::abs(phi_prev - val.phi) <=
                config.inner_tol * std::max(1.0, std::abs(val.phi))) {
                break;
            }
        }
        if (trace) trace->objective_per_round_end.push_back(val.f);
    }
    return best;
}

// Algorithm step: random budget draw, then random feasible starting deltas
// summing to it (scaled uniforms, clipped to the per-cell bounds, clipped
// excess redistributed proportionally over unsaturated cells).
std::vector<double> random_start(const Problem& pb, const SolverConfig& config, Rng& rng) {
    std::vector<double> x(pb.n_params(), 0.0);
    const auto allocate = [&](int begin, int end, double lo_frac, double hi_frac,
                              double budget) {
        const int n = end - begin;
        if (n == 0 || budget <= 0.0) return;
        const double lo = 2.0 * kEpsOffset;
        double cap_sum = 0.0;
        for (int t = begin; t < end; ++t) cap_sum += pb.cap[t] - lo;
        double target = uniform_in(rng, lo_frac * budget, hi_frac * budget);
        target = std::min(target, 0.999 * cap_sum);
        target = std::max(target, n * lo);

        double usum = 0.0;
        for (int t = begin; t < end; ++t) {
            x[t] = uniform01(rng) + 1e-12;
            usum += x[t];
        }
        for (int t = begin; t < end; ++t) x[t] *= target / usum;

        for (int pass = 0; pass < 200; ++pass) {
            double sum = 0.0;
            for (int t = begin; t < end; ++t) {
                x[t] = std::clamp(x[t], lo, pb.cap[t] - lo);
                sum += x[t];
            }
            const double deficit = target - sum;
            if (std::abs(deficit) <= 1e-12 * std::max(1.0, target)) break;
            if (deficit > 0.0) {
                double room = 0.0;
                for (int t = begin; t < end; ++t) room += (pb.cap[t] - lo) - x[t];
                if (!(room > 0.0)) break;
                for (int t = begin; t < end; ++t) {
                    x[t] += deficit * ((pb.cap[t] - lo) - x[t]) / room;
                }
            } else {
                double slack = 0.0;
                for (int t = begin; t < end; ++t) slack += x[t] - lo;
                if (!(slack > 0.0)) break;
                for (int t = begin; t < end; ++t) {
                    x[t] += deficit * (x[t] - lo) / slack;
                }
            }
        }
    };
    allocate(0, pb.n_plus, config.start_lo_plus, config.start_hi_plus, pb.budget_plus);
    allocate(pb.n_plus, pb.n_params(), config.start_lo_minus, config.start_hi_minus,
             pb.budget_minus);
    return x;
}

// Greedy descent over single-unit edits of an integer plan: increments,
// decrements, and transfers between cells, each keeping all constraints and
// the one-sided form (delta_plus * delta_minus = 0 per cell). Rounding a
// fractional optimum scatters units across cells, and on small budgets that
// routinely lands measurably above the best integer plan; this pass closes
// that gap. Deviance changes are evaluated incrementally.
void refine_integer_plan(const ContingencyTable3& table, const SolverConfig& config,
                         std::vector<std::int64_t>& rp, std::vector<std::int64_t>& rm) {
    const int I = table.num_x();
    const int J = table.num_y();
    const int cells = I * J;

    std::vector<double> m1(cells), m0(cells), s1(J, 0.0), s0(J, 0.0);
    std::vector<double> n0(cells), n1(cells);
    double sum_p = 0.0, sum_m = 0.0;
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            const std::size_t c = table.cell(i, j);
            n0[c] = static_cast<double>(table.count(i, j, 0));
            n1[c] = static_cast<double>(table.count(i, j, 1));
            const double shift = static_cast<double>(rp[c]) - static_cast<double>(rm[c]);
            m1[c] = n1[c] + shift;
            m0[c] = n0[c] - shift;
            s1[j - 1] += m1[c];
            s0[j - 1] += m0[c];
            sum_p += static_cast<double>(rp[c]);
            sum_m += static_cast<double>(rm[c]);
        }
    }

    const auto full_deviance = [&]() {
        double cell_terms = 0.0, stratum_terms = 0.0;
        for (int c = 0; c < cells; ++c) cell_terms += xlogx(m1[c]) + xlogx(m0[c]);
        for (int j = 0; j < J; ++j) stratum_terms += xlogx(s1[j]) + xlogx(s0[j]);
        double d = constant_term(table) + 2.0 * cell_terms - 2.0 * stratum_terms;
        return d < 0.0 ? 0.0 : d;
    };
    const auto objective_of = [&](double dev, double dsum) {
        switch (config.objective.kind) {
            case ObjectiveKind::Deviance:
                return dev;
            case ObjectiveKind::LinearPenalty:
                return dev + config.objective.lambda * dsum;
            case ObjectiveKind::DampedPenalty:
                return dev + std::exp(-dev / config.objective.kappa) * dsum;
        }
        return dev;
    };

    double dev = full_deviance();

    // deviance change when m1[c] shifts by t (and m0[c] by -t)
    const auto cell_delta = [&](int c, double t) {
        return xlogx(m1[c] + t) + xlogx(m0[c] - t) - xlogx(m1[c]) - xlogx(m0[c]);
    };
    const auto stratum_delta = [&](int j, double t) {
        return xlogx(s1[j] + t) + xlogx(s0[j] - t) - xlogx(s1[j]) - xlogx(s0[j]);
    };

    // A unary edit: apply `units` steps of one kind to one cell. kind 0 adds
    // to delta_plus, 1 removes from delta_plus, 2 adds to delta_minus,
    // 3 removes from delta_minus.
    struct Edit {
        int kind = -1;
        int cell = -1;
        int units = 0;
    };
    const auto m1_shift = [](int kind) { return kind == 0 || kind == 3 ? 1.0 : -1.0; };
    const auto dsum_shift = [](int kind) { return kind == 0 || kind == 2 ? 1.0 : -1.0; };
    const auto legal = [&](const Edit& e, double plus_headroom, double minus_headroom) {
        const auto u = static_cast<std::int64_t>(e.units);
        switch (e.kind) {
            case 0:
                return rm[e.cell] == 0 &&
                       rp[e.cell] + u <= static_cast<std::int64_t>(n0[e.cell]) &&
                       plus_headroom >= static_cast<double>(e.units);
            case 1:
                return rp[e.cell] >= u;
            case 2:
                return rp[e.cell] == 0 &&
                       rm[e.cell] + u <= static_cast<std::int64_t>(n1[e.cell]) &&
                       minus_headroom >= static_cast<double>(e.units);
            case 3:
                return rm[e.cell] >= u;
        }
        return false;
    };

    struct Move {
        Edit first;
        Edit second;
        double dd = 0.0, ds = 0.0;
    };

    const int max_moves = 10 * cells + 200;
    for (int step = 0; step < max_moves; ++step) {
        const double cur_obj = objective_of(dev, sum_p + sum_m);
        const double plus_headroom = static_cast<double>(config.m_plus) - sum_p;
        const double minus_headroom = static_cast<double>(config.m_minus) - sum_m;
        Move best;
        double best_obj = cur_obj;
        const auto consider = [&](const Move& mv) {
            const double cand =
                objective_of(std::max(0.0, dev + mv.dd), sum_p + sum_m + mv.ds);
            if (cand < best_obj - 1e-11 * std::max(1.0, std::abs(cur_obj))) {
                best_obj = cand;
                best = mv;
            }
        };

        // one- and two-unit edits of a single cell
        for (int c = 0; c < cells; ++c) {
            const int j = c % J;
            for (int kind = 0; kind < 4; ++kind) {
                for (int units = 1; units <= 2; ++units) {
                    const Edit e{kind, c, units};
                    if (!legal(e, plus_headroom, minus_headroom)) continue;
                    const double t = m1_shift(kind) * units;
                    Move mv;
                    mv.first = e;
                    mv.dd = 2.0 * (cell_delta(c, t) - stratum_delta(j, t));
                    mv.ds = dsum_shift(kind) * units;
                    consider(mv);
                }
            }
        }

        // paired single-unit edits on two cells of the same stratum; the
        // deviance separates over strata, so beyond single edits only these
        // pairs and the budget-coupled transfers below can improve
        for (int j = 0; j < J; ++j) {
            for (int ca = 0; ca < I; ++ca) {
                const int a = ca * J + j;
                for (int cb = ca + 1; cb < I; ++cb) {
                    const int b = cb * J + j;
                    for (int ka = 0; ka < 4; ++ka) {
                        const Edit ea{ka, a, 1};
                        if (!legal(ea, plus_headroom, minus_headroom)) continue;
                        const double ta = m1_shift(ka);
                        for (int kb = 0; kb < 4; ++kb) {
                            const Edit eb{kb, b, 1};
                            double ph = plus_headroom, mh = minus_headroom;
                            if (ka == 0) ph -= 1.0;
                            if (ka == 2) mh -= 1.0;
                            if (!legal(eb, ph, mh)) continue;
                            const double tb = m1_shift(kb);
                            Move mv;
                            mv.first = ea;
                            mv.second = eb;
                            mv.dd = 2.0 * (cell_delta(a, ta) + cell_delta(b, tb) -
                                           stratum_delta(j, ta + tb));
                            mv.ds = dsum_shift(ka) + dsum_shift(kb);
                            consider(mv);
                        }
                    }
                }
            }
        }

        // cross-stratum transfers of one planned unit
        for (int a = 0; a < cells; ++a) {
            if (rp[a] == 0 && rm[a] == 0) continue;
            const int ja = a % J;
            for (int b = 0; b < cells; ++b) {
                if (b == a || b % J == ja) continue;  // same stratum handled above
                const int jb = b % J;
                if (rp[a] > 0 && rm[b] == 0 && rp[b] < static_cast<std::int64_t>(n0[b])) {
                    Move mv;
                    mv.first = {1, a, 1};
                    mv.second = {0, b, 1};
                    mv.dd = 2.0 * (cell_delta(a, -1.0) + cell_delta(b, 1.0) -
                                   stratum_delta(ja, -1.0) - stratum_delta(jb, 1.0));
                    consider(mv);
                }
                if (rm[a] > 0 && rp[b] == 0 && rm[b] < static_cast<std::int64_t>(n1[b])) {
                    Move mv;
                    mv.first = {3, a, 1};
                    mv.second = {2, b, 1};
                    mv.dd = 2.0 * (cell_delta(a, 1.0) + cell_delta(b, -1.0) -
                                   stratum_delta(ja, 1.0) - stratum_delta(jb, -1.0));
                    consider(mv);
                }
            }
        }

        if (best.first.kind < 0) break;
        const auto apply = [&](const Edit& e) {
            if (e.kind < 0) return;
            switch (e.kind) {
                case 0:
                    rp[e.cell] += e.units;
                    sum_p += e.units;
                    break;
                case 1:
                    rp[e.cell] -= e.units;
                    sum_p -= e.units;
                    break;
                case 2:
                    rm[e.cell] += e.units;
                    sum_m += e.units;
                    break;
                case 3:
                    rm[e.cell] -= e.units;
                    sum_m -= e.units;
                    break;
            }
            const double t = m1_shift(e.kind) * e.units;
            m1[e.cell] += t;
            m0[e.cell] -= t;
            s1[e.cell % J] += t;
            s0[e.cell % J] -= t;
        };
        apply(best.first);
        apply(best.second);
        // incremental deltas drift; refresh the running deviance exactly
        dev = full_deviance();
    }
}

// Exact-fit probe: a plan has zero deviance iff within every stratum the
// audited share is constant across cells, i.e. m_ij1 = r_j * n_ij+ with
// r_j * n_ij+ integral, which restricts r_j to multiples of 1/gcd_i(n_ij+).
// Per-cell bounds hold automatically for any such target, so feasibility is
// purely a budget question over the stratum-wise candidates. Returns the
// zero-deviance plan with the fewest moved units, when one exists. The
// barrier solver centers its iterates on flat optimum manifolds, so it
// systematically misses these corner solutions.
bool probe_exact_fit(const ContingencyTable3& table, const SolverConfig& config,
                     std::vector<std::int64_t>& out_plus,
                     std::vector<std::int64_t>& out_minus) {
    const int I = table.num_x();
    const int J = table.num_y();

    struct Option {
        std::int64_t cost_plus = 0;
        std::int64_t cost_minus = 0;
        std::int64_t k = 0;  // target m_ij1 = k * n_ij+ / g
    };
    constexpr int kMaxOptionsPerStratum = 128;

    std::vector<std::vector<Option>> options(J);
    for (int j = 1; j <= J; ++j) {
        if (table.margin_y(j) == 0) {
            options[j - 1].push_back({0, 0, 0});
            continue;
        }
        std::int64_t g = 0;
        for (int i = 1; i <= I; ++i) g = std::gcd(g, table.margin_xy(i, j));
        if (g > kMaxOptionsPerStratum) return false;  // probe only cheap cases
        for (std::int64_t k = 0; k <= g; ++k) {
            Option opt;
            opt.k = k;
            for (int i = 1; i <= I; ++i) {
                const std::int64_t target = k * (table.margin_xy(i, j) / g);
                const std::int64_t shift = target - table.count(i, j, 1);
                if (shift > 0) {
                    opt.cost_plus += shift;
                } else {
                    opt.cost_minus += -shift;
                }
            }
            if (opt.cost_plus <= config.m_plus && opt.cost_minus <= config.m_minus) {
                options[j - 1].push_back(opt);
            }
        }
        if (options[j - 1].empty()) return false;
        std::sort(options[j - 1].begin(), options[j - 1].end(),
                  [](const Option& a, const Option& b) {
                      const auto ta = a.cost_plus + a.cost_minus;
                      const auto tb = b.cost_plus + b.cost_minus;
                      return ta != tb ? ta < tb : a.k < b.k;
                  });
    }

    // smallest remaining costs per suffix, for pruning
    std::vector<std::int64_t> min_plus(J + 1, 0), min_minus(J + 1, 0);
    for (int j = J - 1; j >= 0; --j) {
        std::int64_t mp = options[j][0].cost_plus, mm = options[j][0].cost_minus;
        for (const Option& o : options[j]) {
            mp = std::min(mp, o.cost_plus);
            mm = std::min(mm, o.cost_minus);
        }
        min_plus[j] = min_plus[j + 1] + mp;
        min_minus[j] = min_minus[j + 1] + mm;
    }

    std::vector<std::int64_t> chosen(J, -1), best_choice;
    std::int64_t best_total = std::numeric_limits<std::int64_t>::max();
    long nodes = 0;
    const std::function<void(int, std::int64_t, std::int64_t)> dfs =
        [&](int j, std::int64_t used_plus, std::int64_t used_minus) {
            if (++nodes > 1000000) return;
            if (used_plus + min_plus[j] > config.m_plus ||
                used_minus + min_minus[j] > config.m_minus) {
                return;
            }
            if (j == J) {
                const std::int64_t total = used_plus + used_minus;
                if (total < best_total) {
                    best_total = total;
                    best_choice = chosen;
                }
                return;
            }
            for (std::size_t o = 0; o < options[j].size(); ++o) {
                const Option& opt = options[j][o];
                if (used_plus + opt.cost_plus > config.m_plus ||
                    used_minus + opt.cost_minus > config.m_minus) {
                    continue;
                }
                chosen[j] = static_cast<std::int64_t>(o);
                dfs(j + 1, used_plus + opt.cost_plus, used_minus + opt.cost_minus);
                chosen[j] = -1;
            }
        };
    dfs(0, 0, 0);
    if (best_choice.empty()) return false;

    out_plus.assign(static_cast<std::size_t>(I) * J, 0);
    out_minus.assign(static_cast<std::size_t>(I) * J, 0);
    for (int j = 1; j <= J; ++j) {
        if (table.margin_y(j) == 0) continue;
        std::int64_t g = 0;
        for (int i = 1; i <= I; ++i) g = std::gcd(g, table.margin_xy(i, j));
        const Option& opt = options[j - 1][best_choice[j - 1]];
        for (int i = 1; i <= I; ++i) {
            const std::int64_t target = opt.k * (table.margin_xy(i, j) / g);
            const std::int64_t shift = target - table.count(i, j, 1);
            const std::size_t c = table.cell(i, j);
            if (shift > 0) {
                out_plus[c] = shift;
            } else {
                out_minus[c] = -shift;
            }
        }
    }
    return true;
}

void validate_config(const ContingencyTable3& table, const SolverConfig& config) {
    if (table.num_x() < 2) {
        throw std::invalid_argument("optimize: needs at least two X categories");
    }
    if (config.m_plus < 0 || config.m_minus < 0) {
        throw std::invalid_argument("optimize: budgets must be nonnegative");
    }
    const std::int64_t pool0 = table.total() - table.audit_size();
    if (config.m_plus > pool0) {
        throw std::invalid_argument("optimize: m_plus exceeds the units with z=0");
    }
    if (config.m_minus > table.audit_size()) {
        throw std::invalid_argument("optimize: m_minus exceeds the units with z=1");
    }
    if (config.n_attempts < 0) {
        throw std::invalid_argument("optimize: n_attempts must be nonnegative");
    }
    const auto check_bounds = [](double lo, double hi, const char* side) {
        if (!(0.0 < lo && lo < hi && hi < 1.0)) {
            throw std::invalid_argument(std::string("optimize: start bounds for ") + side +
                                        " must satisfy 0 < lo < hi < 1");
        }
    };
    check_bounds(config.start_lo_plus, config.start_hi_plus, "additions");
    check_bounds(config.start_lo_minus, config.start_hi_minus, "removals");
    if (!(config.inner_tol > 0.0) || config.max_inner_iters < 1) {
        throw std::invalid_argument("optimize: invalid inner-loop settings");
    }
    if (config.objective.kind == ObjectiveKind::LinearPenalty &&
        !(config.objective.lambda > 0.0)) {
        throw std::invalid_argument("optimize: lambda must be positive");
    }
}

void run_workers(int threads, const std::function<void(int)>& body) {
    if (threads <= 1) {
        body(0);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int w = 0; w < threads; ++w) pool.emplace_back(body, w);
    for (auto& t : pool) t.join();
}

}  // namespace

std::int64_t AuditPlan::total_added() const {
    std::int64_t s = 0;
    for (auto v : delta_plus) s += v;
    return s;
}

std::int64_t AuditPlan::total_removed() const {
    std::int64_t s = 0;
    for (auto v : delta_minus) s += v;
    return s;
}

double objective(const AdjustedTable& adjusted, const ObjectiveSpec& spec) {
    const double dev = deviance(adjusted);
    switch (spec.kind) {
        case ObjectiveKind::Deviance:
            return dev;
        case ObjectiveKind::LinearPenalty:
            if (!(spec.lambda > 0.0)) {
                throw std::invalid_argument("objective: lambda must be positive");
            }
            return dev + spec.lambda * adjusted.delta_total();
        case ObjectiveKind::DampedPenalty:
            if (!(spec.kappa > 0.0)) {
                throw std::invalid_argument("objective: kappa must be positive");
            }
            return dev + std::exp(-dev / spec.kappa) * adjusted.delta_total();
    }
    return dev;
}

std::vector<double> gradient(const AdjustedTable& adjusted, const ObjectiveSpec& spec) {
    if (spec.kind == ObjectiveKind::LinearPenalty && !(spec.lambda > 0.0)) {
        throw std::invalid_argument("gradient: lambda must be positive");
    }
    if (spec.kind == ObjectiveKind::DampedPenalty && !(spec.kappa > 0.0)) {
        throw std::invalid_argument("gradient: kappa must be positive");
    }
    const ContingencyTable3& base = adjusted.base();
    const int I = base.num_x();
    const int J = base.num_y();
    const std::size_t cells = static_cast<std::size_t>(I) * J;

    std::vector<double> s1(J, 0.0), s0(J, 0.0);
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            s1[j - 1] += adjusted.m(i, j, 1);
            s0[j - 1] += adjusted.m(i, j, 0);
        }
    }
    double dev = 0.0, dsum = 0.0, expfac = 0.0;
    if (spec.kind == ObjectiveKind::DampedPenalty) {
        dev = deviance(adjusted);
        dsum = adjusted.delta_total();
        expfac = std::exp(-dev / spec.kappa);
    }

    std::vector<double> g(2 * cells, 0.0);
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            const bool plus_free = base.count(i, j, 0) > 0;
            const bool minus_free = base.count(i, j, 1) > 0;
            if (!plus_free && !minus_free) continue;
            const double m1 = adjusted.m(i, j, 1);
            const double m0 = adjusted.m(i, j, 0);
            if (!(m1 > 0.0) || !(m0 > 0.0) || !(s1[j - 1] > 0.0) || !(s0[j - 1] > 0.0)) {
                throw std::domain_error("gradient: boundary point, adjusted count is zero in "
                                        "cell (i=" + std::to_string(i) +
                                        ", j=" + std::to_string(j) + ")");
            }
            const double gd = 2.0 * (std::log(m1) - std::log(m0) - std::log(s1[j - 1]) +
                                     std::log(s0[j - 1]));
            const auto apply = [&](double raw) {
                switch (spec.kind) {
                    case ObjectiveKind::Deviance:
                        return raw;
                    case ObjectiveKind::LinearPenalty:
                        return raw + spec.lambda;
                    case ObjectiveKind::DampedPenalty:
                        return raw + expfac * (1.0 - raw * dsum / spec.kappa);
                }
                return raw;
            };
            const std::size_t c = base.cell(i, j);
            if (plus_free) g[c] = apply(gd);
            if (minus_free) g[cells + c] = apply(-gd);
        }
    }
    return g;
}

AdjustedTable solve_single(const AdjustedTable& start, const SolverConfig& config,
                           SolveTrace* trace) {
    if (config.objective.kind == ObjectiveKind::DampedPenalty &&
        !(config.objective.kappa > 0.0)) {
        throw std::invalid_argument("solve_single: kappa must be positive");
    }
    if (config.objective.kind == ObjectiveKind::LinearPenalty &&
        !(config.objective.lambda > 0.0)) {
        throw std::invalid_argument("solve_single: lambda must be positive");
    }
    const ContingencyTable3& base = start.base();
    const Problem pb = make_problem(base, config);

    // Parameters outside the free set must be exactly zero.
    std::vector<char> free_plus(pb.cells(), 0), free_minus(pb.cells(), 0);
    for (int t = 0; t < pb.n_params(); ++t) {
        (t < pb.n_plus ? free_plus : free_minus)[pb.cell_of[t]] = 1;
    }
    for (int c = 0; c < pb.cells(); ++c) {
        if ((!free_plus[c] && std::abs(start.delta_plus()[c]) > 1e-12) ||
            (!free_minus[c] && std::abs(start.delta_minus()[c]) > 1e-12)) {
            throw std::invalid_argument(
                "solve_single: start assigns mass to a parameter fixed at zero");
        }
    }

    std::vector<double> x(pb.n_params());
    for (int t = 0; t < pb.n_params(); ++t) {
        const int c = pb.cell_of[t];
        x[t] = t < pb.n_plus ? start.delta_plus()[c] : start.delta_minus()[c];
    }
    SolveResult res = solve_from(pb, config, std::move(x), trace);

    std::vector<double> dplus(pb.cells(), 0.0), dminus(pb.cells(), 0.0);
    for (int t = 0; t < pb.n_params(); ++t) {
        (t < pb.n_plus ? dplus : dminus)[pb.cell_of[t]] = res.x[t];
    }
    return AdjustedTable(base, std::move(dplus), std::move(dminus));
}

std::pair<std::vector<double>, std::vector<double>> normalize_deltas(
    std::span<const double> delta_plus, std::span<const double> delta_minus) {
    if (delta_plus.size() != delta_minus.size()) {
        throw std::invalid_argument("normalize_deltas: size mismatch");
    }
    std::vector<double> np(delta_plus.size()), nm(delta_minus.size());
    for (std::size_t c = 0; c < delta_plus.size(); ++c) {
        np[c] = std::max(0.0, delta_plus[c] - delta_minus[c]);
        nm[c] = std::max(0.0, delta_minus[c] - delta_plus[c]);
    }
    return {std::move(np), std::move(nm)};
}

std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> round_to_integer_plan(
    std::span<const double> delta_plus, std::span<const double> delta_minus,
    const ContingencyTable3& table, const SolverConfig& config) {
    const int I = table.num_x();
    const int J = table.num_y();
    const std::size_t cells = static_cast<std::size_t>(I) * J;
    if (delta_plus.size() != cells || delta_minus.size() != cells) {
        throw std::invalid_argument("round_to_integer_plan: delta arrays have wrong size");
    }

    std::vector<std::int64_t> rp(cells), rm(cells);
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            const std::size_t c = table.cell(i, j);
            rp[c] = std::clamp<std::int64_t>(std::llround(delta_plus[c]), 0,
                                             table.count(i, j, 0));
            rm[c] = std::clamp<std::int64_t>(std::llround(delta_minus[c]), 0,
                                             table.count(i, j, 1));
        }
    }

    std::vector<double> m(cells * 2);
    const auto deviance_of = [&]() {
        for (int i = 1; i <= I; ++i) {
            for (int j = 1; j <= J; ++j) {
                const std::size_t c = table.cell(i, j);
                const double shift =
                    static_cast<double>(rp[c]) - static_cast<double>(rm[c]);
                m[ContingencyTable3::index(i, j, 1, J)] = table.count(i, j, 1) + shift;
                m[ContingencyTable3::index(i, j, 0, J)] = table.count(i, j, 0) - shift;
            }
        }
        return deviance_counts(I, J, m);
    };

    // Drop whichever unit costs the least deviance until the budget holds.
    // Near-ties keep the unit in the lowest (i,j) cell.
    const auto repair = [&](std::vector<std::int64_t>& r, std::int64_t budget) {
        std::int64_t sum = 0;
        for (auto v : r) sum += v;
        while (sum > budget) {
            double best_dev = kInf;
            std::size_t best_cell = cells;
            for (std::size_t c = 0; c < cells; ++c) {
                if (r[c] == 0) continue;
                --r[c];
                const double d = deviance_of();
                ++r[c];
                if (d < best_dev - 1e-12 * std::max(1.0, std::abs(best_dev))) {
                    best_dev = d;
                    best_cell = c;
                } else if (d <= best_dev + 1e-12 * std::max(1.0, std::abs(best_dev))) {
                    best_dev = std::min(best_dev, d);
                    best_cell = c;
                }
            }
            --r[best_cell];
            --sum;
        }
    };
    repair(rp, config.m_plus);
    repair(rm, config.m_minus);
    return {std::move(rp), std::move(rm)};
}

AuditPlan optimize(const ContingencyTable3& table, const SolverConfig& config_in,
                   int num_threads) {
    SolverConfig config = config_in;
    validate_config(table, config);

    const int I = table.num_x();
    const int J = table.num_y();
    const std::size_t cells = static_cast<std::size_t>(I) * J;
    const double cutoff = chi_square_cutoff(J * (I - 1), config.alpha);
    if (config.objective.kind == ObjectiveKind::DampedPenalty &&
        !(config.objective.kappa > 0.0)) {
        config.objective.kappa = cutoff / 10.0;
    }

    const double d_base = deviance(table);
    const Problem pb = make_problem(table, config);

    // The continuous minimum is often a whole manifold of equivalent
    // solutions, and only some of its points round to a good integer plan.
    // Each attempt is therefore judged by the objective of its rounded plan:
    // solve, normalize, round, then keep the best realizable solution.
    struct Candidate {
        double obj = kInf;
        int attempt = -1;
        std::vector<double> norm_plus, norm_minus;    // normalized continuous deltas
        std::vector<std::int64_t> int_plus, int_minus;
    };

    const auto integer_objective = [&](const std::vector<std::int64_t>& ip,
                                       const std::vector<std::int64_t>& im) {
        std::vector<double> m(cells * 2);
        double dsum = 0.0;
        for (int i = 1; i <= I; ++i) {
            for (int j = 1; j <= J; ++j) {
                const std::size_t c = table.cell(i, j);
                const double shift =
                    static_cast<double>(ip[c]) - static_cast<double>(im[c]);
                m[ContingencyTable3::index(i, j, 1, J)] = table.count(i, j, 1) + shift;
                m[ContingencyTable3::index(i, j, 0, J)] = table.count(i, j, 0) - shift;
                dsum += static_cast<double>(ip[c]) + static_cast<double>(im[c]);
            }
        }
        const double dev = deviance_counts(I, J, m);
        switch (config.objective.kind) {
            case ObjectiveKind::Deviance:
                return dev;
            case ObjectiveKind::LinearPenalty:
                return dev + config.objective.lambda * dsum;
            case ObjectiveKind::DampedPenalty:
                return dev + std::exp(-dev / config.objective.kappa) * dsum;
        }
        return dev;
    };

    const int N = config.n_attempts;
    const int threads = std::clamp(num_threads, 1, std::max(1, N));
    std::vector<Candidate> bests(threads);
    std::vector<std::string> first_error(threads);
    std::vector<int> failures(threads, 0);

    if (N > 0) {
        run_workers(threads, [&](int w) {
            for (int a = w; a < N; a += threads) {
                try {
                    Rng rng = make_rng(derive_seed(config.master_seed, a));
                    std::vector<double> x0 = random_start(pb, config, rng);
                    const SolveResult res = solve_from(pb, config, std::move(x0), nullptr);
                    std::vector<double> dplus(cells, 0.0), dminus(cells, 0.0);
                    for (int t = 0; t < pb.n_params(); ++t) {
                        (t < pb.n_plus ? dplus : dminus)[pb.cell_of[t]] = res.x[t];
                    }
                    auto [np, nm] = normalize_deltas(dplus, dminus);
                    auto [ip, im] = round_to_integer_plan(np, nm, table, config);
                    const double obj = integer_objective(ip, im);
                    if (obj < bests[w].obj) {
                        bests[w].obj = obj;
                        bests[w].attempt = a;
                        bests[w].norm_plus = std::move(np);
                        bests[w].norm_minus = std::move(nm);
                        bests[w].int_plus = std::move(ip);
                        bests[w].int_minus = std::move(im);
                    }
                } catch (const std::exception& e) {
                    ++failures[w];
                    if (first_error[w].empty()) {
                        first_error[w] = "attempt " + std::to_string(a) + ": " + e.what();
                    }
                }
            }
        });
        int total_failures = 0;
        std::string first;
        for (int w = 0; w < threads; ++w) {
            total_failures += failures[w];
            if (first.empty()) first = first_error[w];
        }
        if (total_failures == N) {
            throw std::runtime_error("optimize: all attempts failed; " + first);
        }
    }

    // The unadjusted table seeds the comparison; an attempt must beat it
    // strictly, and equal attempts resolve to the lowest attempt index.
    double best_obj = d_base;
    int best_attempt = -1;
    std::vector<double> np(cells, 0.0), nm(cells, 0.0);
    std::vector<std::int64_t> ip(cells, 0), im(cells, 0);
    std::vector<Candidate*> found;
    for (auto& c : bests) {
        if (c.attempt >= 0) found.push_back(&c);
    }
    std::sort(found.begin(), found.end(),
              [](const Candidate* a, const Candidate* b) { return a->attempt < b->attempt; });
    for (Candidate* c : found) {
        if (c->obj < best_obj) {
            best_obj = c->obj;
            best_attempt = c->attempt;
            np = std::move(c->norm_plus);
            nm = std::move(c->norm_minus);
            ip = std::move(c->int_plus);
            im = std::move(c->int_minus);
        }
    }

    if (N > 0) {
        std::vector<std::int64_t> zp, zm;
        if (probe_exact_fit(table, config, zp, zm) &&
            integer_objective(zp, zm) < best_obj) {
            best_obj = integer_objective(zp, zm);
            best_attempt = N;  // produced by the exact-fit probe
            for (std::size_t c = 0; c < cells; ++c) {
                np[c] = static_cast<double>(zp[c]);
                nm[c] = static_cast<double>(zm[c]);
            }
            ip = std::move(zp);
            im = std::move(zm);
        }
    }

    const double d_continuous = deviance(AdjustedTable(table, np, nm));
    if (best_attempt >= 0) {
        // only repair rounding damage; the null plan stays the null plan
        refine_integer_plan(table, config, ip, im);
    }
    std::vector<double> ipd(ip.begin(), ip.end()), imd(im.begin(), im.end());
    double d_integer = deviance(AdjustedTable(table, std::move(ipd), std::move(imd)));

    if (d_integer > d_base) {
        // Rounding spoiled the continuous gain; the null plan is always valid.
        std::fill(ip.begin(), ip.end(), 0);
        std::fill(im.begin(), im.end(), 0);
        d_integer = d_base;
        best_attempt = -1;
    }
    bool all_zero = true;
    for (std::size_t c = 0; c < cells && all_zero; ++c) {
        all_zero = ip[c] == 0 && im[c] == 0;
    }
    if (all_zero) best_attempt = -1;

    AuditPlan plan;
    plan.num_x = I;
    plan.num_y = J;
    plan.delta_plus = std::move(ip);
    plan.delta_minus = std::move(im);
    plan.base_n0.resize(cells);
    plan.base_n1.resize(cells);
    for (int i = 1; i <= I; ++i) {
        for (int j = 1; j <= J; ++j) {
            plan.base_n0[table.cell(i, j)] = table.count(i, j, 0);
            plan.base_n1[table.cell(i, j)] = table.count(i, j, 1);
        }
    }
    plan.deviance_before = d_base;
    plan.continuous_deviance = d_continuous;
    plan.achieved_deviance = d_integer;
    plan.cutoff = cutoff;
    plan.accepted = d_integer <= cutoff;
    plan.attempts_run = N;
    plan.best_attempt_index = best_attempt;
    return plan;
}

}  // namespace audit
