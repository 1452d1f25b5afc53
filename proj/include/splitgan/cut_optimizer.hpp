#pragma once
// Genetic-algorithm cut-point planner with client down-sampling and an
// exhaustive-search oracle for small instances.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "splitgan/errors.hpp"
#include "splitgan/latency_model.hpp"
#include "splitgan/rng.hpp"

namespace splitgan {

struct GaConfig {
    int population = 1000;
    int generations = 200;
    int tournament = 5;
    int elites = 2;
    int stagnation = 30;       // early stop after this many flat generations
    double mutation_rate = 0.1;  // per client
    int reduce_target = 20;      // <=0 means min(20, client count)
    uint64_t seed = 1;
};

inline void validate_ga(const GaConfig& g) {
    if (g.population < g.elites + 2)
        throw InvariantError("ga: population must be >= elites + 2");
    if (g.tournament > g.population)
        throw InvariantError("ga: tournament size exceeds population");
}

// Down-sampled fleet: one representative slot per kept client; every original
// client maps to a representative with an identical device profile.
struct ReducedFleet {
    Fleet fleet;                     // the representatives
    std::vector<int> rep_of_client;  // original index -> representative index
};

inline ReducedFleet reduce_fleet(const Fleet& full, int target) {
    validate_fleet(full);
    int m = int(full.clients.size());
    if (target > m) throw InvariantError("reduce_fleet: target exceeds client count");
    if (target < 1) throw InvariantError("reduce_fleet: target must be >= 1");

    // group by identical device profile, in order of first appearance
    std::vector<DeviceProfile> gprof;
    std::vector<std::vector<int>> members;
    for (int i = 0; i < m; ++i) {
        size_t g = 0;
        for (; g < gprof.size(); ++g)
            if (gprof[g] == full.clients[size_t(i)].dev) break;
        if (g == gprof.size()) {
            gprof.push_back(full.clients[size_t(i)].dev);
            members.emplace_back();
        }
        members[g].push_back(i);
    }
    int groups = int(gprof.size());
    if (target < groups)
        throw InvariantError("reduce_fleet: target " + std::to_string(target) +
                             " is below the number of distinct profiles (" +
                             std::to_string(groups) + ")");

    // largest-remainder apportionment, then enforce >=1 per group
    std::vector<int> quota(size_t(groups), 0);
    std::vector<double> frac((size_t(groups)));
    double scale = double(target) / m;
    int assigned = 0;
    for (int g = 0; g < groups; ++g) {
        double ideal = double(members[size_t(g)].size()) * scale;
        quota[size_t(g)] = int(ideal);
        frac[size_t(g)] = ideal - quota[size_t(g)];
        assigned += quota[size_t(g)];
    }
    std::vector<int> order((size_t(groups)));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return frac[size_t(a)] > frac[size_t(b)]; });
    for (int g : order) {
        if (assigned == target) break;
        ++quota[size_t(g)];
        ++assigned;
    }
    for (int g = 0; g < groups; ++g) {
        while (quota[size_t(g)] == 0) {
            int donor = int(std::max_element(quota.begin(), quota.end()) - quota.begin());
            if (quota[size_t(donor)] <= 1)
                throw InvariantError("reduce_fleet: cannot give every group a representative");
            --quota[size_t(donor)];
            ++quota[size_t(g)];
        }
    }

    ReducedFleet out;
    out.fleet.server = full.server;
    out.fleet.batch = full.batch;
    out.rep_of_client.assign(size_t(m), -1);
    for (int g = 0; g < groups; ++g) {
        int base = int(out.fleet.clients.size());
        for (int r = 0; r < quota[size_t(g)]; ++r) {
            FleetClient rep;
            rep.id = base + r;
            rep.dev = gprof[size_t(g)];
            rep.n = 0;
            rep.profile_name = full.clients[size_t(members[size_t(g)][0])].profile_name;
            out.fleet.clients.push_back(rep);
        }
        for (size_t j = 0; j < members[size_t(g)].size(); ++j) {
            int rep = base + int(j % size_t(quota[size_t(g)]));
            out.rep_of_client[size_t(members[size_t(g)][j])] = rep;
            out.fleet.clients[size_t(rep)].n += full.clients[size_t(members[size_t(g)][j])].n;
        }
    }
    return out;
}

inline CutAssignment expand_assignment(const ReducedFleet& rf,
                                       const CutAssignment& reduced) {
    CutAssignment full(rf.rep_of_client.size());
    for (size_t i = 0; i < full.size(); ++i)
        full[i] = reduced.at(size_t(rf.rep_of_client[i]));
    return full;
}

// Fitness = -L_T, always evaluated after expanding back to the full fleet.
inline double ga_fitness(const Fleet& full, const ModelProfile& p,
                         const ReducedFleet& rf, const CutAssignment& reduced) {
    return -total_latency(full, p, expand_assignment(rf, reduced)).l_total;
}

namespace detail {

struct CutRanges {
    int gh_lo, gh_hi, gt_lo, gt_hi;
    int dh_lo, dh_hi, dt_lo, dt_hi;
};

inline CutRanges cut_ranges(const ModelProfile& p) {
    CutRanges r;
    r.gh_lo = 1;
    r.gh_hi = p.gen.mid() - 1;
    r.gt_lo = p.gen.mid() + 1;
    r.gt_hi = p.gen.n();
    r.dh_lo = 1;
    r.dh_hi = p.disc.mid() - 1;
    r.dt_lo = p.disc.mid() + 1;
    r.dt_hi = p.disc.n();
    return r;
}

inline CutQuad random_quad(const CutRanges& r, Rng& rng) {
    CutQuad q;
    q.g_head = rng.uniform_int(r.gh_lo, r.gh_hi);
    q.g_tail = rng.uniform_int(r.gt_lo, r.gt_hi);
    q.d_head = rng.uniform_int(r.dh_lo, r.dh_hi);
    q.d_tail = rng.uniform_int(r.dt_lo, r.dt_hi);
    return q;
}

// re-randomize one of the four cut indices to another valid value
inline void mutate_quad(CutQuad& q, const CutRanges& r, Rng& rng) {
    for (int attempt = 0; attempt < 8; ++attempt) {
        int field = rng.uniform_int(0, 3);
        int lo = 0, hi = 0, cur = 0;
        switch (field) {
            case 0: lo = r.gh_lo; hi = r.gh_hi; cur = q.g_head; break;
            case 1: lo = r.gt_lo; hi = r.gt_hi; cur = q.g_tail; break;
            case 2: lo = r.dh_lo; hi = r.dh_hi; cur = q.d_head; break;
            default: lo = r.dt_lo; hi = r.dt_hi; cur = q.d_tail; break;
        }
        if (hi <= lo) continue;  // single valid value; try another field
        int v = rng.uniform_int(lo, hi - 1);
        if (v >= cur) ++v;  // uniform over valid values != cur
        switch (field) {
            case 0: q.g_head = v; break;
            case 1: q.g_tail = v; break;
            case 2: q.d_head = v; break;
            default: q.d_tail = v; break;
        }
        return;
    }
}

}  // namespace detail

struct GaResult {
    CutAssignment best_cuts;   // expanded to the full fleet
    double best_l_total = 0;
    std::vector<double> history;  // best-ever fitness per generation
    int generations_run = 0;
};

inline GaResult evolve(const GaConfig& cfg, const Fleet& full, const ModelProfile& p) {
    validate_ga(cfg);
    int m = int(full.clients.size());
    int target = cfg.reduce_target <= 0 ? std::min(20, m) : std::min(cfg.reduce_target, m);
    ReducedFleet rf = reduce_fleet(full, target);
    const detail::CutRanges ranges = detail::cut_ranges(p);
    int rm = int(rf.fleet.clients.size());
    Rng rng(mix_seed(cfg.seed, 0x6a5u));

    std::vector<CutAssignment> pop(size_t(cfg.population));
    for (auto& ind : pop) {
        ind.resize(size_t(rm));
        for (auto& q : ind) q = detail::random_quad(ranges, rng);
    }
    std::vector<double> fit(pop.size());
    auto eval_all = [&] {
        for (size_t i = 0; i < pop.size(); ++i) fit[i] = ga_fitness(full, p, rf, pop[i]);
    };
    eval_all();

    GaResult res;
    double best_ever = -std::numeric_limits<double>::infinity();
    CutAssignment best_ind;
    int stagnant = 0;
    auto note_best = [&] {
        for (size_t i = 0; i < pop.size(); ++i)
            if (fit[i] > best_ever) {
                best_ever = fit[i];
                best_ind = pop[i];
                stagnant = -1;
            }
    };
    note_best();
    stagnant = 0;

    auto tournament = [&]() -> const CutAssignment& {
        size_t best = size_t(rng.uniform_int(0, cfg.population - 1));
        for (int t = 1; t < cfg.tournament; ++t) {
            size_t c = size_t(rng.uniform_int(0, cfg.population - 1));
            if (fit[c] > fit[best]) best = c;
        }
        return pop[best];
    };

    for (int gen = 0; gen < cfg.generations; ++gen) {
        std::vector<size_t> order(pop.size());
        std::iota(order.begin(), order.end(), size_t(0));
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return fit[a] > fit[b]; });

        std::vector<CutAssignment> next;
        next.reserve(pop.size());
        for (int e = 0; e < cfg.elites; ++e) next.push_back(pop[order[size_t(e)]]);

        while (int(next.size()) < cfg.population) {
            const CutAssignment& p1 = tournament();
            const CutAssignment& p2 = tournament();
            CutAssignment c1, c2;
            c1.resize(size_t(rm));
            c2.resize(size_t(rm));
            if (rng.coin()) {
                // uniform: each client's quadruple from either parent
                for (int i = 0; i < rm; ++i) {
                    bool take1 = rng.coin();
                    c1[size_t(i)] = take1 ? p1[size_t(i)] : p2[size_t(i)];
                    c2[size_t(i)] = take1 ? p2[size_t(i)] : p1[size_t(i)];
                }
            } else {
                // two-point over the client list
                int a = rng.uniform_int(0, rm);
                int b = rng.uniform_int(0, rm);
                if (a > b) std::swap(a, b);
                for (int i = 0; i < rm; ++i) {
                    bool mid_seg = i >= a && i < b;
                    c1[size_t(i)] = mid_seg ? p2[size_t(i)] : p1[size_t(i)];
                    c2[size_t(i)] = mid_seg ? p1[size_t(i)] : p2[size_t(i)];
                }
            }
            for (CutAssignment* c : {&c1, &c2}) {
                for (auto& q : *c)
                    if (rng.uniform() < cfg.mutation_rate) detail::mutate_quad(q, ranges, rng);
                if (int(next.size()) < cfg.population) next.push_back(std::move(*c));
            }
        }
        pop = std::move(next);
        eval_all();
        note_best();
        ++stagnant;
        res.history.push_back(best_ever);
        res.generations_run = gen + 1;
        if (stagnant >= cfg.stagnation) break;
    }

    res.best_cuts = expand_assignment(rf, best_ind);
    res.best_l_total = -best_ever;
    return res;
}

struct ExhaustiveResult {
    CutAssignment cuts;
    double l_total = 0;
    int64_t evaluated = 0;
};

namespace detail {

inline std::vector<CutQuad> all_quads(const ModelProfile& p) {
    CutRanges r = cut_ranges(p);
    std::vector<CutQuad> out;
    for (int gh = r.gh_lo; gh <= r.gh_hi; ++gh)
        for (int gt = r.gt_lo; gt <= r.gt_hi; ++gt)
            for (int dh = r.dh_lo; dh <= r.dh_hi; ++dh)
                for (int dt = r.dt_lo; dt <= r.dt_hi; ++dt)
                    out.push_back(CutQuad{gh, gt, dh, dt});
    return out;
}

inline ExhaustiveResult odometer_search(const Fleet& fleet, const ModelProfile& p,
                                        const std::vector<std::vector<int>>& slots,
                                        const std::vector<CutQuad>& quads,
                                        int64_t guard) {
    double space = 1;
    for (size_t s = 0; s < slots.size(); ++s) space *= double(quads.size());
    if (space > double(guard))
        throw InvariantError("exhaustive search space ~" + std::to_string(space) +
                             " assignments exceeds the guard of " + std::to_string(guard));

    std::vector<size_t> idx(slots.size(), 0);
    CutAssignment cur(fleet.clients.size());
    ExhaustiveResult best;
    best.l_total = std::numeric_limits<double>::infinity();
    bool done = false;
    while (!done) {
        for (size_t s = 0; s < slots.size(); ++s)
            for (int c : slots[s]) cur[size_t(c)] = quads[idx[s]];
        double lt = total_latency(fleet, p, cur).l_total;
        ++best.evaluated;
        if (lt < best.l_total) {
            best.l_total = lt;
            best.cuts = cur;
        }
        // advance odometer
        size_t s = 0;
        for (; s < idx.size(); ++s) {
            if (++idx[s] < quads.size()) break;
            idx[s] = 0;
        }
        done = s == idx.size();
    }
    return best;
}

}  // namespace detail

// Enumerates one quadruple per group of identical device profiles; identical
// clients share a quadruple.
inline ExhaustiveResult exhaustive_search(const Fleet& fleet, const ModelProfile& p,
                                          int64_t guard = 10'000'000) {
    validate_fleet(fleet);
    std::vector<DeviceProfile> gprof;
    std::vector<std::vector<int>> slots;
    for (size_t i = 0; i < fleet.clients.size(); ++i) {
        size_t g = 0;
        for (; g < gprof.size(); ++g)
            if (gprof[g] == fleet.clients[i].dev) break;
        if (g == gprof.size()) {
            gprof.push_back(fleet.clients[i].dev);
            slots.emplace_back();
        }
        slots[g].push_back(int(i));
    }
    return detail::odometer_search(fleet, p, slots, detail::all_quads(p), guard);
}

// Full per-client enumeration (no symmetry reduction); used to validate the
// grouped search on tiny fleets.
inline ExhaustiveResult exhaustive_search_full(const Fleet& fleet, const ModelProfile& p,
                                               int64_t guard = 10'000'000) {
    validate_fleet(fleet);
    std::vector<std::vector<int>> slots;
    for (size_t i = 0; i < fleet.clients.size(); ++i) slots.push_back({int(i)});
    return detail::odometer_search(fleet, p, slots, detail::all_quads(p), guard);
}

}  // namespace splitgan
