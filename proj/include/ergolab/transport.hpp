#pragma once

// Exact discrete optimal transport with integer masses and integer costs.
//
// Min-cost flow by successive shortest paths: Dijkstra with node potentials on the dense
// bipartite residual graph. Supplies and demands are integers with equal totals, so the
// solver is exact; callers scale rational masses to a common denominator.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "error.hpp"

namespace ergolab {

struct TransportPlan {
    std::int64_t cost = 0;                                        // sum of flow * cost
    std::map<std::pair<std::size_t, std::size_t>, std::int64_t> flow; // positive entries only
};

// cost(i, j) must be a non-negative integer.
inline TransportPlan solve_transport(const std::vector<std::int64_t>& supply, const std::vector<std::int64_t>& demand,
                                     const std::function<std::int64_t(std::size_t, std::size_t)>& cost) {
    const std::size_t m = supply.size(), k = demand.size();
    std::int64_t total_s = 0, total_d = 0;
    for (auto v : supply) total_s += v;
    for (auto v : demand) total_d += v;
    require(total_s == total_d, ErrorCode::InvalidConfig, "transport supplies and demands must balance");
    TransportPlan plan;
    if (m == 0 || k == 0) return plan;

    std::vector<std::vector<std::int64_t>> c(m, std::vector<std::int64_t>(k));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) c[i][j] = cost(i, j);

    std::vector<std::int64_t> rs = supply, rd = demand;
    // Reverse residual edges j -> i exist where flow(i, j) > 0.
    std::vector<std::map<std::size_t, std::int64_t>> by_col(k);
    // Potentials keep reduced costs non-negative; sources start at 0, sinks at min incoming cost.
    std::vector<std::int64_t> pu(m, 0), pv(k, 0);
    for (std::size_t j = 0; j < k; ++j) {
        std::int64_t best = std::numeric_limits<std::int64_t>::max();
        for (std::size_t i = 0; i < m; ++i) best = std::min(best, c[i][j]);
        pv[j] = best;
    }

    constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
    std::vector<std::int64_t> du(m), dv(k);
    std::vector<std::size_t> pred_v(k), pred_u(m);
    std::vector<char> done_u(m), done_v(k);
    std::int64_t remaining = total_s;
    while (remaining > 0) {
        // Multi-source Dijkstra from every source with spare supply.
        std::fill(du.begin(), du.end(), inf);
        std::fill(dv.begin(), dv.end(), inf);
        std::fill(done_u.begin(), done_u.end(), 0);
        std::fill(done_v.begin(), done_v.end(), 0);
        for (std::size_t i = 0; i < m; ++i)
            if (rs[i] > 0) du[i] = 0;
        for (;;) {
            std::int64_t best = inf;
            std::size_t who = 0;
            bool is_u = true;
            for (std::size_t i = 0; i < m; ++i)
                if (!done_u[i] && du[i] < best) best = du[i], who = i, is_u = true;
            for (std::size_t j = 0; j < k; ++j)
                if (!done_v[j] && dv[j] < best) best = dv[j], who = j, is_u = false;
            if (best == inf) break;
            if (is_u) {
                done_u[who] = 1;
                for (std::size_t j = 0; j < k; ++j) {
                    const std::int64_t nd = best + c[who][j] + pu[who] - pv[j];
                    if (!done_v[j] && nd < dv[j]) dv[j] = nd, pred_v[j] = who;
                }
            } else {
                done_v[who] = 1;
                for (const auto& [i, f] : by_col[who]) {
                    const std::int64_t nd = best - c[i][who] + pv[who] - pu[i];
                    if (!done_u[i] && nd < du[i]) du[i] = nd, pred_u[i] = who;
                }
            }
        }
        // Cheapest reachable sink with spare demand.
        std::size_t sink = k;
        for (std::size_t j = 0; j < k; ++j)
            if (rd[j] > 0 && dv[j] < inf && (sink == k || dv[j] < dv[sink])) sink = j;
        require(sink < k, ErrorCode::InvalidConfig, "transport problem is infeasible");
        // Bottleneck along the path.
        std::int64_t push = rd[sink];
        std::size_t j = sink;
        for (;;) {
            const std::size_t i = pred_v[j];
            if (rs[i] > 0) { // path origin
                push = std::min(push, rs[i]);
                break;
            }
            const std::size_t jj = pred_u[i];
            push = std::min(push, by_col[jj].at(i));
            j = jj;
        }
        j = sink;
        for (;;) {
            const std::size_t i = pred_v[j];
            by_col[j][i] += push;
            if (rs[i] > 0) {
                rs[i] -= push;
                break;
            }
            const std::size_t jj = pred_u[i];
            if ((by_col[jj][i] -= push) == 0) by_col[jj].erase(i);
            j = jj;
        }
        rd[sink] -= push;
        remaining -= push;
        const std::int64_t cap = dv[sink];
        for (std::size_t i = 0; i < m; ++i) pu[i] += std::min(du[i], cap);
        for (std::size_t jv = 0; jv < k; ++jv) pv[jv] += std::min(dv[jv], cap);
    }
    for (std::size_t j = 0; j < k; ++j)
        for (const auto& [i, f] : by_col[j]) {
            plan.flow[{i, j}] = f;
            plan.cost += f * c[i][j];
        }
    return plan;
}

} // namespace ergolab
