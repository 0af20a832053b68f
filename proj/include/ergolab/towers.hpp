#pragma once

// Kakutani-Rokhlin towers with heights N and N+1.
//
// The base B is never stored. Given a return-time base A, a point's column is the orbit
// segment between its last A-visit at or before now and the next A-visit. A column of
// height H = qN + r (0 <= r < N) is cut into r blocks of size N+1 followed by q - r
// blocks of size N; B is the set of block starts. Columns with q < r cannot be cut this
// way and are reported as unresolved, like scans that exceed the budget.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <boost/math/distributions/chi_squared.hpp>

#include "error.hpp"
#include "montecarlo.hpp"
#include "query.hpp"
#include "systems.hpp"

namespace ergolab {

enum class LocateStatus { ok, scan_budget, non_decomposable };

struct LocateResult {
    LocateStatus status = LocateStatus::ok;
    Location location;
};

// Block decomposition of a column of height `column` into {n, n+1} blocks. Returns the
// offsets of block starts, or an empty vector when the column cannot be decomposed.
inline std::vector<std::int64_t> block_boundaries(std::int64_t column, std::int64_t n) {
    const std::int64_t q = column / n, r = column % n;
    if (column < n || q < r) return {};
    std::vector<std::int64_t> starts;
    std::int64_t pos = 0;
    for (std::int64_t b = 0; b < q; ++b) {
        starts.push_back(pos);
        pos += b < r ? n + 1 : n;
    }
    return starts;
}

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Predicted mu-measure of non-decomposable columns when return times to A are roughly
// geometric with parameter p.
inline double predicted_bad_measure(double p, std::int64_t n) {
    double bad = 0.0, surv = 1.0;
    const std::int64_t limit = n * n + n;
    for (std::int64_t h = 1; h <= limit; ++h) {
        if (h < n || h / n < h % n) bad += static_cast<double>(h) * p * p * surv;
        surv *= 1.0 - p;
    }
    return bad;
}

} // namespace detail

class KRTower final : public Tower {
public:
    KRTower(SystemSpec system, SetQuery base_set, std::int64_t height, std::int64_t scan_budget)
        : system_(std::move(system)), a_(std::move(base_set)), n_(height), budget_(scan_budget), scanner_(a_) {
        require(n_ >= 1, ErrorCode::InvalidConfig, "tower height must be positive");
        require(budget_ >= 1, ErrorCode::InvalidConfig, "scan budget must be positive");
        const Json desc{{"system", system_.to_json()}, {"A", a_.to_json()}, {"N", n_}, {"scan_budget", budget_}};
        id_ = detail::fnv1a(desc.dump()) & 0xFFFFFFFFULL;
        if (const auto* iv = std::get_if<query::Interval>(&a_.variant())) {
            const auto& comp = system_.component(iv->component);
            if (comp.is<Rotation>() && a_.measure(system_).value_or(1.0) < 1e-3) {
                const double mu = *a_.measure(system_);
                const auto baby = static_cast<std::int64_t>(std::ceil(std::sqrt(std::min(1e12, 4.0 / mu))));
                scanner_ = EntryScanner(a_, std::make_shared<const RotationEntryIndex>(comp.as<Rotation>().alpha, baby));
            }
        }
    }

    std::uint64_t id() const override { return id_; }
    const SystemSpec& system() const noexcept { return system_; }
    const SetQuery& base_set() const noexcept { return a_; }
    std::int64_t height() const noexcept { return n_; }
    std::int64_t scan_budget() const noexcept { return budget_; }

    std::optional<Location> locate(const Point& x, TimeIndex t = 0) const override {
        auto r = locate_detail(x, t);
        if (r.status != LocateStatus::ok) return std::nullopt;
        return r.location;
    }

    LocateResult locate_detail(const Point& x, TimeIndex t = 0) const {
        auto& cache = x.state().entries[id_].visits;
        const TimeIndex abs = x.origin() + t;
        const auto rel = [&](TimeIndex a) { return a - x.origin(); };
        if (cache.empty()) {
            auto in = a_.contains(x, t);
            TimeIndex prev = abs;
            if (!in || !*in) {
                auto k = scanner_.search(x, t, Direction::backward, budget_);
                if (!k) return {LocateStatus::scan_budget, {}};
                prev = abs - *k;
            }
            cache.push_back(prev);
        }
        while (abs < cache.front()) {
            auto k = scanner_.search(x, rel(cache.front()), Direction::backward, budget_);
            if (!k) return {LocateStatus::scan_budget, {}};
            cache.push_front(cache.front() - *k);
        }
        while (abs >= cache.back()) {
            auto k = scanner_.search(x, rel(cache.back()), Direction::forward, budget_);
            if (!k) return {LocateStatus::scan_budget, {}};
            cache.push_back(cache.back() + *k);
        }
        auto it = std::upper_bound(cache.begin(), cache.end(), abs);
        const TimeIndex next = *it, prev = *(it - 1);
        const std::int64_t column = next - prev;
        const std::int64_t q = column / n_, r = column % n_;
        if (column < n_ || q < r) return {LocateStatus::non_decomposable, {}};
        const std::int64_t off = abs - prev;
        std::int64_t start, h;
        if (off < r * (n_ + 1)) {
            start = prev + (off / (n_ + 1)) * (n_ + 1);
            h = n_ + 1;
        } else {
            start = prev + r * (n_ + 1) + ((off - r * (n_ + 1)) / n_) * n_;
            h = n_;
        }
        return {LocateStatus::ok, Location{abs - start, h, start - abs, prev - abs, column}};
    }

    Json to_json() const override {
        return Json{{"id", id_}, {"system", system_.to_json()}, {"A", a_.to_json()}, {"N", n_}, {"scan_budget", budget_}};
    }

    static std::shared_ptr<const KRTower> from_json(const Json& j) {
        auto t = std::make_shared<const KRTower>(SystemSpec::from_json(j.at("system")), SetQuery::from_json(j.at("A")),
                                                 j.at("N").get<std::int64_t>(), j.at("scan_budget").get<std::int64_t>());
        if (j.contains("id"))
            require(j.at("id").get<std::uint64_t>() == t->id(), ErrorCode::InvalidSpec, "tower id does not match its definition");
        return t;
    }

private:
    SystemSpec system_;
    SetQuery a_;
    std::int64_t n_;
    std::int64_t budget_;
    std::uint64_t id_ = 0;
    EntryScanner scanner_;
};

using KRTowerRef = std::shared_ptr<const KRTower>;

// Default return-time base for a tower of height n.
//   rotation: [0, 1/(2 n^2));
//   product:  the base of its rotation factor;
//   shift:    the non-self-overlapping cylinder 0^{L-1} 1, with L the shortest length whose
//             predicted non-decomposable column measure is at most 1e-3.
inline SetQuery default_base(const SystemSpec& spec, std::int64_t n, Component prefix = {}) {
    const auto& s = spec.component(prefix);
    if (s.is<Rotation>()) return SetQuery::interval(0.0, 1.0 / (2.0 * static_cast<double>(n) * static_cast<double>(n)), prefix);
    if (s.is<Product>()) {
        Component c = prefix;
        c.push_back(s.as<Product>().left->is<Rotation>() ? 0 : 1);
        return default_base(spec, n, c);
    }
    require(s.alphabet() >= 2, ErrorCode::InvalidSpec, "shift base needs at least two symbols");
    for (std::size_t len = 2; len <= 64; ++len) {
        std::vector<Symbol> word(len, 0);
        word.back() = 1;
        auto q = SetQuery::cylinder(word, 0, prefix);
        const double p = q.measure(spec).value_or(0.0);
        if (p <= 0.0) break;
        if (p * static_cast<double>(n) * static_cast<double>(n) < 0.5 && detail::predicted_bad_measure(p, n) <= 1e-3) return q;
    }
    throw Error(ErrorCode::NotSeparated, "no cylinder base of length <= 64 separates a tower of height " + std::to_string(n));
}

inline std::int64_t default_scan_budget(double mu_a, std::int64_t n) {
    return static_cast<std::int64_t>(std::ceil(20.0 / mu_a)) + 4 * n;
}

struct TowerBuildOptions {
    SamplePlan validation = SamplePlan::independent(2000);
    double max_non_decomposable = 1e-3;
    double max_unresolved = 0.01;
};

namespace detail {

struct ValidationAcc {
    std::size_t n = 0, budget = 0, bad = 0;
    void merge(const ValidationAcc& o) {
        n += o.n;
        budget += o.budget;
        bad += o.bad;
    }
};

inline double estimate_measure(const SetQuery& a, const SystemSpec& spec, const RngStream& rng) {
    if (auto m = a.measure(spec)) return *m;
    struct Acc {
        std::size_t n = 0, hits = 0;
        void merge(const Acc& o) { n += o.n, hits += o.hits; }
    };
    auto acc = sample_reduce<Acc>(spec, SamplePlan::independent(100000), rng, [&](const Point& x, std::size_t, Acc& s) {
        ++s.n;
        auto v = a.contains(x);
        s.hits += v && *v;
    });
    return static_cast<double>(acc.hits) / static_cast<double>(acc.n);
}

} // namespace detail

// Builds a tower of height n over the base set A. scan_budget = 0 selects the default
// ceil(20 / mu(A)) + 4n. A validation sample rejects bases whose columns are not
// decomposable (NotSeparated) or whose scans run out of budget (ScanBudget).
inline KRTowerRef build_tower(const SystemSpec& spec, const SetQuery& a, std::int64_t n, std::int64_t scan_budget,
                              const RngStream& rng, const TowerBuildOptions& opts = {}) {
    require(n >= 1, ErrorCode::InvalidConfig, "tower height must be positive");
    const double mu = detail::estimate_measure(a, spec, rng.child(1));
    require(mu > 0.0, ErrorCode::NotSeparated, "tower base has empirical measure zero");
    if (scan_budget <= 0) scan_budget = default_scan_budget(mu, n);
    auto tower = std::make_shared<const KRTower>(spec, a, n, scan_budget);
    auto acc = sample_reduce<detail::ValidationAcc>(spec, opts.validation, rng.child(2),
                                                    [&](const Point& x, std::size_t, detail::ValidationAcc& s) {
                                                        ++s.n;
                                                        auto r = tower->locate_detail(x);
                                                        s.budget += r.status == LocateStatus::scan_budget;
                                                        s.bad += r.status == LocateStatus::non_decomposable;
                                                    });
    const double nd = static_cast<double>(acc.n);
    require(static_cast<double>(acc.budget) <= opts.max_unresolved * nd, ErrorCode::ScanBudget,
            "tower validation scans exceeded the budget on " + std::to_string(acc.budget) + " points");
    require(static_cast<double>(acc.bad) <= opts.max_non_decomposable * nd, ErrorCode::NotSeparated,
            "base returns too soon: " + std::to_string(acc.bad) + " validation points lie in columns that cannot be cut into blocks of height " +
                std::to_string(n) + " and " + std::to_string(n + 1));
    return tower;
}

struct TowerReport {
    std::size_t samples = 0;
    double coverage = 0.0;
    double unresolved_fraction = 0.0;
    std::size_t unresolved_budget = 0;
    std::size_t unresolved_non_decomposable = 0;
    double level_uniformity_chi2 = 0.0;
    double chi2_critical_999 = 0.0;
    std::map<std::int64_t, std::size_t> height_histogram;
    std::size_t disjointness_violations = 0;
    std::size_t neighbour_unresolved = 0; // samples whose next block lies in an unresolved column
    std::int64_t min_return_time = 0;
    double short_return_fraction = 0.0; // sampled points whose column is shorter than N^2

    Json to_json() const {
        Json hist = Json::object();
        for (const auto& [h, c] : height_histogram) hist[std::to_string(h)] = c;
        return Json{{"samples", samples},
                    {"coverage", coverage},
                    {"unresolved_fraction", unresolved_fraction},
                    {"unresolved_scan_budget", unresolved_budget},
                    {"unresolved_non_decomposable", unresolved_non_decomposable},
                    {"level_uniformity_chi2", level_uniformity_chi2},
                    {"chi2_critical_999", chi2_critical_999},
                    {"height_histogram", hist},
                    {"disjointness_violations", disjointness_violations},
                    {"neighbour_unresolved", neighbour_unresolved},
                    {"min_return_time", min_return_time},
                    {"short_return_fraction", short_return_fraction}};
    }
};

namespace detail {

struct VerifyAcc {
    std::size_t n = 0, budget = 0, bad = 0, violations = 0, short_columns = 0, neighbour_unresolved = 0;
    std::vector<std::size_t> levels;
    std::map<std::int64_t, std::size_t> heights;
    std::int64_t min_return = 0;
    void merge(const VerifyAcc& o) {
        n += o.n, budget += o.budget, bad += o.bad, violations += o.violations, short_columns += o.short_columns;
        neighbour_unresolved += o.neighbour_unresolved;
        if (levels.size() < o.levels.size()) levels.resize(o.levels.size());
        for (std::size_t i = 0; i < o.levels.size(); ++i) levels[i] += o.levels[i];
        for (const auto& [h, c] : o.heights) heights[h] += c;
        if (o.min_return > 0 && (min_return == 0 || o.min_return < min_return)) min_return = o.min_return;
    }
};

} // namespace detail

// Monte Carlo audit of a tower. Each resolved sample is also located from its block
// start, its block top and the next block start; any disagreement with the sample's own
// location counts as a disjointness violation.
inline TowerReport verify_tower(const KRTower& tower, const SamplePlan& plan, const RngStream& rng) {
    const std::int64_t n = tower.height();
    auto acc = sample_reduce<detail::VerifyAcc>(tower.system(), plan, rng, [&](const Point& x, std::size_t, detail::VerifyAcc& s) {
        if (s.levels.empty()) s.levels.assign(static_cast<std::size_t>(n), 0);
        ++s.n;
        auto r = tower.locate_detail(x);
        if (r.status == LocateStatus::scan_budget) return ++s.budget, void();
        if (r.status == LocateStatus::non_decomposable) return ++s.bad, void();
        const auto& loc = r.location;
        ++s.heights[loc.height];
        if (loc.level < n) ++s.levels[static_cast<std::size_t>(loc.level)];
        if (loc.return_time < n * n) ++s.short_columns;
        if (s.min_return == 0 || loc.return_time < s.min_return) s.min_return = loc.return_time;
        const auto base = tower.locate(x, -loc.level);
        const auto top = tower.locate(x, loc.height - 1 - loc.level);
        // The block above the top may start a column that cannot be decomposed; that is unresolved, not an overlap.
        const auto next_detail = tower.locate_detail(x, loc.height - loc.level);
        const auto next = next_detail.status == LocateStatus::ok ? std::optional<Location>(next_detail.location) : std::nullopt;
        s.neighbour_unresolved += !next;
        const bool consistent = base && top && base->level == 0 && base->height == loc.height &&
                                base->block_start_time == 0 && top->level == loc.height - 1 && top->height == loc.height &&
                                (!next || next->level == 0) && (loc.height == n || loc.height == n + 1) && loc.level >= 0 &&
                                loc.level < loc.height && loc.block_start_time == -loc.level;
        s.violations += !consistent;
    });
    TowerReport rep;
    rep.samples = acc.n;
    const std::size_t unresolved = acc.budget + acc.bad;
    rep.unresolved_budget = acc.budget;
    rep.unresolved_non_decomposable = acc.bad;
    rep.unresolved_fraction = acc.n ? static_cast<double>(unresolved) / static_cast<double>(acc.n) : 0.0;
    rep.coverage = 1.0 - rep.unresolved_fraction;
    rep.height_histogram = acc.heights;
    rep.disjointness_violations = acc.violations;
    rep.neighbour_unresolved = acc.neighbour_unresolved;
    rep.min_return_time = acc.min_return;
    const std::size_t resolved = acc.n - unresolved;
    rep.short_return_fraction = resolved ? static_cast<double>(acc.short_columns) / static_cast<double>(resolved) : 0.0;
    std::size_t below = 0;
    for (auto c : acc.levels) below += c;
    if (n >= 2 && below > 0) {
        const double e = static_cast<double>(below) / static_cast<double>(n);
        for (auto c : acc.levels) rep.level_uniformity_chi2 += (static_cast<double>(c) - e) * (static_cast<double>(c) - e) / e;
        rep.chi2_critical_999 = boost::math::quantile(boost::math::chi_squared(static_cast<double>(n - 1)), 0.999);
    }
    return rep;
}

} // namespace ergolab
