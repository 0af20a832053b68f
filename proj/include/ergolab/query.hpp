#pragma once

// Measurable sets as predicate trees over points, evaluated at a time offset.
//
// Every query is evaluated against T^t x for a Point x and a time t. Evaluation returns
// std::nullopt ("unresolved") only when a tower-level predicate cannot locate the point
// within its scan budget.

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "error.hpp"
#include "systems.hpp"

namespace ergolab {

// Position of a point inside a Kakutani-Rokhlin tower. Times are relative to the
// queried time: block_start_time <= 0 < block_start_time + height.
struct Location {
    std::int64_t level = 0;
    std::int64_t height = 0;
    TimeIndex block_start_time = 0;
    TimeIndex a_visit_time = 0;
    std::int64_t return_time = 0;

    friend bool operator==(const Location&, const Location&) = default;
};

class Tower {
public:
    virtual ~Tower() = default;
    virtual std::uint64_t id() const = 0;
    virtual std::optional<Location> locate(const Point& x, TimeIndex t = 0) const = 0;
    virtual Json to_json() const = 0;
};

using TowerRef = std::shared_ptr<const Tower>;
using TowerRegistry = std::map<std::uint64_t, TowerRef>;

// Levels given as inclusive ranges and arithmetic progressions {start + k*step : k >= 0},
// optionally bounded by `last` (inclusive; negative means unbounded).
struct LevelSet {
    struct Progression {
        std::int64_t start = 0;
        std::int64_t step = 1;
        std::int64_t last = -1;
        friend bool operator==(const Progression&, const Progression&) = default;
    };

    std::vector<std::pair<std::int64_t, std::int64_t>> ranges;
    std::vector<Progression> progressions;

    bool contains(std::int64_t level) const noexcept {
        for (const auto& [a, b] : ranges)
            if (level >= a && level <= b) return true;
        for (const auto& p : progressions)
            if (level >= p.start && (p.last < 0 || level <= p.last) && (level - p.start) % p.step == 0) return true;
        return false;
    }

    Json to_json() const {
        Json pr = Json::array();
        for (const auto& p : progressions) pr.push_back({p.start, p.step, p.last});
        return Json{{"ranges", ranges}, {"progressions", pr}};
    }

    static LevelSet from_json(const Json& j) {
        LevelSet s;
        if (j.contains("ranges")) s.ranges = j.at("ranges").get<std::vector<std::pair<std::int64_t, std::int64_t>>>();
        if (j.contains("progressions"))
            for (const auto& p : j.at("progressions")) {
                LevelSet::Progression g{p.at(0).get<std::int64_t>(), p.at(1).get<std::int64_t>(),
                                        p.size() > 2 ? p.at(2).get<std::int64_t>() : -1};
                require(g.step >= 1, ErrorCode::InvalidSpec, "progression step must be positive");
                s.progressions.push_back(g);
            }
        return s;
    }

    friend bool operator==(const LevelSet&, const LevelSet&) = default;
};

class SetQuery;

namespace query {

// Circle arc [lo, hi) of a rotation component; lo > hi wraps through 0.
struct Interval {
    double lo = 0.0;
    double hi = 1.0;
    Component component;
};

// word[j] at time offset + j of a shift component.
struct Cylinder {
    TimeIndex offset = 0;
    std::vector<Symbol> word;
    Component component;
};

// Levels of a tower; with from_top the set is matched against height - level, the
// forward time to the next column start.
struct TowerLevels {
    TowerRef tower;
    LevelSet levels;
    bool from_top = false;
};

struct Everything {};

struct Not {
    std::shared_ptr<const SetQuery> arg;
};

struct And {
    std::vector<SetQuery> args;
};

struct Or {
    std::vector<SetQuery> args;
};

} // namespace query

class SetQuery {
public:
    using Variant = std::variant<query::Everything, query::Interval, query::Cylinder, query::TowerLevels, query::Not,
                                 query::And, query::Or>;

    SetQuery() : v_(std::make_shared<const Variant>(query::Everything{})) {}

    static SetQuery everything() { return SetQuery(); }
    static SetQuery interval(double lo, double hi, Component c = {}) {
        require(lo >= 0.0 && lo <= 1.0 && hi >= 0.0 && hi <= 1.0, ErrorCode::InvalidSpec, "interval ends must lie in [0,1]");
        return SetQuery(query::Interval{lo, hi, std::move(c)});
    }
    static SetQuery cylinder(std::vector<Symbol> word, TimeIndex offset = 0, Component c = {}) {
        require(!word.empty(), ErrorCode::InvalidSpec, "cylinder word is empty");
        return SetQuery(query::Cylinder{offset, std::move(word), std::move(c)});
    }
    static SetQuery symbol_at(Symbol s, TimeIndex t = 0, Component c = {}) { return cylinder({s}, t, std::move(c)); }
    static SetQuery tower_levels(TowerRef tower, LevelSet levels, bool from_top = false) {
        require(tower != nullptr, ErrorCode::InvalidSpec, "tower-level query needs a tower");
        return SetQuery(query::TowerLevels{std::move(tower), std::move(levels), from_top});
    }
    static SetQuery negate(SetQuery q) { return SetQuery(query::Not{std::make_shared<const SetQuery>(std::move(q))}); }
    static SetQuery all_of(std::vector<SetQuery> qs) { return SetQuery(query::And{std::move(qs)}); }
    static SetQuery any_of(std::vector<SetQuery> qs) { return SetQuery(query::Or{std::move(qs)}); }

    const Variant& variant() const noexcept { return *v_; }

    // Membership of T^t x.
    std::optional<bool> contains(const Point& x, TimeIndex t = 0) const {
        return std::visit([&](const auto& q) { return eval(q, x, t); }, *v_);
    }

    // Exact measure when it is available in closed form.
    std::optional<double> measure(const SystemSpec& spec) const {
        if (const auto* iv = std::get_if<query::Interval>(v_.get())) {
            if (!spec.component(iv->component).is<Rotation>()) return std::nullopt;
            return iv->lo <= iv->hi ? iv->hi - iv->lo : 1.0 - iv->lo + iv->hi;
        }
        if (const auto* cy = std::get_if<query::Cylinder>(v_.get())) {
            const auto& s = spec.component(cy->component);
            if (s.is<Bernoulli>()) {
                double m = 1.0;
                for (auto w : cy->word) m *= w < s.as<Bernoulli>().probs.size() ? s.as<Bernoulli>().probs[w] : 0.0;
                return m;
            }
            if (s.is<Markov>()) {
                const auto& mk = s.as<Markov>();
                if (cy->word[0] >= mk.stationary.size()) return 0.0;
                double m = mk.stationary[cy->word[0]];
                for (std::size_t j = 1; j < cy->word.size(); ++j)
                    m *= cy->word[j] < mk.matrix.size() ? mk.matrix[cy->word[j - 1]][cy->word[j]] : 0.0;
                return m;
            }
            return std::nullopt;
        }
        if (std::holds_alternative<query::Everything>(*v_)) return 1.0;
        return std::nullopt;
    }

    // Towers referenced anywhere in the tree, by id.
    void collect_towers(TowerRegistry& out) const {
        std::visit(
            [&](const auto& q) {
                using T = std::decay_t<decltype(q)>;
                if constexpr (std::is_same_v<T, query::TowerLevels>) out.emplace(q.tower->id(), q.tower);
                if constexpr (std::is_same_v<T, query::Not>) q.arg->collect_towers(out);
                if constexpr (std::is_same_v<T, query::And> || std::is_same_v<T, query::Or>)
                    for (const auto& a : q.args) a.collect_towers(out);
            },
            *v_);
    }

    Json to_json() const {
        return std::visit(
            [](const auto& q) -> Json {
                using T = std::decay_t<decltype(q)>;
                if constexpr (std::is_same_v<T, query::Everything>) return Json{{"kind", "all"}};
                if constexpr (std::is_same_v<T, query::Interval>)
                    return Json{{"kind", "interval"}, {"lo", q.lo}, {"hi", q.hi}, {"component", q.component}};
                if constexpr (std::is_same_v<T, query::Cylinder>)
                    return Json{{"kind", "cylinder"}, {"offset", q.offset}, {"word", q.word}, {"component", q.component}};
                if constexpr (std::is_same_v<T, query::TowerLevels>)
                    return Json{{"kind", "tower_levels"}, {"tower", q.tower->id()}, {"levels", q.levels.to_json()}, {"from_top", q.from_top}};
                if constexpr (std::is_same_v<T, query::Not>) return Json{{"kind", "not"}, {"arg", q.arg->to_json()}};
                if constexpr (std::is_same_v<T, query::And> || std::is_same_v<T, query::Or>) {
                    Json args = Json::array();
                    for (const auto& a : q.args) args.push_back(a.to_json());
                    return Json{{"kind", std::is_same_v<T, query::And> ? "and" : "or"}, {"args", args}};
                }
            },
            *v_);
    }

    static SetQuery from_json(const Json& j, const TowerRegistry& towers = {}) {
        try {
            const auto kind = j.at("kind").get<std::string>();
            if (kind == "all") return everything();
            if (kind == "interval")
                return interval(j.at("lo").get<double>(), j.at("hi").get<double>(), j.value("component", Component{}));
            if (kind == "cylinder")
                return cylinder(j.at("word").get<std::vector<Symbol>>(), j.value("offset", TimeIndex{0}),
                                j.value("component", Component{}));
            if (kind == "tower_levels") {
                const auto id = j.at("tower").get<std::uint64_t>();
                auto it = towers.find(id);
                require(it != towers.end(), ErrorCode::InvalidSpec, "query references unknown tower " + std::to_string(id));
                return tower_levels(it->second, LevelSet::from_json(j.at("levels")), j.value("from_top", false));
            }
            if (kind == "not") return negate(from_json(j.at("arg"), towers));
            if (kind == "and" || kind == "or") {
                std::vector<SetQuery> args;
                for (const auto& a : j.at("args")) args.push_back(from_json(a, towers));
                return kind == "and" ? all_of(std::move(args)) : any_of(std::move(args));
            }
            throw Error(ErrorCode::InvalidSpec, "unknown query kind '" + kind + "'");
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::InvalidSpec, e.what());
        }
    }

private:
    template <class T> explicit SetQuery(T q) : v_(std::make_shared<const Variant>(std::move(q))) {}

    static std::optional<bool> eval(const query::Everything&, const Point&, TimeIndex) { return true; }
    static std::optional<bool> eval(const query::Interval& q, const Point& x, TimeIndex t) {
        const double v = x.coordinate(t, q.component);
        return q.lo <= q.hi ? (v >= q.lo && v < q.hi) : (v >= q.lo || v < q.hi);
    }
    static std::optional<bool> eval(const query::Cylinder& q, const Point& x, TimeIndex t) {
        for (std::size_t j = 0; j < q.word.size(); ++j)
            if (x.symbol(t + q.offset + static_cast<TimeIndex>(j), q.component) != q.word[j]) return false;
        return true;
    }
    static std::optional<bool> eval(const query::TowerLevels& q, const Point& x, TimeIndex t) {
        auto loc = q.tower->locate(x, t);
        if (!loc) return std::nullopt;
        return q.levels.contains(q.from_top ? loc->height - loc->level : loc->level);
    }
    static std::optional<bool> eval(const query::Not& q, const Point& x, TimeIndex t) {
        auto v = q.arg->contains(x, t);
        if (!v) return std::nullopt;
        return !*v;
    }
    // Kleene semantics: a decisive argument wins over an unresolved one.
    static std::optional<bool> eval(const query::And& q, const Point& x, TimeIndex t) {
        bool unresolved = false;
        for (const auto& a : q.args) {
            auto v = a.contains(x, t);
            if (!v) unresolved = true;
            else if (!*v) return false;
        }
        if (unresolved) return std::nullopt;
        return true;
    }
    static std::optional<bool> eval(const query::Or& q, const Point& x, TimeIndex t) {
        bool unresolved = false;
        for (const auto& a : q.args) {
            auto v = a.contains(x, t);
            if (!v) unresolved = true;
            else if (*v) return true;
        }
        if (unresolved) return std::nullopt;
        return false;
    }

    std::shared_ptr<const Variant> v_;
};

// Entry-time search into a fixed set, with accelerated paths for rotation intervals
// (optional baby-step giant-step index) and cylinders on fair-coin shifts.
class EntryScanner {
public:
    explicit EntryScanner(SetQuery set, std::shared_ptr<const RotationEntryIndex> index = nullptr)
        : set_(std::move(set)), index_(std::move(index)) {}

    const SetQuery& set() const noexcept { return set_; }

    // Smallest k in [1, budget] with T^{t +/- k} x in the set.
    std::optional<std::int64_t> search(const Point& x, TimeIndex t, Direction dir, std::int64_t budget) const {
        if (const auto* iv = std::get_if<query::Interval>(&set_.variant())) {
            auto& node = x.node(iv->component);
            if (const auto* rot = std::get_if<detail::RotationOrbit>(&node.v)) {
                if (index_ && index_->alpha() == rot->alpha)
                    return index_->search(*rot, iv->lo, iv->hi, x.origin() + t, dir, budget);
            }
        }
        if (const auto* cy = std::get_if<query::Cylinder>(&set_.variant())) {
            auto& node = x.node(cy->component);
            if (const auto* b = std::get_if<detail::BernoulliOrbit>(&node.v); b && b->fair_binary && cy->word.size() <= 64)
                return fair_word_search(*b, cy->word, cy->offset, x.origin() + t, dir, budget);
        }
        const int sgn = dir == Direction::forward ? 1 : -1;
        for (std::int64_t k = 1; k <= budget; ++k) {
            auto v = set_.contains(x, t + sgn * k);
            if (v && *v) return k;
        }
        return std::nullopt;
    }

private:
    SetQuery set_;
    std::shared_ptr<const RotationEntryIndex> index_;
};

struct EntryTime {
    std::optional<TimeIndex> time; // signed time of first entry; nullopt = Unresolved
    bool resolved() const noexcept { return time.has_value(); }
};

// Smallest |t| >= 1 in the given direction with T^t x in the set, or Unresolved.
inline EntryTime first_entry_time(const Point& x, const SetQuery& set, Direction dir, std::int64_t budget) {
    require(budget >= 1, ErrorCode::InvalidConfig, "first_entry_time budget must be >= 1");
    auto k = EntryScanner(set).search(x, 0, dir, budget);
    if (!k) return {};
    return {dir == Direction::forward ? *k : -*k};
}

} // namespace ergolab
