#pragma once

// Labelled partitions as rule stacks.
//
// A partition assigns a label in [0, a) to every point: override layers are consulted
// from last to first (later layers win); if none applies, the base rules are tried in
// order (first match wins), falling back to the default label. Layers refer to a tower
// and act on tower columns, either through a static level pattern or through a
// ColumnRule that derives labels from the column's content.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "error.hpp"
#include "montecarlo.hpp"
#include "query.hpp"
#include "systems.hpp"
#include "towers.hpp"

namespace ergolab {

using Label = std::uint8_t;

struct RuleOutcome {
    enum class Kind { unresolved, keep, set };
    Kind kind = Kind::keep;
    Label label = 0;

    static RuleOutcome unresolved() { return {Kind::unresolved, 0}; }
    static RuleOutcome keep() { return {Kind::keep, 0}; }
    static RuleOutcome set(Label l) { return {Kind::set, l}; }
};

class Partition;

// Label override computed from the column a point sits in.
class ColumnRule {
public:
    virtual ~ColumnRule() = default;
    virtual TowerRef tower() const = 0;
    virtual RuleOutcome apply(const Point& x, TimeIndex t, const Location& loc) const = 0;
    virtual Json to_json() const = 0;
    // Partitions the rule reads from (for serialization of their towers).
    virtual std::vector<const Partition*> dependencies() const { return {}; }
};

using ColumnRuleRef = std::shared_ptr<const ColumnRule>;
using ColumnRuleFactory = std::function<ColumnRuleRef(const Json&, const TowerRegistry&)>;

inline std::map<std::string, ColumnRuleFactory>& column_rule_factories() {
    static std::map<std::string, ColumnRuleFactory> f;
    return f;
}

// Static override: levels in `levels` of columns of the given height (0 = any) get `label`.
struct LevelOverride {
    TowerRef tower;
    LevelSet levels;
    std::int64_t height = 0;
    Label label = 0;
};

struct OverrideLayer {
    std::variant<LevelOverride, ColumnRuleRef> v;
};

struct NameWindow {
    TimeIndex offset = 0;
    std::vector<Label> labels;

    // CSV row: offset,labels as a digit string (base 36 for alphabets above 10).
    std::string csv_row() const {
        static constexpr char digits[] = "0123456789abcdefghijklmnopqrstuvwxyz";
        std::string s = std::to_string(offset) + ",";
        for (auto l : labels) s.push_back(l < 36 ? digits[l] : '?');
        return s;
    }
};

class Partition {
public:
    struct Rule {
        SetQuery set;
        Label label = 0;
    };

    Partition(std::size_t label_count, Label default_label, std::vector<Rule> rules = {})
        : a_(label_count), default_(default_label), rules_(std::move(rules)) {
        require(a_ >= 2 && a_ <= 256, ErrorCode::InvalidSpec, "partitions need between 2 and 256 labels");
        require(default_ < a_, ErrorCode::InvalidSpec, "default label out of range");
        for (const auto& r : rules_) require(r.label < a_, ErrorCode::InvalidSpec, "rule label out of range");
    }

    // {set -> 1, else 0}
    static Partition indicator(SetQuery set) { return Partition(2, 0, {Rule{std::move(set), 1}}); }

    // Two-interval coding of the rotation by alpha: label 1 on [1 - alpha, 1).
    static Partition sturmian(double alpha, Component c = {}) {
        return indicator(SetQuery::interval(1.0 - alpha, 1.0, std::move(c)));
    }

    static Partition half_interval(Component c = {}) { return indicator(SetQuery::interval(0.5, 1.0, std::move(c))); }

    // Label = symbol at time 0 of a shift component.
    static Partition symbol(std::size_t alphabet, Component c = {}) {
        std::vector<Rule> rules;
        for (std::size_t s = 1; s < alphabet; ++s) rules.push_back({SetQuery::symbol_at(static_cast<Symbol>(s), 0, c), static_cast<Label>(s)});
        return Partition(alphabet, 0, std::move(rules));
    }

    // Label = (symbol at time `first`, ..., symbol at time `first + len - 1`) read as a base-a number.
    static Partition block(std::size_t alphabet, std::size_t len, TimeIndex first = 0, Component c = {}) {
        std::size_t count = 1;
        for (std::size_t i = 0; i < len; ++i) count *= alphabet;
        std::vector<Rule> rules;
        for (std::size_t code = 1; code < count; ++code) {
            std::vector<Symbol> word(len);
            std::size_t v = code;
            for (std::size_t i = len; i-- > 0;) {
                word[i] = static_cast<Symbol>(v % alphabet);
                v /= alphabet;
            }
            rules.push_back({SetQuery::cylinder(word, first, c), static_cast<Label>(code)});
        }
        return Partition(count, 0, std::move(rules));
    }

    std::size_t label_count() const noexcept { return a_; }
    Label default_label() const noexcept { return default_; }
    const std::vector<Rule>& rules() const noexcept { return rules_; }
    const std::vector<OverrideLayer>& layers() const noexcept { return layers_; }

    Partition with_layer(LevelOverride layer) const {
        require(layer.label < a_, ErrorCode::InvalidSpec, "override label out of range");
        Partition p = *this;
        p.layers_.push_back(OverrideLayer{std::move(layer)});
        return p;
    }

    Partition with_layer(ColumnRuleRef rule) const {
        Partition p = *this;
        p.layers_.push_back(OverrideLayer{std::move(rule)});
        return p;
    }

    // Lumps labels through `map` (old label -> new label in [0, new_count)).
    Partition relabeled(std::vector<Label> map, std::size_t new_count) const {
        require(map.size() == a_, ErrorCode::InvalidSpec, "relabeling map must cover every label");
        for (auto l : map) require(l < new_count, ErrorCode::InvalidSpec, "relabeling target out of range");
        Partition p = *this;
        if (!lump_.empty())
            for (auto& l : p.lump_) l = map[l];
        else
            p.lump_ = std::move(map);
        p.a_ = new_count;
        return p;
    }

    // Label of T^t x; nullopt when a tower layer cannot locate the point.
    std::optional<Label> try_label(const Point& x, TimeIndex t = 0) const {
        auto raw = raw_label(x, t);
        if (!raw || lump_.empty()) return raw;
        return lump_[*raw];
    }

    // The base-rule label, ignoring every override layer.
    std::optional<Label> base_label(const Point& x, TimeIndex t = 0) const {
        for (const auto& r : rules_) {
            auto v = r.set.contains(x, t);
            if (!v) return std::nullopt;
            if (*v) return r.label;
        }
        return default_;
    }

    void collect_towers(TowerRegistry& out) const {
        for (const auto& r : rules_) r.set.collect_towers(out);
        for (const auto& l : layers_) {
            if (const auto* lo = std::get_if<LevelOverride>(&l.v)) out.emplace(lo->tower->id(), lo->tower);
            if (const auto* cr = std::get_if<ColumnRuleRef>(&l.v)) {
                out.emplace((*cr)->tower()->id(), (*cr)->tower());
                for (const auto* dep : (*cr)->dependencies()) dep->collect_towers(out);
            }
        }
    }

    // Serialized without tower definitions; see to_json_document for a standalone form.
    Json to_json() const {
        Json rules = Json::array();
        for (const auto& r : rules_) rules.push_back({{"query", r.set.to_json()}, {"label", r.label}});
        Json layers = Json::array();
        for (const auto& l : layers_) {
            if (const auto* lo = std::get_if<LevelOverride>(&l.v))
                layers.push_back({{"kind", "levels"},
                                  {"tower", lo->tower->id()},
                                  {"levels", lo->levels.to_json()},
                                  {"height", lo->height},
                                  {"label", lo->label}});
            else
                layers.push_back(std::get<ColumnRuleRef>(l.v)->to_json());
        }
        Json j{{"label_count", a_}, {"default", default_}, {"rules", rules}, {"layers", layers}};
        if (!lump_.empty()) j["lump"] = lump_;
        return j;
    }

    // {"towers": [...], "partition": {...}}
    Json to_json_document() const {
        TowerRegistry towers;
        collect_towers(towers);
        Json ts = Json::array();
        for (const auto& [id, t] : towers) ts.push_back(t->to_json());
        return Json{{"towers", ts}, {"partition", to_json()}};
    }

    static Partition from_json(const Json& j, const TowerRegistry& towers = {}) {
        try {
            std::vector<Rule> rules;
            for (const auto& r : j.value("rules", Json::array()))
                rules.push_back({SetQuery::from_json(r.at("query"), towers), r.at("label").get<Label>()});
            Partition p(j.at("label_count").get<std::size_t>(), j.value("default", Label{0}), std::move(rules));
            for (const auto& l : j.value("layers", Json::array())) {
                const auto kind = l.at("kind").get<std::string>();
                if (kind == "levels") {
                    auto it = towers.find(l.at("tower").get<std::uint64_t>());
                    require(it != towers.end(), ErrorCode::InvalidSpec, "layer references an unknown tower");
                    p = p.with_layer(LevelOverride{it->second, LevelSet::from_json(l.at("levels")),
                                                   l.value("height", std::int64_t{0}), l.at("label").get<Label>()});
                } else {
                    auto f = column_rule_factories().find(kind);
                    require(f != column_rule_factories().end(), ErrorCode::InvalidSpec, "unknown layer kind '" + kind + "'");
                    p = p.with_layer(f->second(l, towers));
                }
            }
            if (j.contains("lump")) {
                p.lump_ = j.at("lump").get<std::vector<Label>>();
                p.a_ = j.at("label_count").get<std::size_t>();
            }
            return p;
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::InvalidSpec, e.what());
        }
    }

    static Partition from_json_document(const Json& doc) {
        TowerRegistry towers;
        for (const auto& t : doc.value("towers", Json::array())) {
            auto tower = KRTower::from_json(t);
            towers.emplace(tower->id(), tower);
        }
        return from_json(doc.at("partition"), towers);
    }

private:
    std::optional<Label> raw_label(const Point& x, TimeIndex t) const {
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
            if (const auto* lo = std::get_if<LevelOverride>(&it->v)) {
                auto loc = lo->tower->locate(x, t);
                if (!loc) return std::nullopt;
                if ((lo->height == 0 || loc->height == lo->height) && lo->levels.contains(loc->level)) return lo->label;
            } else {
                const auto& rule = std::get<ColumnRuleRef>(it->v);
                auto loc = rule->tower()->locate(x, t);
                if (!loc) return std::nullopt;
                auto out = rule->apply(x, t, *loc);
                if (out.kind == RuleOutcome::Kind::unresolved) return std::nullopt;
                if (out.kind == RuleOutcome::Kind::set) return out.label;
            }
        }
        return base_label(x, t);
    }

    std::size_t a_;
    Label default_;
    std::vector<Rule> rules_;
    std::vector<OverrideLayer> layers_;
    std::vector<Label> lump_;
};

inline Label label_at(const Partition& p, const Point& x, TimeIndex i) {
    auto l = p.try_label(x, i);
    require(l.has_value(), ErrorCode::Unresolved, "tower location exceeded its scan budget");
    return *l;
}

inline std::optional<NameWindow> try_name_window(const Partition& p, const Point& x, TimeIndex m, TimeIndex n) {
    require(m <= n, ErrorCode::InvalidConfig, "name_window requires m <= n");
    NameWindow w{m, {}};
    w.labels.reserve(static_cast<std::size_t>(n - m + 1));
    for (TimeIndex i = m; i <= n; ++i) {
        auto l = p.try_label(x, i);
        if (!l) return std::nullopt;
        w.labels.push_back(*l);
    }
    return w;
}

// Labels of T^i x for i in [m, n].
inline NameWindow name_window(const Partition& p, const Point& x, TimeIndex m, TimeIndex n) {
    auto w = try_name_window(p, x, m, n);
    require(w.has_value(), ErrorCode::Unresolved, "tower location exceeded its scan budget");
    return *w;
}

// Estimates produced from samples, with unresolved samples excluded and counted.
struct SampledEstimate {
    ProbEstimate estimate;
    std::size_t unresolved = 0;
    std::size_t attempted = 0;

    double unresolved_fraction() const noexcept {
        return attempted ? static_cast<double>(unresolved) / static_cast<double>(attempted) : 0.0;
    }
    Json to_json() const {
        Json j = estimate.to_json();
        j["unresolved"] = unresolved;
        return j;
    }
};

inline constexpr double kMaxUnresolvedFraction = 0.01;

inline void check_unresolved(std::size_t unresolved, std::size_t attempted, const std::string& what) {
    require(static_cast<double>(unresolved) <= kMaxUnresolvedFraction * static_cast<double>(attempted), ErrorCode::ScanBudget,
            what + ": " + std::to_string(unresolved) + " of " + std::to_string(attempted) + " samples unresolved");
}

namespace detail {

struct MismatchAcc {
    std::size_t n = 0, hits = 0, unresolved = 0;
    void merge(const MismatchAcc& o) { n += o.n, hits += o.hits, unresolved += o.unresolved; }
};

// Plug-in entropy in bits of a count table, optionally with the Miller-Madow term (K-1)/(2 N ln 2).
template <class Counts> double entropy_bits(const Counts& counts, std::size_t total, bool miller_madow) {
    if (total == 0) return 0.0;
    double h = 0.0;
    std::size_t support = 0;
    for (const auto& [k, c] : counts) {
        if (c == 0) continue;
        ++support;
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log2(p);
    }
    if (miller_madow && support > 0)
        h += static_cast<double>(support - 1) / (2.0 * static_cast<double>(total) * std::log(2.0));
    return h;
}

} // namespace detail

// Estimate of mu{x : P(x) != Q(x)}.
inline SampledEstimate partition_distance(const Partition& p, const Partition& q, const SystemSpec& spec,
                                          const SamplePlan& plan, const RngStream& rng) {
    require(p.label_count() == q.label_count(), ErrorCode::InvalidConfig, "partitions must have equal label counts");
    auto acc = sample_reduce<detail::MismatchAcc>(spec, plan, rng, [&](const Point& x, std::size_t, detail::MismatchAcc& s) {
        auto a = p.try_label(x);
        auto b = q.try_label(x);
        if (!a || !b) return ++s.unresolved, void();
        ++s.n;
        s.hits += *a != *b;
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "partition_distance");
    return {ProbEstimate::proportion(acc.hits, acc.n), acc.unresolved, acc.n + acc.unresolved};
}

namespace detail {

struct JointAcc {
    std::map<std::pair<Label, Label>, std::size_t> joint;
    std::size_t n = 0, unresolved = 0;
    void merge(const JointAcc& o) {
        for (const auto& [k, c] : o.joint) joint[k] += c;
        n += o.n, unresolved += o.unresolved;
    }
};

} // namespace detail

// Plug-in estimate (bits) of H(Q|P) + H(P|Q) = 2 H(P v Q) - H(P) - H(Q) at time 0.
// The interval uses the variance of the influence term -2 log p(P,Q) + log p(P) + log p(Q).
inline SampledEstimate rokhlin_metric(const Partition& p, const Partition& q, const SystemSpec& spec, const SamplePlan& plan,
                                      const RngStream& rng, bool miller_madow = true) {
    auto acc = sample_reduce<detail::JointAcc>(spec, plan, rng, [&](const Point& x, std::size_t, detail::JointAcc& s) {
        auto a = p.try_label(x);
        auto b = q.try_label(x);
        if (!a || !b) return ++s.unresolved, void();
        ++s.n;
        ++s.joint[{*a, *b}];
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "rokhlin_metric");
    std::map<Label, std::size_t> mp, mq;
    for (const auto& [k, c] : acc.joint) {
        mp[k.first] += c;
        mq[k.second] += c;
    }
    const double rho = 2.0 * detail::entropy_bits(acc.joint, acc.n, miller_madow) - detail::entropy_bits(mp, acc.n, miller_madow) -
                       detail::entropy_bits(mq, acc.n, miller_madow);
    double m1 = 0.0, m2 = 0.0;
    const double nd = static_cast<double>(acc.n);
    for (const auto& [k, c] : acc.joint) {
        const double w = static_cast<double>(c) / nd;
        const double psi = -2.0 * std::log2(w) + std::log2(static_cast<double>(mp[k.first]) / nd) +
                           std::log2(static_cast<double>(mq[k.second]) / nd);
        m1 += w * psi;
        m2 += w * psi * psi;
    }
    auto est = ProbEstimate::from_moments(std::max(rho, 0.0), m2 - m1 * m1, acc.n);
    return {est, acc.unresolved, acc.n + acc.unresolved};
}

} // namespace ergolab
