#pragma once

// Concrete samplable ergodic systems.
//
// A SystemSpec is one of: an irrational rotation of the circle, a Bernoulli shift, a
// stationary Markov shift, or the product of a rotation with a weakly mixing shift.
// A Point is a lazily evaluated orbit: rotation coordinates are computed on demand as
// frac(x + t*alpha); Bernoulli symbols are a pure function of (stream, t); Markov
// symbols are materialized outward from time 0, forward with the chain and backward
// with the time-reversed chain.
//
// Floating-point alpha is rational in principle. Orbit arithmetic uses a single fma per
// coordinate, so coordinates are exact to about |t| * 2^-52; experiments keep scan depths
// far below the range where this matters.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace ergolab {

using TimeIndex = std::int64_t;
using Symbol = std::uint8_t;
using Json = nlohmann::json;

// Path through Product nodes: 0 selects the left factor, 1 the right one.
using Component = std::vector<std::uint8_t>;

enum class Direction { forward, backward };

inline constexpr std::size_t kDefaultWindowCap = std::size_t{1} << 27;

class SystemSpec;

struct Rotation {
    double alpha = 0.0;
};

struct Bernoulli {
    std::vector<double> probs;
};

struct Markov {
    std::vector<std::vector<double>> matrix;
    std::vector<double> stationary;
};

struct Product {
    std::shared_ptr<const SystemSpec> left;
    std::shared_ptr<const SystemSpec> right;
};

namespace detail {

inline void check_probability_vector(const std::vector<double>& p, const std::string& what) {
    require(!p.empty(), ErrorCode::InvalidSpec, what + " is empty");
    require(p.size() <= 256, ErrorCode::InvalidSpec, what + " has more than 256 symbols");
    double sum = 0.0;
    for (double v : p) {
        require(std::isfinite(v) && v >= 0.0, ErrorCode::InvalidSpec, what + " has a negative entry");
        sum += v;
    }
    require(std::abs(sum - 1.0) <= 1e-12, ErrorCode::InvalidSpec, what + " does not sum to 1");
}

// Stationary vector by power iteration on the lazy chain (M + I) / 2.
inline std::vector<double> stationary_vector(const std::vector<std::vector<double>>& m) {
    const std::size_t a = m.size();
    std::vector<double> pi(a, 1.0 / static_cast<double>(a)), next(a);
    for (int iter = 0; iter < 200000; ++iter) {
        std::fill(next.begin(), next.end(), 0.0);
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < a; ++j) next[j] += pi[i] * m[i][j];
        double diff = 0.0, sum = 0.0;
        for (std::size_t j = 0; j < a; ++j) {
            next[j] = 0.5 * (next[j] + pi[j]);
            sum += next[j];
        }
        for (std::size_t j = 0; j < a; ++j) {
            next[j] /= sum;
            diff = std::max(diff, std::abs(next[j] - pi[j]));
        }
        pi.swap(next);
        if (diff < 1e-16) break;
    }
    return pi;
}

// Irreducible and aperiodic: some power below the Wielandt bound is strictly positive.
inline bool is_primitive(const std::vector<std::vector<double>>& m) {
    const std::size_t a = m.size();
    std::vector<std::vector<char>> reach(a, std::vector<char>(a)), next(a, std::vector<char>(a));
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < a; ++j) reach[i][j] = m[i][j] > 0.0;
    const std::size_t bound = (a - 1) * (a - 1) + 1;
    for (std::size_t k = 1; k <= bound; ++k) {
        bool all = true;
        for (auto& row : reach)
            for (char c : row) all = all && c;
        if (all) return true;
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < a; ++j) {
                char v = 0;
                for (std::size_t l = 0; l < a && !v; ++l) v = reach[i][l] && m[l][j] > 0.0;
                next[i][j] = v;
            }
        reach.swap(next);
    }
    return false;
}

} // namespace detail

class SystemSpec {
public:
    using Variant = std::variant<Rotation, Bernoulli, Markov, Product>;

    static SystemSpec rotation(double alpha) {
        require(std::isfinite(alpha) && alpha > 0.0 && alpha < 1.0, ErrorCode::InvalidSpec,
                "rotation alpha must lie in (0,1)");
        return SystemSpec(Rotation{alpha});
    }

    static SystemSpec bernoulli(std::vector<double> probs) {
        detail::check_probability_vector(probs, "bernoulli probs");
        return SystemSpec(Bernoulli{std::move(probs)});
    }

    // An empty stationary vector is computed from the matrix.
    static SystemSpec markov(std::vector<std::vector<double>> matrix, std::vector<double> stationary = {}) {
        require(!matrix.empty(), ErrorCode::InvalidSpec, "markov matrix is empty");
        for (const auto& row : matrix) {
            require(row.size() == matrix.size(), ErrorCode::InvalidSpec, "markov matrix is not square");
            detail::check_probability_vector(row, "markov matrix row");
        }
        if (stationary.empty()) stationary = detail::stationary_vector(matrix);
        require(stationary.size() == matrix.size(), ErrorCode::InvalidSpec, "stationary vector has wrong length");
        detail::check_probability_vector(stationary, "markov stationary vector");
        for (std::size_t j = 0; j < matrix.size(); ++j) {
            double v = 0.0;
            for (std::size_t i = 0; i < matrix.size(); ++i) v += stationary[i] * matrix[i][j];
            require(std::abs(v - stationary[j]) <= 1e-10, ErrorCode::InvalidSpec,
                    "stationary vector is not invariant under the matrix");
        }
        for (double p : stationary)
            require(p > 0.0, ErrorCode::InvalidSpec, "markov chain must be irreducible (stationary mass > 0)");
        return SystemSpec(Markov{std::move(matrix), std::move(stationary)});
    }

    // Only rotation x weakly-mixing-shift products are accepted (either order); these
    // are ergodic. Everything else is rejected rather than checked.
    static SystemSpec product(const SystemSpec& left, const SystemSpec& right) {
        const bool ok = (left.is_zero_entropy_ergodic() && right.is_weakly_mixing()) ||
                        (left.is_weakly_mixing() && right.is_zero_entropy_ergodic());
        require(ok, ErrorCode::InvalidSpec,
                "product must pair a rotation with a weakly mixing shift (Bernoulli or primitive Markov)");
        return SystemSpec(Product{std::make_shared<const SystemSpec>(left), std::make_shared<const SystemSpec>(right)});
    }

    const Variant& variant() const noexcept { return v_; }
    template <class T> bool is() const noexcept { return std::holds_alternative<T>(v_); }
    template <class T> const T& as() const { return std::get<T>(v_); }

    bool is_shift() const noexcept { return is<Bernoulli>() || is<Markov>(); }
    bool is_zero_entropy_ergodic() const noexcept { return is<Rotation>(); }
    bool is_weakly_mixing() const {
        if (is<Bernoulli>()) return true;
        if (is<Markov>()) return detail::is_primitive(as<Markov>().matrix);
        return false;
    }

    std::size_t alphabet() const {
        if (is<Bernoulli>()) return as<Bernoulli>().probs.size();
        if (is<Markov>()) return as<Markov>().matrix.size();
        throw Error(ErrorCode::InvalidSpec, "alphabet requested on a non-shift system");
    }

    const SystemSpec& component(const Component& path) const {
        const SystemSpec* s = this;
        for (auto step : path) {
            require(s->is<Product>(), ErrorCode::InvalidSpec, "component path descends into a non-product system");
            const auto& p = s->as<Product>();
            s = step == 0 ? p.left.get() : p.right.get();
        }
        return *s;
    }

    Json to_json() const {
        return std::visit(
            [](const auto& v) -> Json {
                using T = std::decay_t<decltype(v)>;
                if constexpr (std::is_same_v<T, Rotation>) {
                    return Json{{"kind", "rotation"}, {"alpha", v.alpha}};
                } else if constexpr (std::is_same_v<T, Bernoulli>) {
                    return Json{{"kind", "bernoulli"}, {"probs", v.probs}};
                } else if constexpr (std::is_same_v<T, Markov>) {
                    return Json{{"kind", "markov"}, {"matrix", v.matrix}, {"stationary", v.stationary}};
                } else {
                    return Json{{"kind", "product"}, {"left", v.left->to_json()}, {"right", v.right->to_json()}};
                }
            },
            v_);
    }

    static SystemSpec from_json(const Json& j) {
        require(j.is_object() && j.contains("kind"), ErrorCode::InvalidSpec, "system must be an object with a kind");
        const auto kind = j.at("kind").get<std::string>();
        auto only = [&](std::initializer_list<const char*> keys) {
            for (const auto& [k, _] : j.items()) {
                bool known = k == "kind";
                for (const char* key : keys) known = known || k == key;
                require(known, ErrorCode::InvalidSpec, "unknown field '" + k + "' in " + kind + " system");
            }
        };
        try {
            if (kind == "rotation") {
                only({"alpha"});
                return rotation(j.at("alpha").get<double>());
            }
            if (kind == "bernoulli") {
                only({"probs"});
                return bernoulli(j.at("probs").get<std::vector<double>>());
            }
            if (kind == "markov") {
                only({"matrix", "stationary"});
                return markov(j.at("matrix").get<std::vector<std::vector<double>>>(),
                              j.value("stationary", std::vector<double>{}));
            }
            if (kind == "product") {
                only({"left", "right"});
                return product(from_json(j.at("left")), from_json(j.at("right")));
            }
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::InvalidSpec, e.what());
        }
        throw Error(ErrorCode::InvalidSpec, "unknown system kind '" + kind + "'");
    }

    friend bool operator==(const SystemSpec& a, const SystemSpec& b) { return a.to_json() == b.to_json(); }

private:
    explicit SystemSpec(Variant v) : v_(std::move(v)) {}
    Variant v_;
};

namespace detail {

inline std::uint64_t zigzag(TimeIndex t) noexcept {
    return t >= 0 ? static_cast<std::uint64_t>(t) << 1 : (static_cast<std::uint64_t>(-(t + 1)) << 1) | 1u;
}

inline Symbol inverse_cdf(const std::vector<double>& cdf, double u) noexcept {
    auto it = std::upper_bound(cdf.begin(), cdf.end() - 1, u);
    return static_cast<Symbol>(it - cdf.begin());
}

inline std::vector<double> cumulative(const std::vector<double>& p) {
    std::vector<double> c(p.size());
    std::partial_sum(p.begin(), p.end(), c.begin());
    c.back() = 1.0;
    return c;
}

inline double frac(double v) noexcept { return v - std::floor(v); }

struct RotationOrbit {
    double alpha;
    double x;
    double coordinate(TimeIndex t) const noexcept {
        double v = frac(std::fma(static_cast<double>(t), alpha, x));
        return v >= 1.0 ? 0.0 : v;
    }
};

struct BernoulliOrbit {
    std::uint64_t key;
    std::vector<double> cdf;
    bool fair_binary;

    // 64 fair bits for the aligned block of times [64c, 64c+64).
    std::uint64_t block(std::int64_t c) const noexcept {
        return mix64(key + static_cast<std::uint64_t>(c) * kGolden);
    }
    Symbol symbol(TimeIndex t) const noexcept {
        if (fair_binary) return static_cast<Symbol>((block(t >> 6) >> (t & 63)) & 1u);
        return inverse_cdf(cdf, to_unit(mix64(key ^ mix64(zigzag(t) + kGolden))));
    }
};

struct MarkovOrbit {
    std::uint64_t key;
    std::vector<double> initial_cdf;
    std::vector<std::vector<double>> forward_cdf;
    std::vector<std::vector<double>> backward_cdf;
    std::vector<Symbol> fwd; // times 0, 1, 2, ...
    std::vector<Symbol> bwd; // times -1, -2, ...
    std::size_t cap;

    double u(TimeIndex t) const noexcept { return to_unit(mix64(key ^ mix64(zigzag(t) + kGolden))); }

    void materialize(TimeIndex lo, TimeIndex hi) {
        const std::size_t need_fwd = hi >= 0 ? static_cast<std::size_t>(hi) + 1 : 0;
        const std::size_t need_bwd = lo < 0 ? static_cast<std::size_t>(-lo) : 0;
        require(std::max(need_fwd, fwd.size()) + std::max(need_bwd, bwd.size()) <= cap, ErrorCode::WindowTooLarge,
                "markov window exceeds the configured memory cap");
        if (fwd.empty() && (need_fwd > 0 || need_bwd > 0)) fwd.push_back(inverse_cdf(initial_cdf, u(0)));
        while (fwd.size() < need_fwd) {
            const auto t = static_cast<TimeIndex>(fwd.size());
            fwd.push_back(inverse_cdf(forward_cdf[fwd.back()], u(t)));
        }
        while (bwd.size() < need_bwd) {
            const Symbol prev = bwd.empty() ? fwd.front() : bwd.back();
            const auto t = -static_cast<TimeIndex>(bwd.size()) - 1;
            bwd.push_back(inverse_cdf(backward_cdf[prev], u(t)));
        }
    }

    Symbol symbol(TimeIndex t) {
        if (t >= 0) {
            if (static_cast<std::size_t>(t) >= fwd.size()) materialize(t, t);
            return fwd[static_cast<std::size_t>(t)];
        }
        const auto i = static_cast<std::size_t>(-(t + 1));
        if (i >= bwd.size()) materialize(t, t);
        return bwd[i];
    }
};

struct OrbitNode;

struct ProductOrbit {
    std::unique_ptr<OrbitNode> left;
    std::unique_ptr<OrbitNode> right;
};

struct OrbitNode {
    std::variant<RotationOrbit, BernoulliOrbit, MarkovOrbit, ProductOrbit> v;
};

// Consecutive entry times of an orbit into a fixed set: no entry lies strictly between
// neighbouring elements.
struct EntryCache {
    std::deque<TimeIndex> visits;
};

struct ColumnKey {
    const void* owner;
    TimeIndex start;
    friend bool operator==(const ColumnKey&, const ColumnKey&) = default;
};

struct ColumnKeyHash {
    std::size_t operator()(const ColumnKey& k) const noexcept {
        return static_cast<std::size_t>(mix64(reinterpret_cast<std::uintptr_t>(k.owner) ^ mix64(static_cast<std::uint64_t>(k.start))));
    }
};

struct OrbitState {
    SystemSpec spec;
    RngStream stream;
    OrbitNode root;
    std::size_t window_cap = kDefaultWindowCap;
    std::map<std::uint64_t, EntryCache> entries;                              // keyed by tower id
    std::unordered_map<ColumnKey, std::int64_t, ColumnKeyHash> column_memo;   // per-column derived values
};

inline OrbitNode make_node(const SystemSpec& spec, const RngStream& rng, std::size_t cap) {
    return std::visit(
        [&](const auto& s) -> OrbitNode {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Rotation>) {
                return OrbitNode{RotationOrbit{s.alpha, rng.uniform(0)}};
            } else if constexpr (std::is_same_v<T, Bernoulli>) {
                const bool fair = s.probs.size() == 2 && s.probs[0] == 0.5 && s.probs[1] == 0.5;
                return OrbitNode{BernoulliOrbit{rng.key(), cumulative(s.probs), fair}};
            } else if constexpr (std::is_same_v<T, Markov>) {
                const std::size_t a = s.matrix.size();
                MarkovOrbit m{rng.key(), cumulative(s.stationary), {}, {}, {}, {}, cap};
                for (std::size_t i = 0; i < a; ++i) m.forward_cdf.push_back(cumulative(s.matrix[i]));
                for (std::size_t j = 0; j < a; ++j) {
                    std::vector<double> rev(a);
                    for (std::size_t i = 0; i < a; ++i) rev[i] = s.stationary[i] * s.matrix[i][j] / s.stationary[j];
                    const double sum = std::accumulate(rev.begin(), rev.end(), 0.0);
                    for (double& v : rev) v /= sum;
                    m.backward_cdf.push_back(cumulative(rev));
                }
                return OrbitNode{std::move(m)};
            } else {
                return OrbitNode{ProductOrbit{std::make_unique<OrbitNode>(make_node(*s.left, rng.child(0), cap)),
                                              std::make_unique<OrbitNode>(make_node(*s.right, rng.child(1), cap))}};
            }
        },
        spec.variant());
}

} // namespace detail

// A sampled point x together with a time origin: Point p represents T^{p.origin()} x.
// Copies and shifted views share the lazily materialized orbit, so a Point must not be
// used from two threads at once; independent points are independent values.
class Point {
public:
    Point(std::shared_ptr<detail::OrbitState> state, TimeIndex origin) : state_(std::move(state)), origin_(origin) {}

    const SystemSpec& spec() const noexcept { return state_->spec; }
    TimeIndex origin() const noexcept { return origin_; }
    const RngStream& stream() const noexcept { return state_->stream; }
    Point shifted(TimeIndex dt) const { return Point(state_, origin_ + dt); }

    double coordinate(TimeIndex t, const Component& c = {}) const {
        const auto& n = node(c);
        require(std::holds_alternative<detail::RotationOrbit>(n.v), ErrorCode::InvalidSpec,
                "coordinate requested on a non-rotation component");
        return std::get<detail::RotationOrbit>(n.v).coordinate(origin_ + t);
    }

    Symbol symbol(TimeIndex t, const Component& c = {}) const {
        auto& n = node(c);
        if (auto* b = std::get_if<detail::BernoulliOrbit>(&n.v)) return b->symbol(origin_ + t);
        if (auto* m = std::get_if<detail::MarkovOrbit>(&n.v)) return m->symbol(origin_ + t);
        throw Error(ErrorCode::InvalidSpec, "symbol requested on a non-shift component");
    }

    detail::OrbitNode& node(const Component& c) const {
        detail::OrbitNode* n = &state_->root;
        for (auto step : c) {
            auto* p = std::get_if<detail::ProductOrbit>(&n->v);
            require(p != nullptr, ErrorCode::InvalidSpec, "component path descends into a non-product point");
            n = step == 0 ? p->left.get() : p->right.get();
        }
        return *n;
    }

    detail::OrbitState& state() const noexcept { return *state_; }

private:
    std::shared_ptr<detail::OrbitState> state_;
    TimeIndex origin_;
};

inline Point sample_point(const SystemSpec& spec, const RngStream& rng, std::size_t window_cap = kDefaultWindowCap) {
    auto st = std::make_shared<detail::OrbitState>(detail::OrbitState{spec, rng, detail::make_node(spec, rng, window_cap), window_cap, {}, {}});
    return Point(std::move(st), 0);
}

// Materializes coordinates on [lo, hi] (relative to the point's origin). Idempotent.
inline Point orbit_window(const Point& p, TimeIndex lo, TimeIndex hi) {
    require(lo <= hi, ErrorCode::InvalidConfig, "orbit_window requires lo <= hi");
    require(static_cast<std::uint64_t>(hi - lo) < p.state().window_cap, ErrorCode::WindowTooLarge,
            "requested window exceeds the configured memory cap");
    std::function<void(detail::OrbitNode&)> walk = [&](detail::OrbitNode& n) {
        if (auto* m = std::get_if<detail::MarkovOrbit>(&n.v)) m->materialize(p.origin() + lo, p.origin() + hi);
        if (auto* pr = std::get_if<detail::ProductOrbit>(&n.v)) {
            walk(*pr->left);
            walk(*pr->right);
        }
    };
    walk(p.state().root);
    return p;
}

// Bit-parallel search for a word in a fair-coin orbit. Finds the smallest k in
// [1, budget] such that the word occurs starting at time from + offset +/- k.
inline std::optional<TimeIndex> fair_word_search(const detail::BernoulliOrbit& orbit, const std::vector<Symbol>& word,
                                                 TimeIndex offset, TimeIndex from, Direction dir, std::int64_t budget) {
    const std::size_t len = word.size();
    if (len == 0 || len > 64 || budget < 1) return std::nullopt;
    const TimeIndex lo = dir == Direction::forward ? from + offset + 1 : from + offset - budget;
    const TimeIndex hi = dir == Direction::forward ? from + offset + budget : from + offset - 1;
    // A run of 15 or more equal symbols in the word covers a whole aligned byte, so a
    // pair of blocks without a constant byte of that symbol cannot host a match.
    std::size_t run = 0, longest = 0;
    Symbol run_sym = 0;
    for (std::size_t j = 0; j < len; ++j) {
        run = j > 0 && word[j] == word[j - 1] ? run + 1 : 1;
        if (run > longest) longest = run, run_sym = word[j];
    }
    const bool prefilter = longest >= 15;
    const auto const_byte = [&](std::uint64_t v) {
        if (run_sym) v = ~v;
        return ((v - 0x0101010101010101ULL) & ~v & 0x8080808080808080ULL) != 0;
    };
    auto matches = [&](std::int64_t c, std::uint64_t w0, std::uint64_t w1) {
        if (prefilter && !const_byte(w0) && !const_byte(w1)) return std::uint64_t{0};
        std::uint64_t m = ~std::uint64_t{0};
        for (std::size_t j = 0; j < len && m; ++j) {
            const std::uint64_t s = j == 0 ? w0 : (w0 >> j) | (w1 << (64 - j));
            m &= word[j] ? s : ~s;
        }
        const TimeIndex base = c * 64;
        if (lo > base) m &= lo - base >= 64 ? 0 : ~std::uint64_t{0} << (lo - base);
        if (hi < base + 63) m &= hi < base ? 0 : ~std::uint64_t{0} >> (63 - (hi - base));
        return m;
    };
    if (dir == Direction::forward) {
        std::uint64_t w0 = orbit.block(lo >> 6);
        for (std::int64_t c = lo >> 6; c <= (hi >> 6); ++c) {
            const std::uint64_t w1 = orbit.block(c + 1);
            if (auto m = matches(c, w0, w1)) return c * 64 + std::countr_zero(m) - offset - from;
            w0 = w1;
        }
    } else {
        std::uint64_t w1 = orbit.block((hi >> 6) + 1);
        for (std::int64_t c = hi >> 6; c >= (lo >> 6); --c) {
            const std::uint64_t w0 = orbit.block(c);
            if (auto m = matches(c, w0, w1)) return from - (c * 64 + 63 - std::countl_zero(m) - offset);
            w1 = w0;
        }
    }
    return std::nullopt;
}

// Baby-step giant-step index for entry times of a rotation orbit into an interval.
// Candidate times found through the index are confirmed with the canonical coordinate
// formula, so results agree exactly with direct stepping.
class RotationEntryIndex {
public:
    RotationEntryIndex(double alpha, std::int64_t baby) : alpha_(alpha), baby_(std::max<std::int64_t>(baby, 1)) {
        table_.reserve(static_cast<std::size_t>(baby_));
        const detail::RotationOrbit zero{alpha, 0.0};
        for (std::int64_t j = 0; j < baby_; ++j) table_.push_back({zero.coordinate(j), j});
        std::sort(table_.begin(), table_.end());
    }

    double alpha() const noexcept { return alpha_; }

    // Smallest k in [1, budget] with coordinate(from +/- k) in [lo, hi) (wrapping if lo > hi).
    std::optional<std::int64_t> search(const detail::RotationOrbit& orbit, double lo, double hi, TimeIndex from,
                                       Direction dir, std::int64_t budget) const {
        const double width = lo <= hi ? hi - lo : 1.0 - lo + hi;
        auto inside = [&](double v) { return lo <= hi ? (v >= lo && v < hi) : (v >= lo || v < hi); };
        const int sgn = dir == Direction::forward ? 1 : -1;
        if (width * static_cast<double>(baby_) > 8.0 || budget <= 2 * baby_) {
            for (std::int64_t k = 1; k <= budget; ++k)
                if (inside(orbit.coordinate(from + sgn * k))) return k;
            return std::nullopt;
        }
        for (std::int64_t g = 0; 1 + g * baby_ <= budget; ++g) {
            const std::int64_t k0 = 1 + g * baby_;
            const TimeIndex t0 = from + sgn * k0;
            const double y = orbit.coordinate(t0);
            const double tol = 1e-12 + 8.0 * (static_cast<double>(std::abs(t0)) + static_cast<double>(baby_)) * 0x1.0p-52;
            // Forward: y + frac(j alpha) in I. Backward: y - frac(j alpha) in I.
            double a, b;
            if (dir == Direction::forward) {
                a = detail::frac(lo - y - tol);
                b = a + width + 2 * tol;
            } else {
                a = detail::frac(y - hi - tol);
                b = a + width + 2 * tol;
            }
            std::optional<std::int64_t> best;
            auto scan = [&](double from_v, double to_v) {
                auto it = std::lower_bound(table_.begin(), table_.end(), std::pair<double, std::int64_t>{from_v, -1});
                for (; it != table_.end() && it->first <= to_v; ++it) {
                    const std::int64_t k = k0 + it->second;
                    if (k > budget || (best && k >= *best)) continue;
                    if (inside(orbit.coordinate(from + sgn * k))) best = k;
                }
            };
            scan(a, std::min(b, 1.0));
            if (b > 1.0) scan(0.0, b - 1.0);
            if (best) return best;
        }
        return std::nullopt;
    }

private:
    double alpha_;
    std::int64_t baby_;
    std::vector<std::pair<double, std::int64_t>> table_;
};

} // namespace ergolab
