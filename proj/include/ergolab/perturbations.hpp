#pragma once

// Partition perturbations built on Kakutani-Rokhlin towers:
//   rosenblatt_breaker  plants a marker 0^N 1 0^N at the bottom of every column of a
//                       (B, 3N^2) tower and forces a 1 every N/2 levels above it;
//   encode_factor       writes a codeword for each column's Q-name into P under a header
//                       that tells the two column heights apart;
//   generator_relabel   replaces the first levels of each column by a codeword from
//                       a cross-bifix-free family.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "error.hpp"
#include "estimators.hpp"
#include "montecarlo.hpp"
#include "partitions.hpp"
#include "query.hpp"
#include "systems.hpp"
#include "towers.hpp"

namespace ergolab {

// ---------------------------------------------------------------------------------------
// Markers

// Positions (indices into w.labels) of the central 1 of every occurrence of 0^N 1 0^N.
inline std::vector<std::size_t> marker_scan(const NameWindow& w, std::size_t N) {
    std::vector<std::size_t> out;
    const auto& s = w.labels;
    if (N == 0 || s.size() < 2 * N + 1) return out;
    // zeros_before[i] = length of the run of zeros ending just before i.
    std::vector<std::size_t> zeros_before(s.size() + 1, 0);
    for (std::size_t i = 0; i < s.size(); ++i) zeros_before[i + 1] = s[i] == 0 ? zeros_before[i] + 1 : 0;
    std::size_t zeros_after = 0; // run of zeros starting at i + 1
    for (std::size_t i = s.size(); i-- > 0;) {
        if (s[i] == 1 && zeros_before[i] >= N && zeros_after >= N) out.push_back(i);
        zeros_after = s[i] == 0 ? zeros_after + 1 : 0;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

// Length of the run of zeros immediately after index i.
inline std::size_t zero_run_after(const std::vector<Label>& s, std::size_t i) {
    std::size_t r = 0;
    while (i + 1 + r < s.size() && s[i + 1 + r] == 0) ++r;
    return r;
}

// ---------------------------------------------------------------------------------------
// Rosenblatt-mixing breaker

struct WitnessPair {
    SetQuery C;
    SetQuery D;
    std::int64_t k = 0; // N^2
    std::int64_t n = 0;
    std::int64_t N = 0;

    Json to_json() const { return Json{{"C", C.to_json()}, {"D", D.to_json()}, {"k", k}, {"n", n}, {"N", N}}; }
};

// Smallest even N with N > n and 1/N < eps/10.
inline std::int64_t rosenblatt_block(std::int64_t n, double eps) {
    require(n >= 1, ErrorCode::InvalidConfig, "n must be positive");
    require(eps > 0.0 && eps <= 1.0, ErrorCode::InvalidConfig, "epsilon must lie in (0, 1]");
    std::int64_t N = n + 1;
    while (N % 2 != 0 || !(1.0 / static_cast<double>(N) < eps / 10.0)) ++N;
    return N;
}

struct RosenblattResult {
    Partition Q;
    KRTowerRef tower;
    WitnessPair witness;
    std::int64_t N = 0;
    std::int64_t height = 0; // tower height parameter 3N^2
};

// Level patterns of the breaker: zeros on [0, N) and (N, 2N], ones at N and at k N/2 for k > 4.
inline std::pair<LevelSet, LevelSet> rosenblatt_levels(std::int64_t N) {
    LevelSet zeros, ones;
    zeros.ranges = {{0, N - 1}, {N + 1, 2 * N}};
    ones.ranges = {{N, N}};
    ones.progressions = {{5 * (N / 2), N / 2, -1}};
    return {zeros, ones};
}

inline RosenblattResult rosenblatt_breaker(const Partition& P, const SystemSpec& spec, std::int64_t n, double eps,
                                           const RngStream& rng, const TowerBuildOptions& opts = {}) {
    require(P.label_count() == 2, ErrorCode::InvalidConfig, "rosenblatt_breaker needs a binary partition");
    const std::int64_t N = rosenblatt_block(n, eps);
    const std::int64_t H = 3 * N * N;
    auto tower = build_tower(spec, default_base(spec, H), H, 0, rng.child(1), opts);
    auto [zeros, ones] = rosenblatt_levels(N);
    auto Q = P.with_layer(LevelOverride{tower, zeros, 0, 0}).with_layer(LevelOverride{tower, ones, 0, 1});
    LevelSet c_levels, d_times;
    c_levels.ranges = {{2 * N + 1, N * N}};
    d_times.ranges = {{n + 2 * N, n + 2 * N + N * N - 1}};
    WitnessPair w{SetQuery::tower_levels(tower, c_levels), SetQuery::tower_levels(tower, d_times, true), N * N, n, N};
    return {std::move(Q), tower, std::move(w), N, H};
}

struct WitnessReport {
    ProbEstimate muC, muD, muCD;
    double gap = 0.0;
    std::size_t samples = 0;
    std::size_t unresolved = 0;
    std::size_t name_agree = 0;    // name-based C membership equals the tower-based one
    std::size_t name_checked = 0;

    double name_agreement() const noexcept {
        return name_checked ? static_cast<double>(name_agree) / static_cast<double>(name_checked) : 1.0;
    }
    Json to_json() const {
        return Json{{"muC", muC.to_json()},         {"muD", muD.to_json()},     {"muCD", muCD.to_json()},
                    {"gap", gap},                   {"samples", samples},       {"unresolved", unresolved},
                    {"name_agreement", name_agreement()}, {"name_checked", name_checked}};
    }
};

namespace detail {

struct WitnessAcc {
    std::size_t n = 0, c = 0, d = 0, cd = 0, unresolved = 0, agree = 0, checked = 0;
    void merge(const WitnessAcc& o) {
        n += o.n, c += o.c, d += o.d, cd += o.cd, unresolved += o.unresolved, agree += o.agree, checked += o.checked;
    }
};

} // namespace detail

// Membership in C read off the Q-name on [-N^2, 0]: a marker centred in [N - N^2, -N).
inline bool c_from_name(const NameWindow& w, std::int64_t N) {
    for (auto pos : marker_scan(w, static_cast<std::size_t>(N))) {
        const TimeIndex c = w.offset + static_cast<TimeIndex>(pos);
        if (c >= N - N * N && c < -N) return true;
    }
    return false;
}

inline WitnessReport evaluate_witness(const Partition& Q, const SystemSpec& spec, const WitnessPair& witness, const KRTower& tower,
                                      const SamplePlan& plan, const RngStream& rng) {
    (void)tower; // the witness queries carry the tower
    const std::int64_t N = witness.N;
    auto acc = sample_reduce<detail::WitnessAcc>(spec, plan, rng, [&](const Point& x, std::size_t, detail::WitnessAcc& s) {
        auto c = witness.C.contains(x);
        auto d = c ? witness.D.contains(x) : std::nullopt;
        if (!d) return ++s.unresolved, void();
        ++s.n;
        s.c += *c, s.d += *d, s.cd += *c && *d;
        if (auto w = try_name_window(Q, x, -witness.k, 0)) {
            ++s.checked;
            s.agree += c_from_name(*w, N) == *c;
        }
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "evaluate_witness");
    WitnessReport r;
    r.muC = ProbEstimate::proportion(acc.c, acc.n);
    r.muD = ProbEstimate::proportion(acc.d, acc.n);
    r.muCD = ProbEstimate::proportion(acc.cd, acc.n);
    r.gap = std::abs(r.muCD.mean - r.muC.mean * r.muD.mean);
    r.samples = acc.n;
    r.unresolved = acc.unresolved;
    r.name_agree = acc.agree;
    r.name_checked = acc.checked;
    return r;
}

inline WitnessReport evaluate_witness(const Partition& Q, const SystemSpec& spec, const WitnessPair& witness, const KRTower& tower,
                                      std::size_t n_samples, const RngStream& rng) {
    return evaluate_witness(Q, spec, witness, tower, SamplePlan::independent(n_samples), rng);
}

// ---------------------------------------------------------------------------------------
// Codeword allocation

struct AllocatorOptions {
    Word prefix;                                 // every candidate starts with this
    std::function<bool(const Word&)> accept;     // optional extra filter
};

// The lexicographically first m words of length L over [0, a) outside `forbidden`.
inline std::vector<Word> codeword_allocator(const std::set<Word>& forbidden, std::size_t a, std::size_t L, std::size_t m,
                                            const AllocatorOptions& opts = {}) {
    require(a >= 2 && a <= 256, ErrorCode::InvalidConfig, "alphabet size must lie in [2, 256]");
    require(opts.prefix.size() <= L, ErrorCode::InvalidConfig, "codeword prefix longer than the codeword");
    const std::size_t free_len = L - opts.prefix.size();
    const double pool = std::pow(static_cast<double>(a), static_cast<double>(free_len));
    std::size_t clash = 0;
    for (const auto& f : forbidden) clash += f.size() == L && f.compare(0, opts.prefix.size(), opts.prefix) == 0;
    require(pool - static_cast<double>(clash) >= static_cast<double>(m), ErrorCode::InsufficientCodewords,
            "not enough free words of length " + std::to_string(L) + " for " + std::to_string(m) + " codewords");
    std::vector<Word> out;
    if (m == 0) return out;
    const auto advance = [&](Word& w) { // base-a increment of the free part; false on wrap-around
        for (std::size_t i = L; i-- > opts.prefix.size();) {
            if (static_cast<unsigned char>(w[i]) + 1u < a) {
                ++w[i];
                return true;
            }
            w[i] = '\0';
        }
        return false;
    };
    Word w = opts.prefix + Word(free_len, '\0');
    do {
        if (!forbidden.count(w) && (!opts.accept || opts.accept(w))) {
            out.push_back(w);
            if (out.size() == m) return out;
        }
    } while (advance(w));
    throw Error(ErrorCode::InsufficientCodewords,
                "candidate family exhausted after " + std::to_string(out.size()) + " of " + std::to_string(m) + " codewords");
}

// ---------------------------------------------------------------------------------------
// Factor-name encoding

// Smallest even N with 1/N < eps/10.
inline std::int64_t encode_block(double eps) {
    require(eps > 0.0 && eps <= 1.0, ErrorCode::InvalidConfig, "epsilon must lie in (0, 1]");
    std::int64_t N = 2;
    while (!(1.0 / static_cast<double>(N) < eps / 10.0)) N += 2;
    return N;
}

// Column layout and the map from observed column Q-names to L-bit codewords. Columns of
// height n carry the header 0^N 1 0^N, columns of height n+1 carry 0^{2N} 1 0^{2N}; above
// the header every (N/2)-th level is a forced 1 and the first L remaining levels hold the
// codeword, most significant bit first. The all-ones word is reserved for unseen names.
struct Codebook {
    std::int64_t n = 0;
    std::int64_t N = 0;
    std::size_t L = 0;
    std::map<Word, std::uint64_t> code;
    std::vector<Word> names; // indexed by codeword

    std::uint64_t reserved() const noexcept { return (std::uint64_t{1} << L) - 1; }
    std::int64_t header_half(std::int64_t height) const noexcept { return height == n ? N : 2 * N; }
    std::int64_t header_end(std::int64_t height) const noexcept { return 2 * header_half(height); }

    bool forced(std::int64_t level, std::int64_t height) const noexcept {
        const std::int64_t rel = level - header_end(height);
        return rel > 0 && rel % (N / 2) == 0;
    }
    // Index of `level` among the free levels above the header, or -1.
    std::int64_t free_index(std::int64_t level, std::int64_t height) const noexcept {
        const std::int64_t rel = level - header_end(height);
        if (rel <= 0 || rel % (N / 2) == 0) return -1;
        return rel - 1 - (rel - 1) / (N / 2);
    }
    std::vector<std::int64_t> code_levels(std::int64_t height) const {
        std::vector<std::int64_t> out;
        for (std::int64_t lev = header_end(height) + 1; out.size() < L; ++lev)
            if (!forced(lev, height)) out.push_back(lev);
        return out;
    }
    std::uint64_t codeword_of(const Word& name) const {
        auto it = code.find(name);
        return it == code.end() ? reserved() : it->second;
    }

    Json to_json() const {
        Json ns = Json::array();
        for (const auto& w : names) ns.push_back(word_digits(w));
        return Json{{"n", n}, {"N", N}, {"L", L}, {"names", ns}};
    }
    static Codebook from_json(const Json& j) {
        Codebook cb;
        cb.n = j.at("n").get<std::int64_t>();
        cb.N = j.at("N").get<std::int64_t>();
        cb.L = j.at("L").get<std::size_t>();
        for (const auto& d : j.at("names")) {
            Word w = word_from_digits(d.get<std::string>());
            cb.code.emplace(w, cb.names.size());
            cb.names.push_back(std::move(w));
        }
        require(cb.L >= 1 && cb.L < 64 && cb.names.size() <= cb.reserved(), ErrorCode::InvalidSpec, "codebook overflows its codeword length");
        return cb;
    }
};

using CodebookRef = std::shared_ptr<const Codebook>;

// Overrides P inside each column with the header, forced ones and codeword bits.
class FactorCodeRule final : public ColumnRule {
public:
    FactorCodeRule(KRTowerRef tower, Partition q, CodebookRef codebook)
        : tower_(std::move(tower)), q_(std::move(q)), cb_(std::move(codebook)) {}

    TowerRef tower() const override { return tower_; }
    const Codebook& codebook() const noexcept { return *cb_; }
    const Partition& factor() const noexcept { return q_; }

    RuleOutcome apply(const Point& x, TimeIndex t, const Location& loc) const override {
        const std::int64_t h = loc.height, lev = loc.level;
        const std::int64_t half = cb_->header_half(h);
        if (lev <= 2 * half) return RuleOutcome::set(lev == half ? 1 : 0);
        if (cb_->forced(lev, h)) return RuleOutcome::set(1);
        const std::int64_t f = cb_->free_index(lev, h);
        if (f < 0 || f >= static_cast<std::int64_t>(cb_->L)) return RuleOutcome::keep();
        auto cw = codeword(x, t, loc);
        if (!cw) return RuleOutcome::unresolved();
        return RuleOutcome::set(static_cast<Label>((*cw >> (cb_->L - 1 - static_cast<std::size_t>(f))) & 1u));
    }

    // Codeword of the column containing T^t x (memoized per column).
    std::optional<std::uint64_t> codeword(const Point& x, TimeIndex t, const Location& loc) const {
        auto& memo = x.state().column_memo;
        const detail::ColumnKey key{this, x.origin() + t + loc.block_start_time};
        if (auto it = memo.find(key); it != memo.end()) return static_cast<std::uint64_t>(it->second);
        const TimeIndex start = t + loc.block_start_time;
        auto name = detail::label_word(q_, x, start, start + loc.height - 1);
        if (!name) return std::nullopt;
        const auto cw = cb_->codeword_of(*name);
        memo.emplace(key, static_cast<std::int64_t>(cw));
        return cw;
    }

    Json to_json() const override {
        return Json{{"kind", "factor_code"}, {"tower", tower_->id()}, {"factor", q_.to_json()}, {"codebook", cb_->to_json()}};
    }
    std::vector<const Partition*> dependencies() const override { return {&q_}; }

private:
    KRTowerRef tower_;
    Partition q_;
    CodebookRef cb_;
};

namespace detail {

inline KRTowerRef find_kr_tower(const Json& j, const TowerRegistry& towers) {
    auto it = towers.find(j.at("tower").get<std::uint64_t>());
    require(it != towers.end(), ErrorCode::InvalidSpec, "layer references an unknown tower");
    auto kr = std::dynamic_pointer_cast<const KRTower>(it->second);
    require(kr != nullptr, ErrorCode::InvalidSpec, "layer tower is not a Kakutani-Rokhlin tower");
    return kr;
}

inline const bool factor_code_registered = [] {
    column_rule_factories()["factor_code"] = [](const Json& j, const TowerRegistry& towers) -> ColumnRuleRef {
        return std::make_shared<const FactorCodeRule>(find_kr_tower(j, towers), Partition::from_json(j.at("factor"), towers),
                                                      std::make_shared<const Codebook>(Codebook::from_json(j.at("codebook"))));
    };
    return true;
}();

struct NameSet {
    std::set<Word> names;
    std::size_t n = 0, unresolved = 0;
    void merge(const NameSet& o) {
        names.insert(o.names.begin(), o.names.end());
        n += o.n, unresolved += o.unresolved;
    }
};

} // namespace detail

struct EncodeOptions {
    SamplePlan codebook_plan = SamplePlan::independent(20000); // column names collected for the codebook
    TowerBuildOptions tower;
};

struct EncodeResult {
    Partition Pp;
    Codebook codebook;
    KRTowerRef tower;
    std::shared_ptr<const FactorCodeRule> rule;
    bool spacing_rule_met = false; // N/n < eps/20
    double modified_bound = 0.0;   // upper bound on the fraction of relabelled levels
};

inline EncodeResult encode_factor(const Partition& P, const Partition& Q, const SystemSpec& spec, double eps, std::int64_t n,
                                  const RngStream& rng, const EncodeOptions& opts = {}) {
    require(P.label_count() == 2, ErrorCode::InvalidConfig, "encode_factor needs a binary partition P");
    require(n >= 2, ErrorCode::InvalidConfig, "block length must be at least 2");
    const std::int64_t N = encode_block(eps);
    auto tower = build_tower(spec, default_base(spec, n), n, 0, rng.child(1), opts.tower);

    auto found = sample_reduce<detail::NameSet>(spec, opts.codebook_plan, rng.child(2), [&](const Point& x, std::size_t, detail::NameSet& s) {
        auto loc = tower->locate(x);
        auto name = loc ? detail::label_word(Q, x, loc->block_start_time, loc->block_start_time + loc->height - 1) : std::nullopt;
        if (!name) return ++s.unresolved, void();
        ++s.n;
        s.names.insert(std::move(*name));
    });
    check_unresolved(found.unresolved, found.n + found.unresolved, "encode_factor codebook");

    const double capacity = eps * static_cast<double>(n) / 5.0;
    require(std::log2(static_cast<double>(found.names.size())) <= capacity, ErrorCode::CapacityExceeded,
            std::to_string(found.names.size()) + " observed Q-blocks exceed 2^(eps n / 5)");
    Codebook cb;
    cb.n = n, cb.N = N;
    cb.L = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::log2(static_cast<double>(found.names.size()) + 1.0))));
    require(static_cast<double>(cb.L) <= capacity, ErrorCode::CapacityExceeded, "codeword length exceeds eps n / 5");
    for (const auto& w : found.names) {
        cb.code.emplace(w, cb.names.size());
        cb.names.push_back(w);
    }
    // Header, forced ones and code bits of the taller column type.
    const double modified = static_cast<double>(4 * N + 1 + cb.L) / static_cast<double>(n) + 2.0 / static_cast<double>(N);
    require(modified < eps, ErrorCode::InvalidConfig,
            "n = " + std::to_string(n) + " is too short for headers of length " + std::to_string(4 * N + 1) + " within eps");
    require(cb.code_levels(n + 1).back() < n, ErrorCode::InvalidConfig, "code region does not fit in the column");

    auto cbr = std::make_shared<const Codebook>(cb);
    auto rule = std::make_shared<const FactorCodeRule>(tower, Q, cbr);
    return {P.with_layer(ColumnRuleRef(rule)), cb, tower, rule, static_cast<double>(N) < eps * static_cast<double>(n) / 20.0, modified};
}

struct DecodedBlock {
    Word q_block;
    TimeIndex column_start = 0; // relative to the window's time origin
    std::int64_t height = 0;
};

enum class DecodeFailureReason { NoHeader, Truncated, ReservedCodeword, UnknownCodeword };

inline std::string_view to_string(DecodeFailureReason r) noexcept {
    switch (r) {
    case DecodeFailureReason::NoHeader: return "NoHeader";
    case DecodeFailureReason::Truncated: return "Truncated";
    case DecodeFailureReason::ReservedCodeword: return "ReservedCodeword";
    case DecodeFailureReason::UnknownCodeword: return "UnknownCodeword";
    }
    return "Unknown";
}

struct DecodeFailure {
    DecodeFailureReason reason;
};

using DecodeResult = std::variant<DecodedBlock, DecodeFailure>;

struct HeaderHit {
    std::size_t start = 0; // index of the column's first level in the window
    std::int64_t height = 0;
};

// Column headers found in an encoded name. A marker is a short header when the zero run
// after its centre is shorter than N + N/2, a long one when both runs reach 2N.
inline std::vector<HeaderHit> find_headers(const NameWindow& w, const Codebook& cb) {
    std::vector<HeaderHit> out;
    const auto N = static_cast<std::size_t>(cb.N);
    for (auto c : marker_scan(w, N)) {
        const std::size_t right = zero_run_after(w.labels, c);
        std::size_t left = 0;
        while (left < c && w.labels[c - 1 - left] == 0) ++left;
        if (right >= 2 * N && left >= 2 * N)
            out.push_back({c - 2 * N, cb.n + 1});
        else if (right < N + N / 2)
            out.push_back({c - N, cb.n});
    }
    return out;
}

// Decodes the column containing time 0 of the window.
inline DecodeResult decode_factor(const NameWindow& w, const Codebook& cb, std::int64_t N) {
    require(N == cb.N, ErrorCode::InvalidConfig, "marker length does not match the codebook");
    require(w.offset <= 0 && w.offset + static_cast<TimeIndex>(w.labels.size()) > 0, ErrorCode::InvalidConfig,
            "decode window must contain time 0");
    const auto zero = static_cast<std::size_t>(-w.offset);
    std::optional<HeaderHit> hit;
    for (const auto& h : find_headers(w, cb))
        if (h.start <= zero) hit = h;
    if (!hit) return DecodeFailure{DecodeFailureReason::NoHeader};
    std::uint64_t cw = 0;
    for (auto lev : cb.code_levels(hit->height)) {
        const std::size_t i = hit->start + static_cast<std::size_t>(lev);
        if (i >= w.labels.size()) return DecodeFailure{DecodeFailureReason::Truncated};
        cw = (cw << 1) | (w.labels[i] & 1u);
    }
    if (cw == cb.reserved()) return DecodeFailure{DecodeFailureReason::ReservedCodeword};
    if (cw >= cb.names.size()) return DecodeFailure{DecodeFailureReason::UnknownCodeword};
    return DecodedBlock{cb.names[cw], w.offset + static_cast<TimeIndex>(hit->start), hit->height};
}

// Markers in an encoded window whose centre is not a true header centre.
inline std::optional<std::size_t> false_markers(const NameWindow& w, const Codebook& cb, const KRTower& tower, const Point& x) {
    std::size_t bad = 0;
    for (auto c : marker_scan(w, static_cast<std::size_t>(cb.N))) {
        auto loc = tower.locate(x, w.offset + static_cast<TimeIndex>(c));
        if (!loc) return std::nullopt;
        bad += loc->level != cb.header_half(loc->height);
    }
    return bad;
}

// ---------------------------------------------------------------------------------------
// Generator relabeling

// Words 0^k s y with s != 0, no k consecutive zeros in y and a nonzero last symbol. No
// proper prefix of one such word is a proper suffix of another, so occurrences of
// codewords never overlap.
inline AllocatorOptions cross_bifix_free(std::size_t k) {
    require(k >= 1, ErrorCode::InvalidConfig, "zero-run length must be positive");
    AllocatorOptions o;
    o.prefix = Word(k, '\0') + Word(1, '\1');
    o.accept = [k](const Word& w) {
        if (w.back() == '\0') return false;
        std::size_t run = 0;
        for (std::size_t i = k + 1; i < w.size(); ++i) {
            run = w[i] == '\0' ? run + 1 : 0;
            if (run >= k) return false;
        }
        return true;
    };
    return o;
}

// Observed words plus every word at Hamming distance one from them.
inline std::set<Word> with_hamming_neighbours(const std::set<Word>& words, std::size_t a) {
    std::set<Word> out = words;
    for (const auto& w : words) {
        Word v = w;
        for (std::size_t i = 0; i < v.size(); ++i) {
            const char keep = v[i];
            for (std::size_t s = 0; s < a; ++s) {
                v[i] = static_cast<char>(s);
                out.insert(v);
            }
            v[i] = keep;
        }
    }
    return out;
}

// Set C: one codeword per observed column Q-name. Set D: one codeword per observed
// Q-block of length L, marking exceptional columns; the last D word stands for unseen blocks.
struct RelabelCodebooks {
    std::size_t L = 0;
    std::size_t k = 0;
    std::vector<Word> c_words, c_names;
    std::vector<Word> d_words, d_blocks; // d_blocks.size() == d_words.size() - 1
    std::set<Word> crowded;              // column P-names with too many Q-refinements

    std::map<Word, std::size_t> c_index, d_index; // by Q-name / Q-block

    void index() {
        c_index.clear(), d_index.clear();
        for (std::size_t i = 0; i < c_names.size(); ++i) c_index.emplace(c_names[i], i);
        for (std::size_t i = 0; i < d_blocks.size(); ++i) d_index.emplace(d_blocks[i], i);
    }

    Json to_json() const {
        auto digits = [](const std::vector<Word>& ws) {
            Json a = Json::array();
            for (const auto& w : ws) a.push_back(word_digits(w));
            return a;
        };
        return Json{{"L", L},
                    {"k", k},
                    {"C", {{"words", digits(c_words)}, {"names", digits(c_names)}}},
                    {"D", {{"words", digits(d_words)}, {"blocks", digits(d_blocks)}}},
                    {"crowded", digits(std::vector<Word>(crowded.begin(), crowded.end()))}};
    }
    static RelabelCodebooks from_json(const Json& j) {
        auto words = [](const Json& a) {
            std::vector<Word> ws;
            for (const auto& d : a) ws.push_back(word_from_digits(d.get<std::string>()));
            return ws;
        };
        RelabelCodebooks cb;
        cb.L = j.at("L").get<std::size_t>();
        cb.k = j.at("k").get<std::size_t>();
        cb.c_words = words(j.at("C").at("words"));
        cb.c_names = words(j.at("C").at("names"));
        cb.d_words = words(j.at("D").at("words"));
        cb.d_blocks = words(j.at("D").at("blocks"));
        for (auto& w : words(j.at("crowded"))) cb.crowded.insert(std::move(w));
        require(cb.c_words.size() == cb.c_names.size() && cb.d_words.size() == cb.d_blocks.size() + 1, ErrorCode::InvalidSpec,
                "relabel codebook lists do not match");
        cb.index();
        return cb;
    }
};

using RelabelCodebooksRef = std::shared_ptr<const RelabelCodebooks>;

class GeneratorCodeRule final : public ColumnRule {
public:
    GeneratorCodeRule(KRTowerRef tower, Partition p, Partition q, RelabelCodebooksRef books)
        : tower_(std::move(tower)), p_(std::move(p)), q_(std::move(q)), cb_(std::move(books)) {}

    TowerRef tower() const override { return tower_; }

    RuleOutcome apply(const Point& x, TimeIndex t, const Location& loc) const override {
        auto col = column(x, t, loc);
        if (!col) return RuleOutcome::unresolved();
        const auto lev = static_cast<std::size_t>(loc.level);
        if (lev < cb_->L) {
            const Word& w = col->exceptional ? cb_->d_words[col->index] : cb_->c_words[col->index];
            return RuleOutcome::set(static_cast<Label>(w[lev]));
        }
        if (!col->exceptional) return RuleOutcome::keep();
        auto l = q_.try_label(x, t);
        return l ? RuleOutcome::set(*l) : RuleOutcome::unresolved();
    }

    struct ColumnCode {
        bool exceptional = false;
        std::size_t index = 0;
    };

    std::optional<ColumnCode> column(const Point& x, TimeIndex t, const Location& loc) const {
        auto& memo = x.state().column_memo;
        const detail::ColumnKey key{this, x.origin() + t + loc.block_start_time};
        if (auto it = memo.find(key); it != memo.end()) return ColumnCode{(it->second & 1) != 0, static_cast<std::size_t>(it->second >> 1)};
        const TimeIndex start = t + loc.block_start_time;
        auto qname = detail::label_word(q_, x, start, start + loc.height - 1);
        if (!qname) return std::nullopt;
        ColumnCode code;
        auto ci = cb_->c_index.find(*qname);
        bool crowded = false;
        if (!cb_->crowded.empty() && ci != cb_->c_index.end()) {
            auto pname = detail::label_word(p_, x, start, start + loc.height - 1);
            if (!pname) return std::nullopt;
            crowded = cb_->crowded.count(*pname) > 0;
        }
        if (ci != cb_->c_index.end() && !crowded) {
            code.index = ci->second;
        } else {
            code.exceptional = true;
            auto di = cb_->d_index.find(qname->substr(0, cb_->L));
            code.index = di == cb_->d_index.end() ? cb_->d_blocks.size() : di->second;
        }
        memo.emplace(key, static_cast<std::int64_t>(code.index << 1 | (code.exceptional ? 1u : 0u)));
        return code;
    }

    Json to_json() const override {
        return Json{{"kind", "generator_code"}, {"tower", tower_->id()}, {"source", p_.to_json()},
                    {"factor", q_.to_json()},   {"codebooks", cb_->to_json()}};
    }
    std::vector<const Partition*> dependencies() const override { return {&p_, &q_}; }

private:
    KRTowerRef tower_;
    Partition p_, q_;
    RelabelCodebooksRef cb_;
};

namespace detail {

inline const bool generator_code_registered = [] {
    column_rule_factories()["generator_code"] = [](const Json& j, const TowerRegistry& towers) -> ColumnRuleRef {
        return std::make_shared<const GeneratorCodeRule>(
            find_kr_tower(j, towers), Partition::from_json(j.at("source"), towers), Partition::from_json(j.at("factor"), towers),
            std::make_shared<const RelabelCodebooks>(RelabelCodebooks::from_json(j.at("codebooks"))));
    };
    return true;
}();

struct RelabelScan {
    std::set<Word> p_blocks, q_blocks;             // length-L blocks at time 0
    std::map<Word, std::set<Word>> refinements;    // column P-name -> column Q-names
    std::map<Word, std::size_t> q_names;
    std::size_t n = 0, unresolved = 0;
    void merge(const RelabelScan& o) {
        p_blocks.insert(o.p_blocks.begin(), o.p_blocks.end());
        q_blocks.insert(o.q_blocks.begin(), o.q_blocks.end());
        for (const auto& [k, v] : o.refinements) refinements[k].insert(v.begin(), v.end());
        for (const auto& [k, c] : o.q_names) q_names[k] += c;
        n += o.n, unresolved += o.unresolved;
    }
};

} // namespace detail

struct RelabelOptions {
    SamplePlan name_plan = SamplePlan::independent(10000); // name collection
    std::size_t zero_run = 0;                              // k of the codeword family; 0 = automatic
    TowerBuildOptions tower;
};

struct RelabelResult {
    Partition Phat;
    RelabelCodebooks codebooks;
    KRTowerRef tower;
    std::shared_ptr<const GeneratorCodeRule> rule;
    std::size_t max_refinements = 0; // over non-crowded observed column P-names
    double refinement_bound = 0.0;   // e^{eps N / 100}
};

inline RelabelResult generator_relabel(const Partition& P, const Partition& Q, const SystemSpec& spec, double eps, std::int64_t N,
                                       const RngStream& rng, const RelabelOptions& opts = {}) {
    const std::size_t a = P.label_count();
    require(Q.label_count() == a, ErrorCode::InvalidConfig, "P and Q must have the same number of labels");
    require(eps > 0.0 && eps <= 1.0, ErrorCode::InvalidConfig, "epsilon must lie in (0, 1]");
    const auto L = static_cast<std::size_t>(std::floor(eps / 3.0 * static_cast<double>(N)));
    require(L >= 4, ErrorCode::InvalidConfig, "(eps/3) N must be at least 4");
    const std::size_t k = opts.zero_run ? opts.zero_run : std::max<std::size_t>(2, std::min<std::size_t>(6, L / 4));
    require(k + 2 <= L, ErrorCode::InvalidConfig, "zero-run length too large for the codeword length");
    auto tower = build_tower(spec, default_base(spec, N), N, 0, rng.child(1), opts.tower);
    const auto Lt = static_cast<TimeIndex>(L);

    auto scan = sample_reduce<detail::RelabelScan>(spec, opts.name_plan, rng.child(2), [&](const Point& x, std::size_t, detail::RelabelScan& s) {
        auto pb = detail::label_word(P, x, 0, Lt - 1);
        auto qb = pb ? detail::label_word(Q, x, 0, Lt - 1) : std::nullopt;
        auto loc = qb ? tower->locate(x) : std::nullopt;
        std::optional<Word> pn, qn;
        if (loc) {
            pn = detail::label_word(P, x, loc->block_start_time, loc->block_start_time + loc->height - 1);
            if (pn) qn = detail::label_word(Q, x, loc->block_start_time, loc->block_start_time + loc->height - 1);
        }
        if (!qn) return ++s.unresolved, void();
        ++s.n;
        s.p_blocks.insert(std::move(*pb));
        s.q_blocks.insert(std::move(*qb));
        s.refinements[*pn].insert(*qn);
        ++s.q_names[*qn];
    });
    check_unresolved(scan.unresolved, scan.n + scan.unresolved, "generator_relabel name collection");

    RelabelCodebooks cb;
    cb.L = L, cb.k = k;
    RelabelResult out{P, {}, tower, nullptr, 0, std::exp(eps * static_cast<double>(N) / 100.0)};
    for (const auto& [pn, qs] : scan.refinements) {
        if (static_cast<double>(qs.size()) > out.refinement_bound)
            cb.crowded.insert(pn);
        else
            out.max_refinements = std::max(out.max_refinements, qs.size());
    }
    for (const auto& [qn, c] : scan.q_names) cb.c_names.push_back(qn);
    for (const auto& qb : scan.q_blocks) cb.d_blocks.push_back(qb);
    std::set<Word> observed = scan.p_blocks;
    observed.insert(scan.q_blocks.begin(), scan.q_blocks.end());
    const auto forbidden = with_hamming_neighbours(observed, a);
    auto words = codeword_allocator(forbidden, a, L, cb.c_names.size() + cb.d_blocks.size() + 1, cross_bifix_free(k));
    cb.c_words.assign(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(cb.c_names.size()));
    cb.d_words.assign(words.begin() + static_cast<std::ptrdiff_t>(cb.c_names.size()), words.end());
    cb.index();

    auto books = std::make_shared<const RelabelCodebooks>(cb);
    out.rule = std::make_shared<const GeneratorCodeRule>(tower, P, Q, books);
    out.Phat = P.with_layer(ColumnRuleRef(out.rule));
    out.codebooks = std::move(cb);
    return out;
}

// Q-label at time 0 recovered from a relabelled name window: the latest codeword starting
// at or before time 0 gives the column's Q-name (set C) or marks an exceptional column
// (set D), where the name itself carries Q. Windows without a codeword yield label 0.
class RelabelDecoder {
public:
    explicit RelabelDecoder(RelabelCodebooks cb) : cb_(std::move(cb)) {
        for (std::size_t i = 0; i < cb_.c_words.size(); ++i) words_.emplace(cb_.c_words[i], std::pair{false, i});
        for (std::size_t i = 0; i < cb_.d_words.size(); ++i) words_.emplace(cb_.d_words[i], std::pair{true, i});
    }

    Label operator()(const NameWindow& w) const {
        require(w.offset <= 0 && w.offset + static_cast<TimeIndex>(w.labels.size()) > 0, ErrorCode::InvalidConfig,
                "decode window must contain time 0");
        const auto zero = static_cast<std::size_t>(-w.offset);
        const std::size_t L = cb_.L;
        Word probe(L, '\0');
        for (std::size_t s = std::min(zero, w.labels.size() >= L ? w.labels.size() - L : 0) + 1; s-- > 0;) {
            if (s + L > w.labels.size() || w.labels[s + cb_.k] == 0) continue;
            bool zeros = true;
            for (std::size_t i = 0; i < cb_.k && zeros; ++i) zeros = w.labels[s + i] == 0;
            if (!zeros) continue;
            for (std::size_t i = 0; i < L; ++i) probe[i] = static_cast<char>(w.labels[s + i]);
            auto it = words_.find(probe);
            if (it == words_.end()) continue;
            const std::size_t off = zero - s;
            const auto [exceptional, idx] = it->second;
            if (!exceptional) return off < cb_.c_names[idx].size() ? static_cast<Label>(cb_.c_names[idx][off]) : Label{0};
            if (off >= L) return w.labels[zero];
            return idx < cb_.d_blocks.size() ? static_cast<Label>(cb_.d_blocks[idx][off]) : Label{0};
        }
        return 0;
    }

    // Rule reading the name of `phat` over [-n, n].
    PointRule rule(const Partition& phat, std::int64_t n) const {
        return [this, phat, n](const Point& x) -> std::optional<Label> {
            auto w = try_name_window(phat, x, -n, n);
            if (!w) return std::nullopt;
            return (*this)(*w);
        };
    }

private:
    RelabelCodebooks cb_;
    std::map<Word, std::pair<bool, std::size_t>> words_;
};

namespace detail {

struct ExceptionalAcc {
    std::size_t n = 0, hits = 0, unresolved = 0;
    void merge(const ExceptionalAcc& o) { n += o.n, hits += o.hits, unresolved += o.unresolved; }
};

} // namespace detail

// Measure of the union of exceptional columns.
inline SampledEstimate exceptional_fraction(const RelabelResult& r, const SystemSpec& spec, const SamplePlan& plan, const RngStream& rng) {
    auto acc = sample_reduce<detail::ExceptionalAcc>(spec, plan, rng, [&](const Point& x, std::size_t, detail::ExceptionalAcc& s) {
        auto loc = r.tower->locate(x);
        auto col = loc ? r.rule->column(x, 0, *loc) : std::nullopt;
        if (!col) return ++s.unresolved, void();
        ++s.n;
        s.hits += col->exceptional;
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "exceptional_fraction");
    return {ProbEstimate::proportion(acc.hits, acc.n), acc.unresolved, acc.n + acc.unresolved};
}

} // namespace ergolab
