#pragma once

// Statistical functionals of partition processes: block laws, dependence coefficients,
// block entropies, block d-bar and factor-approximation error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"
#include "montecarlo.hpp"
#include "partitions.hpp"
#include "transport.hpp"

namespace ergolab {

inline constexpr std::size_t kDefaultSupportCap = std::size_t{1} << 20;

// Words are stored as strings of raw label bytes.
using Word = std::string;

inline std::string word_digits(const Word& w) {
    static constexpr char digits[] = "0123456789abcdefghijklmnopqrstuvwxyz";
    std::string s;
    s.reserve(w.size());
    for (unsigned char c : w) s.push_back(c < 36 ? digits[c] : '?');
    return s;
}

inline Word word_from_digits(const std::string& s) {
    Word w;
    w.reserve(s.size());
    for (char c : s) {
        const int v = c >= '0' && c <= '9' ? c - '0' : (c >= 'a' && c <= 'z' ? c - 'a' + 10 : -1);
        require(v >= 0, ErrorCode::InvalidSpec, "invalid digit '" + std::string(1, c) + "' in word");
        w.push_back(static_cast<char>(v));
    }
    return w;
}

struct BlockDistribution {
    std::size_t n = 0;
    std::size_t a = 0;
    std::map<Word, std::size_t> counts;
    std::size_t n_samples = 0;
    std::size_t unresolved = 0;

    double frequency(const Word& w) const {
        auto it = counts.find(w);
        return it == counts.end() || n_samples == 0 ? 0.0 : static_cast<double>(it->second) / static_cast<double>(n_samples);
    }

    // "word,frequency" rows, words in lexicographic label order.
    std::string csv() const {
        std::ostringstream out;
        out.precision(17);
        out << "word,frequency\n";
        for (const auto& [w, c] : counts) out << word_digits(w) << ',' << static_cast<double>(c) / static_cast<double>(n_samples) << '\n';
        return out.str();
    }

    Json to_json() const {
        Json freq = Json::object();
        for (const auto& [w, c] : counts) freq[word_digits(w)] = static_cast<double>(c) / static_cast<double>(n_samples);
        return Json{{"n", n}, {"a", a}, {"n_samples", n_samples}, {"unresolved", unresolved}, {"frequencies", freq}};
    }

    // Law of the first m symbols.
    BlockDistribution prefix(std::size_t m) const {
        require(m <= n, ErrorCode::InvalidConfig, "prefix longer than the block");
        BlockDistribution out{m, a, {}, n_samples, unresolved};
        for (const auto& [w, c] : counts) out.counts[w.substr(0, m)] += c;
        return out;
    }
};

namespace detail {

struct WordCounts {
    std::map<Word, std::size_t> counts;
    std::size_t n = 0, unresolved = 0;
    void merge(const WordCounts& o) {
        for (const auto& [w, c] : o.counts) counts[w] += c;
        n += o.n, unresolved += o.unresolved;
    }
};

inline void check_support(std::size_t support, std::size_t cap, const std::string& what) {
    require(support <= cap, ErrorCode::CapacityExceeded,
            what + ": observed support " + std::to_string(support) + " exceeds the cap " + std::to_string(cap));
}

// Label word of T^i x for i in [m, n]; nullopt if any label is unresolved.
inline std::optional<Word> label_word(const Partition& p, const Point& x, TimeIndex m, TimeIndex n) {
    Word w;
    w.reserve(static_cast<std::size_t>(n - m + 1));
    for (TimeIndex i = m; i <= n; ++i) {
        auto l = p.try_label(x, i);
        if (!l) return std::nullopt;
        w.push_back(static_cast<char>(*l));
    }
    return w;
}

} // namespace detail

// Empirical law of the P-name over [0, n-1]. The observed support is stored sparsely and
// must not exceed `cap` words.
inline BlockDistribution block_distribution(const Partition& p, const SystemSpec& spec, std::size_t n, const SamplePlan& plan,
                                            const RngStream& rng, std::size_t cap = kDefaultSupportCap) {
    require(n >= 1, ErrorCode::InvalidConfig, "block length must be positive");
    auto acc = sample_reduce<detail::WordCounts>(spec, plan, rng, [&](const Point& x, std::size_t, detail::WordCounts& s) {
        auto w = detail::label_word(p, x, 0, static_cast<TimeIndex>(n) - 1);
        if (!w) return ++s.unresolved, void();
        ++s.n;
        ++s.counts[*w];
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "block_distribution");
    detail::check_support(acc.counts.size(), cap, "block_distribution");
    return BlockDistribution{n, p.label_count(), std::move(acc.counts), acc.n, acc.unresolved};
}

// ---------------------------------------------------------------- dependence

// Joint counts of (X_{-k..0}, X_{n..n+k}).
struct PastFutureTable {
    std::size_t n = 0, k = 0;
    std::vector<Word> rows, cols;
    std::vector<std::vector<std::size_t>> counts; // [row][col]
    std::size_t total = 0;

    std::vector<std::vector<double>> probabilities() const {
        std::vector<std::vector<double>> p(rows.size(), std::vector<double>(cols.size()));
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < cols.size(); ++j) p[i][j] = static_cast<double>(counts[i][j]) / static_cast<double>(total);
        return p;
    }
};

namespace detail {

struct PairCounts {
    std::map<std::pair<Word, Word>, std::size_t> counts;
    std::size_t n = 0, unresolved = 0;
    void merge(const PairCounts& o) {
        for (const auto& [w, c] : o.counts) counts[w] += c;
        n += o.n, unresolved += o.unresolved;
    }
};

inline std::size_t atoms_per_side(std::size_t a, std::size_t k) {
    std::size_t v = 1;
    for (std::size_t i = 0; i <= k; ++i) {
        v *= a;
        if (v > (std::size_t{1} << 40)) break;
    }
    return v;
}

// 0.5 * sum |p_ij - p_i q_j|
inline double beta_of(const std::vector<std::vector<double>>& p) {
    const std::size_t r = p.size(), c = r ? p[0].size() : 0;
    std::vector<double> pr(r, 0.0), pc(c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) pr[i] += p[i][j], pc[j] += p[i][j];
    double s = 0.0;
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) s += std::abs(p[i][j] - pr[i] * pc[j]);
    return 0.5 * s;
}

// For a fixed row set with indicator `rows`, the best column set takes every column whose
// discrepancy has the favoured sign; both signs are tried.
inline double best_given_rows(const std::vector<std::vector<double>>& p, const std::vector<double>& pc,
                              const std::vector<char>& rows, std::vector<char>* best_cols = nullptr) {
    const std::size_t c = pc.size();
    double pa = 0.0;
    std::vector<double> joint(c, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i)
        if (rows[i]) {
            for (std::size_t j = 0; j < c; ++j) {
                joint[j] += p[i][j];
                pa += p[i][j];
            }
        }
    double pos = 0.0, neg = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        const double d = joint[j] - pa * pc[j];
        (d > 0 ? pos : neg) += d;
    }
    const bool use_pos = pos >= -neg;
    if (best_cols) {
        best_cols->assign(c, 0);
        for (std::size_t j = 0; j < c; ++j) {
            const double d = joint[j] - pa * pc[j];
            (*best_cols)[j] = use_pos ? d > 0 : d < 0;
        }
    }
    return use_pos ? pos : -neg;
}

inline std::vector<std::vector<double>> transpose(const std::vector<std::vector<double>>& p) {
    if (p.empty()) return {};
    std::vector<std::vector<double>> t(p[0].size(), std::vector<double>(p.size()));
    for (std::size_t i = 0; i < p.size(); ++i)
        for (std::size_t j = 0; j < p[i].size(); ++j) t[j][i] = p[i][j];
    return t;
}

inline std::vector<double> col_marginal(const std::vector<std::vector<double>>& p) {
    std::vector<double> pc(p.empty() ? 0 : p[0].size(), 0.0);
    for (const auto& row : p)
        for (std::size_t j = 0; j < row.size(); ++j) pc[j] += row[j];
    return pc;
}

} // namespace detail

inline PastFutureTable past_future_table(const Partition& p, const SystemSpec& spec, std::size_t n, std::size_t k,
                                         const SamplePlan& plan, const RngStream& rng, std::size_t cap = kDefaultSupportCap) {
    require(n >= 1, ErrorCode::InvalidConfig, "gap n must be positive");
    const std::size_t side = detail::atoms_per_side(p.label_count(), k);
    require(side <= cap, ErrorCode::CapacityExceeded, "a^(k+1) atoms per side exceed the cap");
    const auto kk = static_cast<TimeIndex>(k), nn = static_cast<TimeIndex>(n);
    auto acc = sample_reduce<detail::PairCounts>(spec, plan, rng, [&](const Point& x, std::size_t, detail::PairCounts& s) {
        auto past = detail::label_word(p, x, -kk, 0);
        auto future = past ? detail::label_word(p, x, nn, nn + kk) : std::nullopt;
        if (!future) return ++s.unresolved, void();
        ++s.n;
        ++s.counts[{*past, *future}];
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "past_future_table");
    PastFutureTable t{n, k, {}, {}, {}, acc.n};
    std::map<Word, std::size_t> ri, ci;
    for (const auto& [pf, c] : acc.counts) {
        ri.emplace(pf.first, 0);
        ci.emplace(pf.second, 0);
    }
    for (auto& [w, i] : ri) i = t.rows.size(), t.rows.push_back(w);
    for (auto& [w, j] : ci) j = t.cols.size(), t.cols.push_back(w);
    t.counts.assign(t.rows.size(), std::vector<std::size_t>(t.cols.size(), 0));
    for (const auto& [pf, c] : acc.counts) t.counts[ri[pf.first]][ci[pf.second]] = c;
    return t;
}

// Plug-in beta with a multinomial bootstrap interval (200 replicates).
inline ProbEstimate beta_from_table(const PastFutureTable& t, const RngStream& rng, std::size_t replicates = 200) {
    const auto p = t.probabilities();
    const double beta = detail::beta_of(p);
    if (t.total == 0) return {};
    std::mt19937_64 gen(rng.key());
    std::vector<double> cells;
    for (const auto& row : p) cells.insert(cells.end(), row.begin(), row.end());
    double m1 = 0.0, m2 = 0.0;
    const std::size_t r = p.size(), c = r ? p[0].size() : 0;
    std::vector<std::vector<double>> q(r, std::vector<double>(c));
    for (std::size_t b = 0; b < replicates; ++b) {
        std::size_t left = t.total;
        double mass = 1.0;
        for (std::size_t idx = 0; idx < cells.size(); ++idx) {
            std::size_t draw = 0;
            if (left > 0 && mass > 0.0) {
                const double pr = std::clamp(cells[idx] / mass, 0.0, 1.0);
                draw = idx + 1 == cells.size() ? left : std::binomial_distribution<std::size_t>(left, pr)(gen);
            }
            q[idx / c][idx % c] = static_cast<double>(draw) / static_cast<double>(t.total);
            left -= draw;
            mass -= cells[idx];
        }
        const double v = detail::beta_of(q);
        m1 += v;
        m2 += v * v;
    }
    m1 /= static_cast<double>(replicates);
    const double var = m2 / static_cast<double>(replicates) - m1 * m1;
    return {beta, kZ975 * std::sqrt(std::max(var, 0.0)), t.total};
}

inline ProbEstimate beta_coefficient(const Partition& p, const SystemSpec& spec, std::size_t n, std::size_t k,
                                     const SamplePlan& plan, const RngStream& rng, std::size_t cap = kDefaultSupportCap) {
    return beta_from_table(past_future_table(p, spec, n, k, plan, rng.child(0), cap), rng.child(1));
}

struct AlphaBracket {
    double lower = 0.0;
    double upper = 0.0;
    std::size_t n = 0;
    std::size_t k = 0;
    std::optional<double> exact;  // exhaustive maximum on the empirical table
    double ascent_lower = 0.0;    // set-ascent value
    double beta_upper = 0.0;      // beta / 2
    double half_width = 0.0;      // interval slack carried over from beta

    Json to_json() const {
        Json j{{"lower", lower}, {"upper", upper}, {"n", n}, {"k", k}, {"ascent_lower", ascent_lower},
               {"beta_upper", beta_upper}, {"half_width", half_width}};
        j["exact"] = exact ? Json(*exact) : Json(nullptr);
        return j;
    }
};

// Exhaustive max over row subsets (the smaller side); column sets are optimal in closed form.
inline double alpha_exact(const std::vector<std::vector<double>>& p) {
    if (p.empty()) return 0.0;
    const auto table = p.size() <= p[0].size() ? p : detail::transpose(p);
    const std::size_t r = table.size();
    require(r <= 24, ErrorCode::CapacityExceeded, "exact alpha enumeration needs at most 24 atoms on one side");
    const auto pc = detail::col_marginal(table);
    double best = 0.0;
    std::vector<char> rows(r);
    for (std::uint64_t mask = 1; mask < (std::uint64_t{1} << r); ++mask) {
        for (std::size_t i = 0; i < r; ++i) rows[i] = (mask >> i) & 1u;
        best = std::max(best, detail::best_given_rows(table, pc, rows));
    }
    return best;
}

// Alternating maximization over row and column subsets from `restarts` random starts.
inline double alpha_set_ascent(const std::vector<std::vector<double>>& p, const RngStream& rng, int restarts = 8) {
    if (p.empty()) return 0.0;
    const auto pt = detail::transpose(p);
    const auto pc = detail::col_marginal(p), pr = detail::col_marginal(pt);
    double best = 0.0;
    for (int s = 0; s < restarts; ++s) {
        StreamCursor cur(rng.child(static_cast<std::uint64_t>(s)));
        std::vector<char> rows(p.size()), cols;
        for (auto& v : rows) v = cur.next_bits() & 1u;
        double val = -1.0;
        for (int it = 0; it < 100; ++it) {
            const double v1 = detail::best_given_rows(p, pc, rows, &cols);
            const double v2 = detail::best_given_rows(pt, pr, cols, &rows);
            const double v = std::max(v1, v2);
            if (v <= val + 1e-15) break;
            val = v;
        }
        best = std::max(best, val);
    }
    return best;
}

inline AlphaBracket alpha_bracket(const Partition& p, const SystemSpec& spec, std::size_t n, std::size_t k,
                                  const SamplePlan& plan, const RngStream& rng, std::size_t cap = kDefaultSupportCap) {
    const auto table = past_future_table(p, spec, n, k, plan, rng.child(0), cap);
    const auto probs = table.probabilities();
    const auto beta = beta_from_table(table, rng.child(1));
    AlphaBracket b;
    b.n = n;
    b.k = k;
    b.ascent_lower = alpha_set_ascent(probs, rng.child(2));
    b.beta_upper = beta.mean / 2.0;
    b.half_width = beta.half_width / 2.0;
    if (detail::atoms_per_side(p.label_count(), k) <= 16) {
        b.exact = alpha_exact(probs);
        b.lower = b.upper = *b.exact;
    } else {
        b.lower = b.ascent_lower;
        b.upper = b.beta_upper;
    }
    return b;
}

// ---------------------------------------------------------------- entropy

// Miller-Madow entropy (bits) of a block law, with a delta-method interval.
inline ProbEstimate entropy_of(const BlockDistribution& bd, bool miller_madow = true) {
    if (bd.n_samples == 0) return {};
    const double nd = static_cast<double>(bd.n_samples);
    const double h = detail::entropy_bits(bd.counts, bd.n_samples, miller_madow);
    double m2 = 0.0, m1 = 0.0;
    for (const auto& [w, c] : bd.counts) {
        const double q = static_cast<double>(c) / nd;
        m1 += -q * std::log2(q);
        m2 += q * std::log2(q) * std::log2(q);
    }
    return ProbEstimate::from_moments(h, m2 - m1 * m1, bd.n_samples);
}

// h_n = H(X_0..X_{n-1}) / n in bits per symbol.
inline SampledEstimate block_entropy(const Partition& p, const SystemSpec& spec, std::size_t n, const SamplePlan& plan,
                                     const RngStream& rng, std::size_t cap = kDefaultSupportCap) {
    const auto bd = block_distribution(p, spec, n, plan, rng, cap);
    auto e = entropy_of(bd);
    e.mean /= static_cast<double>(n);
    e.half_width /= static_cast<double>(n);
    return {e, bd.unresolved, bd.n_samples + bd.unresolved};
}

// H(X_0..X_{n-1}) - H(X_0..X_{n-2}): the conditional entropy of the next symbol given n-1 predecessors.
inline SampledEstimate conditional_block_entropy(const Partition& p, const SystemSpec& spec, std::size_t n,
                                                 const SamplePlan& plan, const RngStream& rng,
                                                 std::size_t cap = kDefaultSupportCap) {
    require(n >= 1, ErrorCode::InvalidConfig, "block length must be positive");
    const auto bd = block_distribution(p, spec, n, plan, rng, cap);
    if (n == 1) return {entropy_of(bd), bd.unresolved, bd.n_samples + bd.unresolved};
    const auto pre = bd.prefix(n - 1);
    const double h = entropy_of(bd).mean - entropy_of(pre).mean;
    const double nd = static_cast<double>(bd.n_samples);
    double m1 = 0.0, m2 = 0.0;
    for (const auto& [w, c] : bd.counts) {
        const double q = static_cast<double>(c) / nd;
        const double psi = -std::log2(q) + std::log2(static_cast<double>(pre.counts.at(w.substr(0, n - 1))) / nd);
        m1 += q * psi;
        m2 += q * psi * psi;
    }
    return {ProbEstimate::from_moments(h, m2 - m1 * m1, bd.n_samples), bd.unresolved, bd.n_samples + bd.unresolved};
}

// ---------------------------------------------------------------- d-bar

inline constexpr std::size_t kMaxTransportSupport = 4096;

// Exact optimal transport between two block laws under normalized Hamming cost.
inline double dbar_block(const BlockDistribution& a, const BlockDistribution& b) {
    require(a.n == b.n && a.a == b.a, ErrorCode::InvalidConfig, "dbar_block needs equal block length and alphabet");
    require(a.counts.size() <= kMaxTransportSupport && b.counts.size() <= kMaxTransportSupport, ErrorCode::CapacityExceeded,
            "dbar_block supports at most 4096 words per law");
    require(a.n_samples > 0 && b.n_samples > 0, ErrorCode::InvalidConfig, "dbar_block needs non-empty laws");
    std::vector<const Word*> wa, wb;
    std::vector<std::int64_t> sa, sb;
    const auto na = static_cast<std::int64_t>(a.n_samples), nb = static_cast<std::int64_t>(b.n_samples);
    for (const auto& [w, c] : a.counts) wa.push_back(&w), sa.push_back(static_cast<std::int64_t>(c) * nb);
    for (const auto& [w, c] : b.counts) wb.push_back(&w), sb.push_back(static_cast<std::int64_t>(c) * na);
    const auto plan = solve_transport(sa, sb, [&](std::size_t i, std::size_t j) {
        std::int64_t d = 0;
        for (std::size_t t = 0; t < a.n; ++t) d += (*wa[i])[t] != (*wb[j])[t];
        return d;
    });
    return static_cast<double>(plan.cost) / (static_cast<double>(na) * static_cast<double>(nb) * static_cast<double>(a.n));
}

// ---------------------------------------------------------------- factor approximation

namespace detail {

struct VoteTable {
    std::map<Word, std::vector<std::size_t>> votes;
    std::size_t n = 0, unresolved = 0;
    void merge(const VoteTable& o) {
        for (const auto& [w, v] : o.votes) {
            auto& mine = votes[w];
            if (mine.size() < v.size()) mine.resize(v.size(), 0);
            for (std::size_t i = 0; i < v.size(); ++i) mine[i] += v[i];
        }
        n += o.n, unresolved += o.unresolved;
    }
};

} // namespace detail

// Misclassification rate of the majority-vote rule that predicts Q at time 0 from the
// P-name over [-n, n] (ties go to the lowest label), evaluated on its own sample.
inline SampledEstimate factor_approx_error(const Partition& p, const Partition& q, const SystemSpec& spec, std::size_t n,
                                           const SamplePlan& plan, const RngStream& rng, std::size_t cap = kDefaultSupportCap) {
    const auto nn = static_cast<TimeIndex>(n);
    const std::size_t aq = q.label_count();
    auto acc = sample_reduce<detail::VoteTable>(spec, plan, rng, [&](const Point& x, std::size_t, detail::VoteTable& s) {
        auto w = detail::label_word(p, x, -nn, nn);
        auto l = w ? q.try_label(x) : std::nullopt;
        if (!l) return ++s.unresolved, void();
        ++s.n;
        auto& v = s.votes[*w];
        if (v.empty()) v.assign(aq, 0);
        ++v[*l];
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "factor_approx_error");
    detail::check_support(acc.votes.size(), cap, "factor_approx_error");
    std::size_t wrong = 0;
    for (const auto& [w, v] : acc.votes) {
        const auto best = std::max_element(v.begin(), v.end()); // first maximum = lowest label
        wrong += std::accumulate(v.begin(), v.end(), std::size_t{0}) - *best;
    }
    return {ProbEstimate::proportion(wrong, acc.n), acc.unresolved, acc.n + acc.unresolved};
}

// Predictor evaluated at a point; nullopt = could not decide (counted as unresolved).
using PointRule = std::function<std::optional<Label>(const Point&)>;

// Disagreement rate mu{rule != Q} for an explicit rule.
inline SampledEstimate rule_error(const PointRule& rule, const Partition& q, const SystemSpec& spec, const SamplePlan& plan,
                                  const RngStream& rng) {
    auto acc = sample_reduce<detail::MismatchAcc>(spec, plan, rng, [&](const Point& x, std::size_t, detail::MismatchAcc& s) {
        auto guess = rule(x);
        auto truth = guess ? q.try_label(x) : std::nullopt;
        if (!truth) return ++s.unresolved, void();
        ++s.n;
        s.hits += *guess != *truth;
    });
    check_unresolved(acc.unresolved, acc.n + acc.unresolved, "rule_error");
    return {ProbEstimate::proportion(acc.hits, acc.n), acc.unresolved, acc.n + acc.unresolved};
}

} // namespace ergolab
