#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "ergolab/estimators.hpp"

using namespace ergolab;

namespace {

const double kAlpha = std::sqrt(2.0) - 1.0;
const std::vector<std::vector<double>> kM{{0.9, 0.1}, {0.2, 0.8}};

double h2(double p) { return p <= 0 || p >= 1 ? 0.0 : -p * std::log2(p) - (1 - p) * std::log2(1 - p); }

std::vector<std::vector<double>> matmul(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    std::vector<std::vector<double>> c(a.size(), std::vector<double>(b[0].size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t k = 0; k < b.size(); ++k)
            for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
    return c;
}

// beta(n) = 1/2 sum_i pi_i sum_j |(M^n)_ij - pi_j| for a stationary two-state chain.
double beta_oracle(int n) {
    const double pi[2] = {2.0 / 3.0, 1.0 / 3.0};
    auto mn = kM;
    for (int i = 1; i < n; ++i) mn = matmul(mn, kM);
    double s = 0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) s += pi[i] * std::abs(mn[i][j] - pi[j]);
    return s / 2;
}

// Max over all (row subset, column subset) pairs of |P(A x B) - P(A) P(B)|.
double alpha_brute(const std::vector<std::vector<double>>& p) {
    const std::size_t r = p.size(), c = p[0].size();
    double best = 0;
    for (unsigned ma = 0; ma < (1u << r); ++ma)
        for (unsigned mb = 0; mb < (1u << c); ++mb) {
            double pab = 0, pa = 0, pb = 0;
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const bool ia = (ma >> i) & 1, jb = (mb >> j) & 1;
                    if (ia && jb) pab += p[i][j];
                    if (ia) pa += p[i][j];
                    if (jb) pb += p[i][j];
                }
            best = std::max(best, std::abs(pab - pa * pb));
        }
    return best;
}

// Exhaustive minimum over integer transport plans between small integer mass vectors.
std::int64_t brute_transport(std::vector<int> s, std::vector<int> d, const std::function<int(int, int)>& cost) {
    const int m = int(s.size()), k = int(d.size());
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    std::function<void(int, int, std::int64_t)> rec = [&](int i, int j, std::int64_t acc) {
        if (i == m) {
            for (int v : d)
                if (v) return;
            best = std::min(best, acc);
            return;
        }
        if (j == k) {
            if (s[i] == 0) rec(i + 1, 0, acc);
            return;
        }
        for (int f = 0; f <= std::min(s[i], d[j]); ++f) {
            s[i] -= f, d[j] -= f;
            rec(i, j + 1, acc + std::int64_t(f) * cost(i, j));
            s[i] += f, d[j] += f;
        }
    };
    rec(0, 0, 0);
    return best;
}

BlockDistribution law(std::size_t n, std::map<Word, std::size_t> counts) {
    std::size_t total = 0;
    for (const auto& [w, c] : counts) total += c;
    return BlockDistribution{n, 2, std::move(counts), total, 0};
}

} // namespace

TEST(BlockLaw, FairCoinPairs) {
    auto bd = block_distribution(Partition::symbol(2), SystemSpec::bernoulli({0.5, 0.5}), 2, SamplePlan::independent(40000), {1, 0});
    ASSERT_EQ(bd.counts.size(), 4u);
    for (const auto& [w, c] : bd.counts) EXPECT_NEAR(bd.frequency(w), 0.25, 3 * std::sqrt(0.25 * 0.75 / 40000));
    EXPECT_EQ(bd.csv().substr(0, 15), "word,frequency\n");
}

TEST(BlockLaw, MarkovPairs) {
    auto bd = block_distribution(Partition::symbol(2), SystemSpec::markov(kM), 2, SamplePlan::independent(40000), {2, 0});
    EXPECT_NEAR(bd.frequency(Word{0, 0}), 0.6, 3 * std::sqrt(0.6 * 0.4 / 40000));
}

TEST(BlockLaw, SturmianComplexity) {
    auto bd = block_distribution(Partition::sturmian(kAlpha), SystemSpec::rotation(kAlpha), 5, SamplePlan::independent(20000), {3, 0});
    EXPECT_EQ(bd.counts.size(), 6u);
}

TEST(BlockLaw, CapacityExceeded) {
    try {
        block_distribution(Partition::symbol(2), SystemSpec::bernoulli({0.5, 0.5}), 8, SamplePlan::independent(5000), {1, 0}, 16);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::CapacityExceeded);
    }
}

TEST(Dependence, MarkovBetaMatchesMatrixPowers) {
    auto spec = SystemSpec::markov(kM);
    double prev = 1.0;
    for (int n : {1, 2, 4, 8}) {
        auto b = beta_coefficient(Partition::symbol(2), spec, n, 0, SamplePlan::independent(100000), {4, std::uint64_t(n)});
        EXPECT_NEAR(b.mean, beta_oracle(n), 3 * b.half_width) << n;
        EXPECT_LE(b.mean, prev + b.half_width);
        prev = b.mean;
    }
}

TEST(Dependence, IidIsNearlyIndependent) {
    auto spec = SystemSpec::bernoulli({0.5, 0.5});
    auto b = beta_coefficient(Partition::symbol(2), spec, 1, 0, SamplePlan::independent(100000), {5, 0});
    EXPECT_LE(b.mean, 0.01);
    auto a = alpha_bracket(Partition::symbol(2), spec, 1, 0, SamplePlan::independent(100000), {5, 1});
    ASSERT_TRUE(a.exact);
    EXPECT_LE(a.upper, 0.01);
}

TEST(Dependence, ExactAlphaMatchesBruteForce) {
    StreamCursor cur(RngStream{6, 0});
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t r = 2 + cur.next_below(4), c = 2 + cur.next_below(4);
        std::vector<std::vector<double>> p(r, std::vector<double>(c));
        double s = 0;
        for (auto& row : p)
            for (auto& v : row) s += v = cur.next_uniform();
        for (auto& row : p)
            for (auto& v : row) v /= s;
        const double exact = alpha_exact(p);
        EXPECT_NEAR(exact, alpha_brute(p), 1e-12);
        EXPECT_LE(alpha_set_ascent(p, {7, std::uint64_t(trial)}), exact + 1e-12);
        EXPECT_LE(exact, detail::beta_of(p) / 2 + 1e-12);
    }
}

TEST(Dependence, MarkovTwoByTwoExact) {
    // n = 1, k = 0: the sup is attained by single atoms, |P(00) - pi_0^2|.
    auto a = alpha_bracket(Partition::symbol(2), SystemSpec::markov(kM), 1, 0, SamplePlan::independent(100000), {8, 0});
    ASSERT_TRUE(a.exact);
    const double oracle = 2.0 / 3.0 * 0.9 - 4.0 / 9.0;
    EXPECT_NEAR(*a.exact, oracle, 0.01);
    EXPECT_LE(a.ascent_lower, *a.exact + 1e-12);
    EXPECT_LE(*a.exact, a.beta_upper + 1e-12);
}

TEST(Entropy, FairCoin) {
    auto h = block_entropy(Partition::symbol(2), SystemSpec::bernoulli({0.5, 0.5}), 4, SamplePlan::independent(50000), {9, 0});
    EXPECT_NEAR(h.estimate.mean, 1.0, 0.02);
}

TEST(Entropy, MarkovBlockAndConditional) {
    const double pi0 = 2.0 / 3.0;
    const double rate = pi0 * h2(0.1) + (1 - pi0) * h2(0.2);
    const double block8 = (h2(pi0) + 7 * rate) / 8; // exact H(X_0..X_7)/8 for a stationary chain
    auto spec = SystemSpec::markov(kM);
    auto h = block_entropy(Partition::symbol(2), spec, 8, SamplePlan::independent(100000), {10, 0});
    EXPECT_NEAR(h.estimate.mean, block8, 0.02);
    auto c = conditional_block_entropy(Partition::symbol(2), spec, 8, SamplePlan::independent(100000), {10, 0});
    EXPECT_NEAR(c.estimate.mean, rate, 0.02);
}

TEST(Entropy, SturmianIsNearZero) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto bd = block_distribution(Partition::sturmian(kAlpha), spec, 10, SamplePlan::independent(50000), {11, 0});
    EXPECT_EQ(bd.counts.size(), 11u);
    const double exact = entropy_of(bd, false).mean / 10;
    auto h = block_entropy(Partition::sturmian(kAlpha), spec, 10, SamplePlan::independent(50000), {11, 0});
    EXPECT_LE(exact, std::log2(11.0) / 10);
    EXPECT_NEAR(h.estimate.mean, exact, 0.02);
}

TEST(Transport, MatchesBruteForce) {
    StreamCursor cur(RngStream{12, 0});
    for (int trial = 0; trial < 25; ++trial) {
        const int m = 2 + int(cur.next_below(3)), k = 2 + int(cur.next_below(3));
        std::vector<int> s(m, 0), d(k, 0);
        for (int u = 0; u < 7; ++u) ++s[cur.next_below(m)], ++d[cur.next_below(k)];
        std::vector<std::vector<int>> c(m, std::vector<int>(k));
        for (auto& row : c)
            for (auto& v : row) v = int(cur.next_below(4));
        auto plan = solve_transport(std::vector<std::int64_t>(s.begin(), s.end()), std::vector<std::int64_t>(d.begin(), d.end()),
                                    [&](std::size_t i, std::size_t j) { return c[i][j]; });
        EXPECT_EQ(plan.cost, brute_transport(s, d, [&](int i, int j) { return c[i][j]; })) << trial;
    }
}

TEST(Dbar, KnownValues) {
    auto a = law(2, {{Word{0, 0}, 3}, {Word{0, 1}, 1}, {Word{1, 1}, 4}});
    EXPECT_EQ(dbar_block(a, a), 0.0);
    auto p5 = law(1, {{Word{0}, 5}, {Word{1}, 5}});
    auto p3 = law(1, {{Word{0}, 7}, {Word{1}, 3}});
    EXPECT_NEAR(dbar_block(p5, p3), 0.2, 1e-15);
    // All mass on 00 vs all on 11: every coordinate disagrees.
    EXPECT_EQ(dbar_block(law(2, {{Word{0, 0}, 1}}), law(2, {{Word{1, 1}, 2}})), 1.0);
}

TEST(Dbar, SampledBernoulliPair) {
    auto plan = SamplePlan::independent(50000);
    auto a = block_distribution(Partition::symbol(2), SystemSpec::bernoulli({0.5, 0.5}), 1, plan, {13, 0});
    auto b = block_distribution(Partition::symbol(2), SystemSpec::bernoulli({0.7, 0.3}), 1, plan, {13, 1});
    EXPECT_NEAR(dbar_block(a, b), 0.2, 0.02);
}

TEST(Dbar, BoundedByPartitionDistance) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto plan = SamplePlan::independent(20000);
    auto p = Partition::half_interval();
    auto q = Partition::indicator(SetQuery::interval(0.45, 0.95));
    auto d = partition_distance(p, q, spec, plan, {14, 0}).estimate;
    for (std::size_t n : {1, 2, 4}) {
        auto dbar = dbar_block(block_distribution(p, spec, n, plan, {14, 1}), block_distribution(q, spec, n, plan, {14, 1}));
        EXPECT_LE(dbar, d.mean + 3 * d.half_width) << n;
    }
}

TEST(FactorError, IdentityIsExact) {
    auto spec = SystemSpec::bernoulli({0.5, 0.5});
    auto e = factor_approx_error(Partition::symbol(2), Partition::symbol(2), spec, 2, SamplePlan::independent(20000), {15, 0});
    EXPECT_EQ(e.estimate.mean, 0.0);
}

TEST(FactorError, IndependentComponentIsHalf) {
    auto spec = SystemSpec::product(SystemSpec::rotation(kAlpha), SystemSpec::bernoulli({0.5, 0.5}));
    auto p = Partition::symbol(2, {1});
    auto q = Partition::half_interval({0});
    auto e = factor_approx_error(p, q, spec, 1, SamplePlan::independent(50000), {16, 0});
    EXPECT_NEAR(e.estimate.mean, 0.5, 3 * e.estimate.half_width + 0.01);
}

TEST(FactorError, HalfIntervalGeneratesSturmian) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto p = Partition::half_interval();
    auto q = Partition::sturmian(kAlpha);
    double prev = 1.0, prev_hw = 0.0;
    for (std::size_t n : {2, 4, 8, 12}) {
        auto e = factor_approx_error(p, q, spec, n, SamplePlan::independent(50000), {17, n}).estimate;
        EXPECT_LE(e.mean, prev + e.half_width + prev_hw) << n;
        prev = e.mean, prev_hw = e.half_width;
    }
    EXPECT_LE(prev, 0.05);
}

TEST(FactorError, ExplicitRule) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto q = Partition::sturmian(kAlpha);
    auto e = rule_error([](const Point& x) -> std::optional<Label> { return x.coordinate(0) >= 1 - kAlpha; }, q, spec,
                        SamplePlan::independent(1000), {18, 0});
    EXPECT_EQ(e.estimate.mean, 0.0);
}
