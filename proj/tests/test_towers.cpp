#include <gtest/gtest.h>

#include <cmath>

#include "ergolab/montecarlo.hpp"
#include "ergolab/towers.hpp"

using namespace ergolab;

namespace {

const double kAlpha = std::sqrt(2.0) - 1.0;

// Independent column oracle: walk the orbit step by step to the surrounding base visits,
// then cut the column into r blocks of N+1 followed by blocks of N.
std::optional<Location> brute_locate(const Point& x, double a_hi, std::int64_t n) {
    auto in_a = [&](TimeIndex t) { return x.coordinate(t) < a_hi; };
    TimeIndex prev = 0;
    while (!in_a(prev)) --prev;
    TimeIndex next = 1;
    while (!in_a(next)) ++next;
    const std::int64_t h = next - prev, q = h / n, r = h % n;
    if (q < r) return std::nullopt;
    TimeIndex start = prev;
    std::int64_t size = 0;
    for (std::int64_t b = 0; b < q; ++b) {
        size = b < r ? n + 1 : n;
        if (0 < start + size) break;
        start += size;
    }
    return Location{-start, size, start, prev, h};
}

} // namespace

TEST(Blocks, Boundaries) {
    EXPECT_EQ(block_boundaries(27, 5), (std::vector<std::int64_t>{0, 6, 12, 17, 22}));
    EXPECT_EQ(block_boundaries(10, 5), (std::vector<std::int64_t>{0, 5}));
    EXPECT_EQ(block_boundaries(11, 5), (std::vector<std::int64_t>{0, 6}));
}

TEST(Towers, RotationHeightsAreNOrNPlusOne) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto tower = build_tower(spec, SetQuery::interval(0.0, 0.003), 10, 0, {1, 0});
    auto rep = verify_tower(*tower, SamplePlan::independent(10000), {2, 0});
    EXPECT_EQ(rep.unresolved_fraction, 0.0);
    for (const auto& [h, c] : rep.height_histogram) EXPECT_TRUE(h == 10 || h == 11) << h;
    EXPECT_EQ(rep.disjointness_violations, 0u);
}

TEST(Towers, LocateMatchesBruteForce) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto tower = build_tower(spec, SetQuery::interval(0.0, 0.003), 21, 0, {1, 0});
    for (std::uint64_t s = 0; s < 300; ++s) {
        auto x = sample_point(spec, {77, s});
        auto want = brute_locate(x, 0.003, 21);
        auto got = tower->locate(x);
        ASSERT_TRUE(want && got);
        EXPECT_EQ(*got, *want) << s;
    }
}

TEST(Towers, LevelsAdvanceAlongTheOrbit) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto tower = build_tower(spec, SetQuery::interval(0.0, 0.003), 21, 0, {1, 0});
    auto x = sample_point(spec, {3, 3});
    auto cur = tower->locate(x, -2000);
    ASSERT_TRUE(cur);
    for (TimeIndex t = -1999; t < 2000; ++t) {
        auto nxt = tower->locate(x, t);
        ASSERT_TRUE(nxt);
        if (cur->level + 1 < cur->height)
            EXPECT_EQ(nxt->level, cur->level + 1);
        else
            EXPECT_EQ(nxt->level, 0);
        EXPECT_EQ(*nxt, *tower->locate(x.shifted(t), 0));
        cur = nxt;
    }
}

TEST(Towers, BaseTooLargeIsNotSeparated) {
    try {
        build_tower(SystemSpec::rotation(kAlpha), SetQuery::interval(0.0, 0.1), 21, 0, {1, 0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NotSeparated);
    }
}

TEST(Towers, TinyBudgetIsReported) {
    try {
        build_tower(SystemSpec::rotation(kAlpha), SetQuery::interval(0.0, 0.003), 21, 5, {1, 0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ScanBudget);
    }
}

TEST(Towers, JsonRoundTripKeepsId) {
    auto tower = build_tower(SystemSpec::rotation(kAlpha), SetQuery::interval(0.0, 0.003), 21, 0, {1, 0});
    auto back = KRTower::from_json(tower->to_json());
    EXPECT_EQ(back->id(), tower->id());
    auto x = sample_point(tower->system(), {8, 8});
    EXPECT_EQ(*back->locate(x, 5), *tower->locate(x, 5));
}

TEST(Towers, FairCoinCylinderTower) {
    auto spec = SystemSpec::bernoulli({0.5, 0.5});
    std::vector<Symbol> word(17, 0);
    word.back() = 1;
    auto tower = build_tower(spec, SetQuery::cylinder(word), 21, 0, {4, 0});
    auto rep = verify_tower(*tower, SamplePlan::independent(4000), {5, 0});
    EXPECT_LE(rep.unresolved_fraction, 0.01);
    for (const auto& [h, c] : rep.height_histogram) EXPECT_TRUE(h == 21 || h == 22) << h;
    EXPECT_EQ(rep.disjointness_violations, 0u);
    EXPECT_LT(rep.level_uniformity_chi2, rep.chi2_critical_999);
}

TEST(Towers, MarkovTowerLocatesConsistently) {
    auto spec = SystemSpec::markov({{0.9, 0.1}, {0.2, 0.8}});
    auto base = default_base(spec, 8);
    auto tower = build_tower(spec, base, 8, 0, {6, 0});
    auto rep = verify_tower(*tower, SamplePlan::independent(2000), {7, 0});
    EXPECT_EQ(rep.disjointness_violations, 0u);
    for (const auto& [h, c] : rep.height_histogram) EXPECT_TRUE(h == 8 || h == 9) << h;
}

TEST(Towers, DefaultBaseForProductUsesRotationFactor) {
    auto spec = SystemSpec::product(SystemSpec::rotation(kAlpha), SystemSpec::bernoulli({0.5, 0.5}));
    auto base = default_base(spec, 21);
    auto m = base.measure(spec);
    ASSERT_TRUE(m);
    EXPECT_NEAR(*m, 1.0 / (2.0 * 21 * 21), 1e-15);
}

TEST(MonteCarlo, ThreadCountDoesNotChangeResults) {
    auto spec = SystemSpec::bernoulli({0.3, 0.7});
    struct Acc {
        double sum = 0;
        std::size_t n = 0;
        void merge(const Acc& o) { sum += o.sum, n += o.n; }
    };
    auto run = [&](unsigned threads, SamplingMode mode) {
        SamplePlan plan{20000, mode, 16, threads};
        return sample_reduce<Acc>(spec, plan, {11, 0}, [](const Point& x, std::size_t i, Acc& a) {
            a.sum += x.symbol(0) * 1.0 / double(i + 1);
            ++a.n;
        });
    };
    for (auto mode : {SamplingMode::independent, SamplingMode::orbit}) {
        auto a = run(1, mode), b = run(8, mode);
        EXPECT_EQ(a.n, 20000u);
        EXPECT_EQ(a.sum, b.sum);
    }
}

TEST(MonteCarlo, ProportionInterval) {
    auto e = ProbEstimate::proportion(250, 1000);
    EXPECT_DOUBLE_EQ(e.mean, 0.25);
    EXPECT_NEAR(e.half_width, 1.959963984540054 * std::sqrt(0.25 * 0.75 / 1000.0), 1e-15);
}
