#include <gtest/gtest.h>

#include <cmath>

#include "ergolab/perturbations.hpp"

using namespace ergolab;

namespace {

const double kAlpha = std::sqrt(2.0) - 1.0;

SystemSpec product_system() { return SystemSpec::product(SystemSpec::rotation(kAlpha), SystemSpec::bernoulli({0.5, 0.5})); }

Word bits(const std::string& s) {
    Word w;
    for (char c : s) w.push_back(static_cast<char>(c - '0'));
    return w;
}

NameWindow window_of(const std::string& s, TimeIndex offset = 0) {
    NameWindow w{offset, {}};
    for (char c : s) w.labels.push_back(static_cast<Label>(c - '0'));
    return w;
}

// Label the breaker assigns to a level, or nullopt where P is kept.
std::optional<Label> breaker_level(std::int64_t level, std::int64_t N) {
    if (level < N || (level > N && level <= 2 * N)) return 0;
    if (level == N) return 1;
    if (level % (N / 2) == 0 && level / (N / 2) > 4) return 1;
    return std::nullopt;
}

} // namespace

TEST(Rosenblatt, BlockSelection) {
    EXPECT_EQ(rosenblatt_block(10, 0.5), 22);
    EXPECT_EQ(rosenblatt_block(4, 1.0), 12);
    std::int64_t prev = rosenblatt_block(10, 0.05);
    for (double eps = 0.06; eps <= 1.0; eps += 0.01) {
        const auto N = rosenblatt_block(10, eps);
        EXPECT_LE(N, prev);
        EXPECT_EQ(N % 2, 0);
        EXPECT_GT(N, 10);
        EXPECT_LT(1.0 / static_cast<double>(N), eps / 10.0);
        prev = N;
    }
}

TEST(Markers, ExactAndRandomWindows) {
    const std::size_t N = 22;
    auto exact = window_of(std::string(N, '0') + "1" + std::string(N, '0'));
    EXPECT_EQ(marker_scan(exact, N), std::vector<std::size_t>{N});
    EXPECT_TRUE(marker_scan(window_of("0001000"), 4).empty());
    auto x = sample_point(SystemSpec::bernoulli({0.5, 0.5}), {3, 0});
    auto w = name_window(Partition::symbol(2), x, 0, 9999);
    EXPECT_TRUE(marker_scan(w, N).empty());
    // Overlapping candidates: only runs of at least N zeros on both sides count.
    auto two = window_of("000100010000100");
    EXPECT_EQ(marker_scan(two, 3), (std::vector<std::size_t>{3, 7}));
}

TEST(Rosenblatt, LevelPatternOnRotation) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto P = Partition::half_interval();
    auto r = rosenblatt_breaker(P, spec, 4, 1.0, {1, 0});
    ASSERT_EQ(r.N, 12);
    ASSERT_EQ(r.height, 432);
    auto x = sample_point(spec, {2, 0});
    std::size_t modified_in_column = 0;
    for (TimeIndex t = 0; t < 5000; ++t) {
        auto loc = r.tower->locate(x, t);
        ASSERT_TRUE(loc);
        const auto want = breaker_level(loc->level, r.N);
        EXPECT_EQ(label_at(r.Q, x, t), want ? *want : label_at(P, x, t));
        if (loc->level == 0) modified_in_column = 0;
        modified_in_column += want.has_value();
        EXPECT_LE(modified_in_column, static_cast<std::size_t>(2 * r.N + 1 + 6 * r.N));
    }
    auto d = partition_distance(P, r.Q, spec, SamplePlan::independent(20000), {3, 0}).estimate;
    const double bound = static_cast<double>(8 * r.N + 2) / static_cast<double>(3 * r.N * r.N);
    EXPECT_LT(d.mean - d.half_width, bound);
    EXPECT_LT(d.mean + d.half_width, 1.0);
}

TEST(Rosenblatt, ZeroPartitionChangesOnlyForcedOnes) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto zero = Partition(2, 0);
    auto r = rosenblatt_breaker(zero, spec, 4, 1.0, {1, 0});
    auto x = sample_point(spec, {4, 0});
    for (TimeIndex t = 0; t < 3000; ++t) {
        auto loc = r.tower->locate(x, t);
        const bool forced_one = loc->level == r.N || (loc->level % (r.N / 2) == 0 && loc->level / (r.N / 2) > 4);
        EXPECT_EQ(label_at(r.Q, x, t), Label(forced_one));
    }
}

TEST(Rosenblatt, MarkerGapsAndWitness) {
    auto spec = SystemSpec::rotation(kAlpha);
    auto r = rosenblatt_breaker(Partition::half_interval(), spec, 4, 1.0, {1, 0});
    auto x = sample_point(spec, {5, 0});
    auto w = name_window(r.Q, x, 0, 20 * r.height);
    auto pos = marker_scan(w, static_cast<std::size_t>(r.N));
    ASSERT_GE(pos.size(), 10u);
    for (std::size_t i = 1; i < pos.size(); ++i) {
        const auto gap = static_cast<std::int64_t>(pos[i] - pos[i - 1]);
        EXPECT_TRUE(gap == r.height || gap == r.height + 1) << gap;
    }
    auto rep = evaluate_witness(r.Q, spec, r.witness, *r.tower, 20000, {6, 0});
    const double n2 = static_cast<double>(r.N * r.N), h = static_cast<double>(r.height) + 0.5;
    EXPECT_NEAR(rep.muC.mean, (n2 - 2.0 * static_cast<double>(r.N)) / h, 3 * rep.muC.half_width + 1e-3);
    EXPECT_NEAR(rep.muD.mean, n2 / h, 3 * rep.muD.half_width + 1e-3);
    EXPECT_EQ(rep.muCD.mean, 0.0);
    EXPECT_EQ(rep.name_agreement(), 1.0);
    EXPECT_NEAR(rep.gap, rep.muC.mean * rep.muD.mean, 1e-12);
}

TEST(Rosenblatt, FairCoinTowerIsSeparated) {
    auto spec = SystemSpec::bernoulli({0.5, 0.5});
    auto r = rosenblatt_breaker(Partition::symbol(2), spec, 4, 1.0, {7, 0});
    auto rep = evaluate_witness(r.Q, spec, r.witness, *r.tower, SamplePlan::orbit(4000, 1 << 14), {8, 0});
    EXPECT_EQ(rep.muCD.mean, 0.0);
    EXPECT_EQ(rep.name_agreement(), 1.0);
    EXPECT_GT(rep.muC.mean, 0.2);
}

TEST(Allocator, LexicographicFirst) {
    std::set<Word> forbidden{bits("000"), bits("001"), bits("010"), bits("011")};
    EXPECT_EQ(codeword_allocator(forbidden, 2, 3, 2), (std::vector<Word>{bits("100"), bits("101")}));
    auto all = codeword_allocator({}, 3, 2, 9);
    ASSERT_EQ(all.size(), 9u);
    EXPECT_TRUE(std::is_sorted(all.begin(), all.end()));
    EXPECT_EQ(std::set<Word>(all.begin(), all.end()).size(), 9u);
    try {
        codeword_allocator(forbidden, 2, 3, 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientCodewords);
    }
}

TEST(Allocator, CrossBifixFreeFamily) {
    auto words = codeword_allocator({}, 2, 12, 40, cross_bifix_free(3));
    ASSERT_EQ(words.size(), 40u);
    EXPECT_TRUE(std::is_sorted(words.begin(), words.end()));
    for (const auto& u : words)
        for (const auto& v : words)
            for (std::size_t j = 1; j < u.size(); ++j) EXPECT_NE(u.substr(0, j), v.substr(v.size() - j)) << word_digits(u) << " " << word_digits(v);
}

TEST(Allocator, HammingNeighbourhood) {
    auto out = with_hamming_neighbours({bits("000")}, 2);
    EXPECT_EQ(out, (std::set<Word>{bits("000"), bits("100"), bits("010"), bits("001")}));
}

class Encoding : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        spec_ = new SystemSpec(product_system());
        result_ = new EncodeResult(encode_factor(P(), Q(), *spec_, 0.5, 300, {11, 0}));
    }
    static void TearDownTestSuite() {
        delete result_;
        delete spec_;
    }
    static Partition P() { return Partition::symbol(2, {1}); }
    static Partition Q() { return Partition::sturmian(kAlpha, {0}); }
    static SystemSpec* spec_;
    static EncodeResult* result_;
};

SystemSpec* Encoding::spec_ = nullptr;
EncodeResult* Encoding::result_ = nullptr;

TEST_F(Encoding, CodebookShape) {
    const auto& cb = result_->codebook;
    EXPECT_EQ(cb.N, 22);
    EXPECT_LE(static_cast<double>(cb.L), 0.5 * 300 / 5.0);
    EXPECT_LE(cb.names.size(), cb.reserved());
    EXPECT_GE(std::pow(2.0, static_cast<double>(cb.L)), static_cast<double>(cb.names.size() + 1));
    // A Sturmian coding has at most m+1 words of length m.
    EXPECT_LE(cb.names.size(), 2u * 302u);
}

TEST_F(Encoding, ColumnLayout) {
    const auto& cb = result_->codebook;
    auto x = sample_point(*spec_, {12, 0});
    for (TimeIndex t = 0; t < 3000; ++t) {
        auto loc = result_->tower->locate(x, t);
        ASSERT_TRUE(loc);
        const auto h = loc->height, lev = loc->level;
        const auto half = h == 300 ? 22 : 44;
        const Label got = label_at(result_->Pp, x, t);
        if (lev <= 2 * half)
            EXPECT_EQ(got, Label(lev == half));
        else if ((lev - 2 * half) % 11 == 0)
            EXPECT_EQ(got, 1);
        else if (cb.free_index(lev, h) >= static_cast<std::int64_t>(cb.L))
            EXPECT_EQ(got, label_at(P(), x, t));
    }
}

TEST_F(Encoding, RoundTripAndMarkerSoundness) {
    const auto& cb = result_->codebook;
    std::size_t ok = 0, reserved = 0, resolved = 0, false_pos = 0;
    for (std::uint64_t i = 0; i < 300; ++i) {
        auto x = sample_point(*spec_, {13, i});
        auto w = try_name_window(result_->Pp, x, -2 * 301, 2 * 301);
        if (!w) continue;
        ++resolved;
        false_pos += false_markers(*w, cb, *result_->tower, x).value_or(1);
        auto d = decode_factor(*w, cb, cb.N);
        if (auto* f = std::get_if<DecodeFailure>(&d)) {
            reserved += f->reason == DecodeFailureReason::ReservedCodeword;
            continue;
        }
        const auto& b = std::get<DecodedBlock>(d);
        auto loc = result_->tower->locate(x);
        EXPECT_EQ(b.column_start, loc->block_start_time);
        EXPECT_EQ(b.height, loc->height);
        ok += b.q_block == detail::label_word(Q(), x, b.column_start, b.column_start + b.height - 1);
    }
    EXPECT_GE(resolved, 297u);
    EXPECT_EQ(false_pos, 0u);
    EXPECT_GE(static_cast<double>(ok), 0.99 * static_cast<double>(resolved - reserved));
}

TEST_F(Encoding, FailureModes) {
    const auto& cb = result_->codebook;
    auto x = sample_point(*spec_, {14, 0});
    auto raw = name_window(P(), x, -700, 700);
    auto d = decode_factor(raw, cb, cb.N);
    ASSERT_TRUE(std::holds_alternative<DecodeFailure>(d));
    EXPECT_EQ(std::get<DecodeFailure>(d).reason, DecodeFailureReason::NoHeader);

    Codebook empty = cb;
    empty.code.clear();
    empty.names.clear();
    auto rule = std::make_shared<const FactorCodeRule>(result_->tower, Q(), std::make_shared<const Codebook>(empty));
    auto pp = P().with_layer(ColumnRuleRef(rule));
    auto w = name_window(pp, x, -700, 700);
    d = decode_factor(w, empty, cb.N);
    ASSERT_TRUE(std::holds_alternative<DecodeFailure>(d));
    EXPECT_EQ(std::get<DecodeFailure>(d).reason, DecodeFailureReason::ReservedCodeword);
}

TEST_F(Encoding, BudgetAndJson) {
    auto d = partition_distance(P(), result_->Pp, *spec_, SamplePlan::independent(10000), {15, 0}).estimate;
    EXPECT_LT(d.mean + d.half_width, 0.5);
    auto doc = result_->Pp.to_json_document();
    auto back = Partition::from_json_document(Json::parse(doc.dump()));
    EXPECT_EQ(back.to_json_document().dump(), doc.dump());
    auto x = sample_point(*spec_, {16, 0});
    for (TimeIndex t = -400; t < 400; ++t) EXPECT_EQ(label_at(back, x, t), label_at(result_->Pp, x, t));
}

TEST(Relabel, GeneratorRelabelOnProduct) {
    auto spec = product_system();
    auto P = Partition::symbol(2, {1});
    auto Q = Partition::sturmian(kAlpha, {0});
    const double eps = 0.5;
    auto r = generator_relabel(P, Q, spec, eps, 120, {21, 0});
    const auto& cb = r.codebooks;
    EXPECT_EQ(cb.L, 20u);
    EXPECT_LE(static_cast<double>(r.max_refinements), r.refinement_bound);

    // Codewords avoid every observed length-L block.
    auto blocks = block_distribution(P, spec, cb.L, SamplePlan::independent(3000), {22, 0});
    for (const auto& w : cb.c_words) EXPECT_EQ(blocks.counts.count(w), 0u);
    for (const auto& w : cb.d_words) EXPECT_EQ(blocks.counts.count(w), 0u);

    // The first L levels of each column spell a codeword.
    auto x = sample_point(spec, {23, 0});
    std::set<Word> all(cb.c_words.begin(), cb.c_words.end());
    all.insert(cb.d_words.begin(), cb.d_words.end());
    for (TimeIndex t = 0; t < 2000; ++t) {
        auto loc = r.tower->locate(x, t);
        if (loc->level != 0) continue;
        auto w = detail::label_word(r.Phat, x, t, t + static_cast<TimeIndex>(cb.L) - 1);
        EXPECT_TRUE(all.count(*w));
    }

    auto plan = SamplePlan::independent(3000);
    auto exc = exceptional_fraction(r, spec, plan, {24, 0}).estimate;
    EXPECT_LE(exc.mean, eps / 3.0);
    auto d = partition_distance(P, r.Phat, spec, plan, {25, 0}).estimate;
    EXPECT_LT(d.mean + d.half_width, eps);
    RelabelDecoder dec(cb);
    auto err = rule_error(dec.rule(r.Phat, 130), Q, spec, plan, {26, 0}).estimate;
    EXPECT_LE(err.mean, 0.1);

    auto back = Partition::from_json_document(Json::parse(r.Phat.to_json_document().dump()));
    for (TimeIndex t = 0; t < 500; ++t) EXPECT_EQ(label_at(back, x, t), label_at(r.Phat, x, t));
}

TEST(Relabel, FullEntropyShortCodewordsExhausted) {
    auto spec = product_system();
    try {
        generator_relabel(Partition::symbol(2, {1}), Partition::sturmian(kAlpha, {0}), spec, 0.2, 60, {27, 0});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InsufficientCodewords);
    }
}
