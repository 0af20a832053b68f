#pragma once

// Counter-based random streams.
//
// A stream is identified by (seed, stream_id). Its key is
//     key = mix64(seed ^ mix64(stream_id + kGolden))
// and the i-th 64-bit draw of the stream is
//     bits(i) = mix64(key + i * kGolden)
// where mix64 is the splitmix64 finalizer. Draws are random access: any index can be
// evaluated without touching the others, which is what lets shift points extend their
// materialized windows in either direction reproducibly.

#include <cmath>
#include <cstdint>

namespace ergolab {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Uniform double in [0, 1) from the top 53 bits.
constexpr double to_unit(std::uint64_t bits) noexcept {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;

    constexpr std::uint64_t key() const noexcept {
        return mix64(seed ^ mix64(stream_id + kGolden));
    }

    // Sub-stream i of this stream; sub-streams of distinct parents or indices are distinct.
    constexpr RngStream child(std::uint64_t i) const noexcept {
        return RngStream{seed, mix64(key() ^ mix64(i * kGolden + 0x632BE59BD9B4E019ULL))};
    }

    constexpr std::uint64_t bits(std::uint64_t i) const noexcept { return mix64(key() + i * kGolden); }
    constexpr double uniform(std::uint64_t i) const noexcept { return to_unit(bits(i)); }

    friend constexpr bool operator==(const RngStream&, const RngStream&) = default;
};

// Sequential view over a stream, for code that just wants "the next number".
class StreamCursor {
public:
    explicit StreamCursor(RngStream s) : key_(s.key()) {}

    std::uint64_t next_bits() noexcept { return mix64(key_ + (counter_++) * kGolden); }
    double next_uniform() noexcept { return to_unit(next_bits()); }
    // Uniform integer in [0, n).
    std::uint64_t next_below(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>(next_uniform() * static_cast<double>(n)) % n;
    }

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace ergolab
