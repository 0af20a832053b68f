#pragma once

// Deterministic chunked Monte Carlo.
//
// Samples are partitioned by index into chunks of kChunkSize. Each chunk is processed
// sequentially into its own accumulator; accumulators are merged in chunk-index order.
// The result is therefore identical for every thread count.
//
// Two sampling modes:
//   independent - sample i is sample_point(spec, rng.child(i));
//   orbit       - chunk c draws one point x_c = sample_point(spec, rng.child(c)) and its
//                 samples are T^{t_j} x_c at times t_0 = 0, t_{j+1} = t_j + 1 + U{0..2g-1}.
//                 Every sample is still mu-distributed; samples within a chunk share the
//                 orbit, so expensive tower location work is amortized.

#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "error.hpp"
#include "rng.hpp"
#include "systems.hpp"

namespace ergolab {

inline constexpr std::size_t kChunkSize = 4096;
inline constexpr double kZ975 = 1.959963984540054;

// Mean with a 95% normal-approximation interval: half_width = z_{0.975} * sqrt(variance / n).
struct ProbEstimate {
    double mean = 0.0;
    double half_width = 0.0;
    std::size_t n_samples = 0;

    double lower() const noexcept { return mean - half_width; }
    double upper() const noexcept { return mean + half_width; }

    Json to_json() const { return Json{{"mean", mean}, {"half_width", half_width}, {"n_samples", n_samples}}; }

    static ProbEstimate from_moments(double mean, double variance, std::size_t n) {
        const double v = std::max(variance, 0.0);
        return {mean, n > 0 ? kZ975 * std::sqrt(v / static_cast<double>(n)) : 0.0, n};
    }

    static ProbEstimate proportion(std::size_t hits, std::size_t n) {
        if (n == 0) return {0.0, 0.0, 0};
        const double p = static_cast<double>(hits) / static_cast<double>(n);
        return from_moments(p, p * (1.0 - p), n);
    }
};

enum class SamplingMode { independent, orbit };

struct SamplePlan {
    std::size_t samples = 10000;
    SamplingMode mode = SamplingMode::independent;
    std::int64_t orbit_gap = 256;
    unsigned threads = 1;

    static SamplePlan independent(std::size_t n, unsigned threads = 1) {
        return {n, SamplingMode::independent, 256, threads};
    }
    static SamplePlan orbit(std::size_t n, std::int64_t gap, unsigned threads = 1) {
        return {n, SamplingMode::orbit, gap, threads};
    }

    Json to_json() const {
        return Json{{"samples", samples},
                    {"mode", mode == SamplingMode::orbit ? "orbit" : "independent"},
                    {"orbit_gap", orbit_gap}};
    }

    static SamplePlan from_json(const Json& j, std::size_t default_samples) {
        SamplePlan p;
        p.samples = j.value("samples", default_samples);
        const auto mode = j.value("mode", std::string("independent"));
        require(mode == "independent" || mode == "orbit", ErrorCode::InvalidConfig, "sampling mode must be independent|orbit");
        p.mode = mode == "orbit" ? SamplingMode::orbit : SamplingMode::independent;
        p.orbit_gap = j.value("orbit_gap", std::int64_t{256});
        require(p.orbit_gap >= 1, ErrorCode::InvalidConfig, "orbit_gap must be >= 1");
        return p;
    }
};

// Runs body(chunk_index) for every chunk on `threads` workers; rethrows the first failure.
template <class Body> void for_each_chunk(std::size_t n_chunks, unsigned threads, Body&& body) {
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n_chunks, 1))));
    if (threads == 1) {
        for (std::size_t c = 0; c < n_chunks; ++c) body(c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < threads; ++w)
        pool.emplace_back([&] {
            for (std::size_t c = next++; c < n_chunks; c = next++) {
                try {
                    body(c);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

// fn(const Point& x, std::size_t sample_index, Acc& acc) for every sample; Acc needs a
// default constructor and merge(const Acc&).
template <class Acc, class Fn>
Acc sample_reduce(const SystemSpec& spec, const SamplePlan& plan, const RngStream& rng, Fn&& fn) {
    const std::size_t n_chunks = (plan.samples + kChunkSize - 1) / kChunkSize;
    std::vector<Acc> parts(n_chunks);
    for_each_chunk(n_chunks, plan.threads, [&](std::size_t c) {
        const std::size_t begin = c * kChunkSize;
        const std::size_t end = std::min(plan.samples, begin + kChunkSize);
        Acc& acc = parts[c];
        if (plan.mode == SamplingMode::independent) {
            for (std::size_t i = begin; i < end; ++i) fn(sample_point(spec, rng.child(i)), i, acc);
        } else {
            const Point base = sample_point(spec, rng.child(c));
            StreamCursor gaps(rng.child(c).child(0xC0FFEE));
            TimeIndex t = 0;
            for (std::size_t i = begin; i < end; ++i) {
                fn(base.shifted(t), i, acc);
                t += 1 + static_cast<TimeIndex>(gaps.next_below(static_cast<std::uint64_t>(2 * plan.orbit_gap)));
            }
        }
    });
    Acc total;
    for (const auto& p : parts) total.merge(p);
    return total;
}

} // namespace ergolab
