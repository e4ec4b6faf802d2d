#pragma once

// Counter-based Philox4x32-10 streams. A draw is a pure function of
// (seed, stream_id, counter), so a speaker's noise sequence never depends on
// which other streams were consumed before it.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "nanovoice/tensor.hpp"

namespace nanovoice {

namespace detail {

inline std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                                   std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u, kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u, kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
        const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
        ctr = {static_cast<std::uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<std::uint32_t>(p1),
               static_cast<std::uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<std::uint32_t>(p0)};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

// 53 random bits mapped into the open interval (0, 1).
inline double to_unit_open(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t bits = ((std::uint64_t{hi} << 32) | lo) >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

}  // namespace detail

struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t stream_id = 0;
    std::uint64_t counter = 0;

    /// Raw 128-bit block at the current counter; advances by one.
    std::array<std::uint32_t, 4> next_block() {
        const std::array<std::uint32_t, 4> ctr{
            static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32),
            static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32)};
        const std::array<std::uint32_t, 2> key{static_cast<std::uint32_t>(seed),
                                               static_cast<std::uint32_t>(seed >> 32)};
        ++counter;
        return detail::philox4x32_10(ctr, key);
    }

    /// Uniform in (0, 1); consumes one block.
    double uniform() {
        const auto b = next_block();
        return detail::to_unit_open(b[0], b[1]);
    }

    /// Uniform integer in [0, n); consumes one block.
    std::uint64_t below(std::uint64_t n) {
        const auto b = next_block();
        const std::uint64_t x = (std::uint64_t{b[0]} << 32) | b[1];
        return n ? x % n : 0;
    }

    /// Two independent standard normals (Box-Muller); consumes one block.
    std::array<double, 2> normal_pair() {
        const auto b = next_block();
        const double u1 = detail::to_unit_open(b[0], b[1]);
        const double u2 = detail::to_unit_open(b[2], b[3]);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double th = 2.0 * std::numbers::pi * u2;
        return {r * std::cos(th), r * std::sin(th)};
    }

    double normal() { return normal_pair()[0]; }

    /// Stream for a derived purpose (e.g. a sub-task keyed by a tag) with fresh counter.
    RngStream derive(std::uint64_t tag) const {
        auto mix = [](std::uint64_t z) {
            z += 0x9E3779B97F4A7C15ull;
            z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
            z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
            return z ^ (z >> 31);
        };
        return RngStream{mix(seed ^ mix(tag)), stream_id, 0};
    }
};

/// I.i.d. standard normal tensor; consumes ceil(numel/2) blocks of `stream`.
inline Tensor randn(RngStream& stream, const Shape& shape) {
    Tensor t(shape);
    double* d = t.data();
    const std::size_t n = t.size();
    for (std::size_t i = 0; i < n; i += 2) {
        const auto z = stream.normal_pair();
        d[i] = z[0];
        if (i + 1 < n) d[i + 1] = z[1];
    }
    return t;
}

}  // namespace nanovoice
