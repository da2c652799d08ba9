#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>

#include "riskeval/stats.hpp"

namespace riskeval {

// Counter-based seed derivation: every consumer of randomness owns a Stream
// obtained from a master seed plus a tag path, never a shared generator.
// Identical (seed, path) pairs yield identical streams on every platform and
// with any worker count, which is what makes whole-run reproducibility hold.

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Folds a tag path into a master seed. derive(s, {a, b}) != derive(s, {b, a}).
template <typename It>
inline std::uint64_t derive_seed_range(std::uint64_t master, It first, It last) {
    std::uint64_t h = master;
    h = splitmix64(h);
    for (; first != last; ++first) {
        h ^= *first + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
        h = splitmix64(h);
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t master,
                                 std::initializer_list<std::uint64_t> path) {
    return derive_seed_range(master, path.begin(), path.end());
}

// xoshiro256++ with splitmix64 state expansion. Passes BigCrush; 2^256 - 1
// period is far beyond anything a single run can exhaust.
class Stream {
  public:
    explicit Stream(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result =
            rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform on the open interval (0, 1); never returns 0 or 1, so it is
    // always safe to push through a quantile function. The top 53-bit word
    // alone would round to 1.0 (2^53 - 0.5 is not representable), hence the
    // clamp to the largest double below one.
    double u01() {
        const double v =
            (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
        return std::fmin(v, 0x1.fffffffffffffp-1);
    }

    // Standard normal via the inverse CDF; one u01 consumed per draw.
    double normal() { return normal_quantile(u01()); }

    // Uniform integer in [0, n). Rejection-free modulo bias is negligible
    // for the n used here, but do it right anyway (Lemire's method).
    std::uint64_t below(std::uint64_t n) {
        __uint128_t m = static_cast<__uint128_t>(next_u64()) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0ULL - n) % n;
            while (lo < threshold) {
                m = static_cast<__uint128_t>(next_u64()) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::array<std::uint64_t, 4> state_{};
};

// Tags for the fixed derivation paths used across the library. Keeping them
// in one table prevents two call sites from colliding on the same stream.
namespace stream_tag {
inline constexpr std::uint64_t kNaiveDraw = 0x01;
inline constexpr std::uint64_t kAmsInit = 0x02;
inline constexpr std::uint64_t kAmsResample = 0x03;
inline constexpr std::uint64_t kAmsMcmc = 0x04;
inline constexpr std::uint64_t kRequestSeed = 0x05;
inline constexpr std::uint64_t kFlowInit = 0x06;
inline constexpr std::uint64_t kFlowShuffle = 0x07;
inline constexpr std::uint64_t kFlowSample = 0x08;
inline constexpr std::uint64_t kImportance = 0x09;
inline constexpr std::uint64_t kKmeans = 0x0A;
inline constexpr std::uint64_t kRepeat = 0x0B;
inline constexpr std::uint64_t kSampleCli = 0x0C;
}  // namespace stream_tag

}  // namespace riskeval
