#pragma once

#include <cstdint>
#include <random>

namespace audit {

// splitmix64 step; used to derive decorrelated substream seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Seed for substream `a` of the stream identified by `base`. Stable under
// reordering of other substreams: derive_seed(s, a) never depends on b != a.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a) {
    std::uint64_t s = base ^ (0xbf58476d1ce4e5b9ULL * (a + 1));
    return splitmix64(s);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return derive_seed(derive_seed(base, a), b);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                                 std::uint64_t c) {
    return derive_seed(derive_seed(base, a, b), c);
}

// mt19937_64 has a sequence pinned by the standard, which keeps replays
// byte-identical across platforms. The <random> distributions are not pinned,
// so uniforms are generated by hand below.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_in(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

// Unbiased integer in [0, n), n > 0. Rejection sampling avoids modulo bias.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
        const std::uint64_t r = rng();
        if (r >= threshold) return r % n;
    }
}

}  // namespace audit
