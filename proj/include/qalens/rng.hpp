#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace qalens {

namespace detail {

// splitmix64 finalizer (Steele et al.); full-avalanche 64-bit mix.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Counter-based generator: draw i of stream s under seed k is
// mix64(mix64(mix64(k) ^ s) ^ i). Stateless per draw, so identical seeds
// give identical sequences on every platform and streams can be split
// freely across workers without coordination.
struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t counter = 0;

    explicit RngState(std::uint64_t seed_ = 0, std::uint64_t stream_ = 0)
        : seed(seed_), stream(stream_) {}

    // Independent child stream; does not advance this state.
    RngState split(std::uint64_t substream) const {
        return RngState(seed, detail::mix64(stream ^ detail::mix64(substream + 1)));
    }

    std::uint64_t next_u64() {
        const std::uint64_t word =
            detail::mix64(detail::mix64(detail::mix64(seed) ^ stream) ^ counter);
        ++counter;
        return word;
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in {0, ..., n-1} via 128-bit multiply (no rejection loop).
    std::size_t next_below(std::size_t n) {
        const unsigned __int128 wide =
            static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
        return static_cast<std::size_t>(wide >> 64);
    }

    // Box-Muller, cosine branch only (keeps the draw count per call fixed).
    double next_normal() {
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

    // In-place Fisher-Yates.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[next_below(i)]);
        }
    }
};

}  // namespace qalens
