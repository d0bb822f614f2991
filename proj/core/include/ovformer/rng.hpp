#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace ovf {

// Splitmix64 step; used to derive independent sub-streams from one seed so
// that per-video / per-class generation is order-independent.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t hash64(std::string_view s) {
    // FNV-1a, then one splitmix round to spread low entropy inputs.
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return splitmix64(h);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

inline uint64_t mix_seed(uint64_t seed, std::string_view name) {
    return mix_seed(seed, hash64(name));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace ovf
