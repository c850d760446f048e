#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace wmlab {

// Every random draw in the lab flows from one experiment seed through named
// sub-seeds, so reruns of any stage reproduce bit-identically even when other
// stages are skipped or reordered.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t root, std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a over the name, mixed with the root
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(root ^ splitmix64(h));
}

inline uint64_t derive_seed(uint64_t root, std::string_view name, uint64_t index) {
    return splitmix64(derive_seed(root, name) ^ splitmix64(index + 0x51ed2701ULL));
}

inline std::mt19937_64 make_rng(uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace wmlab
