#pragma once

#include <cstdint>
#include <random>

namespace gtrend {

// splitmix64; used to fan a single user seed out into independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream) {
    return std::mt19937_64(mix_seed(seed, stream));
}

} // namespace gtrend
