#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedmid {

using Rng = std::mt19937_64;

// Named stream tags. Every random draw in a simulation comes from a generator
// seeded by derive_seed(master, tag, ...), so results never depend on the
// order in which threads consume randomness.
enum class Stream : std::uint64_t {
    Partition = 1,
    Attackers = 2,
    Sampling = 3,
    LocalTrain = 4,
    Probe = 5,
    Poison = 6,
    Init = 7,
    Bucketing = 8,
    Dnc = 9,
    RootData = 10,
    DeskData = 11,
    AdaptiveProbe = 12,
    Diagnostics = 13,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, Stream tag,
                                 std::initializer_list<std::uint64_t> keys = {}) {
    std::uint64_t h = splitmix64(master ^ splitmix64(static_cast<std::uint64_t>(tag)));
    for (const auto k : keys) h = splitmix64(h ^ splitmix64(k + 0x632be59bd9b4e019ULL));
    return h;
}

inline Rng make_rng(std::uint64_t master, Stream tag, std::initializer_list<std::uint64_t> keys = {}) {
    return Rng(derive_seed(master, tag, keys));
}

}  // namespace fedmid
