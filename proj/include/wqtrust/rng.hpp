#pragma once

#include <cstdint>

namespace wqt {

/// SplitMix64 finaliser; used to decorrelate small integer seeds.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Cheap in-process sub-seed for loops (basin index, run index, ...).
/// Reportable seeds come from harness::seed_stream instead.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    return splitmix64(splitmix64(seed ^ splitmix64(a + 0x632be59bd9b4e019ULL)) + b);
}

} // namespace wqt
