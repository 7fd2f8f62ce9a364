#pragma once

#include <cstdint>
#include <random>
#include <span>

namespace bayesbeat {

/// Derives an independent 64-bit stream seed from a base seed and up to three
/// stream coordinates (splitmix64 chaining).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

using Engine = std::mt19937_64;

/// Fills `out` with standard-normal samples from the stream `seed`.
template <class T>
void fill_normal(std::span<T> out, std::uint64_t seed);

extern template void fill_normal<float>(std::span<float>, std::uint64_t);
extern template void fill_normal<double>(std::span<double>, std::uint64_t);

}  // namespace bayesbeat
