#include "bayesbeat/rng.hpp"

namespace bayesbeat {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

template <class T>
void fill_normal(std::span<T> out, std::uint64_t seed) {
  Engine engine(seed);
  std::normal_distribution<T> normal(T{0}, T{1});
  for (auto& v : out) v = normal(engine);
}

template void fill_normal<float>(std::span<float>, std::uint64_t);
template void fill_normal<double>(std::span<double>, std::uint64_t);

}  // namespace bayesbeat
