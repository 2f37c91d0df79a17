#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nlcnn {

// All randomness in the pipeline flows from one root seed through named
// substreams, so that e.g. parameter initialization is reproducible
// independently of how many samples the epoch sampler has drawn, and a
// parameter's init does not depend on which other parameters exist.
//
// substream(seed, "init/conv1.weight") and substream(seed, "sample/epoch3")
// are independent deterministic generators.

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a64(name)));
}

}  // namespace nlcnn
