#include "mce/rng.hpp"

namespace mce {

uint64_t Rng::below(uint64_t n) {
  if (n <= 1) return 0;
  // Rejection below the largest multiple of n to avoid modulo bias.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t derive_seed(uint64_t base, std::string_view stream) {
  return splitmix64(base ^ splitmix64(fnv1a(stream)));
}

uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t index) {
  return splitmix64(derive_seed(base, stream) ^ splitmix64(index + 0x51ed2701ULL));
}

}  // namespace mce
