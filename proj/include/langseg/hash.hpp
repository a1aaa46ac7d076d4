#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace langseg {

// 64-bit FNV-1a. Stable across runs and platforms; used for digests,
// per-name RNG streams and label colours.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const unsigned char> bytes) {
    for (unsigned char b : bytes) {
      state_ ^= b;
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view s) {
    return update({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
  }
  template <typename T>
  Fnv1a& update_pod(const T& v) {
    return update({reinterpret_cast<const unsigned char*>(&v), sizeof(T)});
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a64(std::string_view s) { return Fnv1a().update(s).digest(); }

// splitmix64 finaliser; decorrelates nearby seeds before they reach an RNG.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace langseg
