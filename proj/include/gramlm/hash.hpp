#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace gramlm {

// FNV-1a 64; used for provenance headers, where the value must be stable
// across platforms and standard library implementations.
class Fnv1a {
 public:
  Fnv1a& update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= 0x100000001B3ULL;
    }
    return *this;
  }
  std::uint64_t value() const { return state_; }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

inline std::string hash_hex(std::string_view bytes) {
  return Fnv1a{}.update(bytes).hex();
}

}  // namespace gramlm
