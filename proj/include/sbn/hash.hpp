#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace sbn {

// 64-bit FNV-1a. Used for checksums and reproducibility fingerprints.
class Fnv1a {
 public:
  void update(const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void update(std::span<const T> values) {
    update(values.data(), values.size_bytes());
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

template <typename T>
std::uint64_t fnv1a(std::span<const T> values) {
  Fnv1a h;
  h.update(values);
  return h.digest();
}

}  // namespace sbn
