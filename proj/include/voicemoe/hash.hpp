#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace voicemoe {

// FNV-1a 64-bit, used for checkpoint integrity and split fingerprints.
class Fnv1a64 {
 public:
  void update(const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      state_ ^= static_cast<std::uint64_t>(p[i]);
      state_ *= 0x100000001b3ull;
    }
  }

  std::uint64_t digest() const { return state_; }

  std::string hex() const {
    static const char* k = "0123456789abcdef";
    std::string s(16, '0');
    std::uint64_t v = state_;
    for (int i = 15; i >= 0; --i) {
      s[static_cast<std::size_t>(i)] = k[v & 0xf];
      v >>= 4;
    }
    return s;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes) {
  Fnv1a64 h;
  h.update(bytes.data(), bytes.size());
  return h.digest();
}

}  // namespace voicemoe
