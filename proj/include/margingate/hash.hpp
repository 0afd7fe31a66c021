#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>

namespace margingate {

/// 64-bit FNV-1a. Used for cache digests, config hashes and file digests.
class Fnv1a64 {
 public:
  void update(std::span<const std::byte> bytes) noexcept {
    for (std::byte b : bytes) {
      h_ ^= static_cast<std::uint64_t>(b);
      h_ *= 0x100000001b3ull;
    }
  }
  void update(std::string_view s) noexcept { update(std::as_bytes(std::span(s.data(), s.size()))); }

  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void update_value(const T& value) noexcept {
    update(std::as_bytes(std::span(&value, 1)));
  }

  std::uint64_t value() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace margingate
