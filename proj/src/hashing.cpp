#include "steprag/hashing.hpp"

#include <cmath>
#include <numbers>

namespace steprag {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fingerprint(std::uint64_t seed, std::initializer_list<std::string_view> parts) {
  std::uint64_t h = fnv1a(std::string_view(reinterpret_cast<const char*>(&seed), sizeof seed));
  for (auto part : parts) {
    h = fnv1a(part, h);
    h = fnv1a(std::string_view("\x1f", 1), h);  // unit separator keeps ("ab","c") != ("a","bc")
  }
  return h;
}

std::string hex(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xf];
    value >>= 4;
  }
  return out;
}

double SeededStream::normal() {
  // Box-Muller; u1 is kept away from zero.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace steprag
