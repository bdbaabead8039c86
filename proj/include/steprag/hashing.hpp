#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <string_view>

namespace steprag {

/// 64-bit FNV-1a. Stable across platforms; used for fingerprints and for
/// deriving per-call random streams.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t fingerprint(std::uint64_t seed, std::initializer_list<std::string_view> parts);

std::string hex(std::uint64_t value);

/// Random stream keyed by a fingerprint. mt19937_64 output is fixed by the
/// standard; the conversions below are spelled out so draws are identical
/// on every standard library.
class SeededStream {
 public:
  explicit SeededStream(std::uint64_t key) : engine_(key) {}

  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double normal();
  std::uint64_t next() { return engine_(); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace steprag
