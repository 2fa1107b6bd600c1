#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "json.hpp"

namespace cabin {

using Json = nlohmann::ordered_json;

/// Rounds to 6 decimals so serialized reports diff cleanly across runs.
inline double fixed6(double x) {
  if (!std::isfinite(x)) return x;
  const double r = std::round(x * 1e6) / 1e6;
  return r == 0.0 ? 0.0 : r;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace cabin
