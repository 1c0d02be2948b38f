#pragma once

// Code version identity, recorded into every experiment artifact so a result
// file names the build that produced it.

#include <cstdio>
#include <string>

#include "rng.hpp"

namespace propl {

inline constexpr const char* kVersion = "propl 0.1.0";

// Short content hash of the version string (hex, 16 chars).
inline std::string version_hash() {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(kVersion)));
  return std::string(buf);
}

}  // namespace propl
