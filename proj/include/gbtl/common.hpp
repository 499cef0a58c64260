#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gbtl {

using Scalar = double;

inline constexpr const char* kToolVersion = "0.1.0";

// Precondition/shape violations. Thrown as std::invalid_argument so CLI
// error reporting can distinguish bad inputs from runtime failures.
[[noreturn]] inline void fail_invalid(const std::string& msg) {
  throw std::invalid_argument(msg);
}

[[noreturn]] inline void fail_runtime(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail_invalid(msg);
}

// FNV-1a over bytes. Used for artifact staleness hashes and seed derivation,
// not for anything security-sensitive.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Stage seeds are a pure function of (master seed, stage name) so that two
// runs differing in one stage parameter share every upstream artifact.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& stage) {
  return splitmix64(master ^ fnv1a64(stage));
}

}  // namespace gbtl
