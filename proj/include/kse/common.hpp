#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kse {

// Single exception type for recoverable library errors. Messages are
// meant to be matched loosely by callers and tests.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// FNV-1a, used for config hashes and seed substreams. Stable across
// platforms, unlike std::hash.
inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Named RNG substream: every stochastic component draws from its own
// stream so commands can be re-run independently with the same seed.
inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = fnv1a(name);
  return std::mt19937_64(seed ^ h);
}

void log_warn(const std::string& msg);
void log_info(const std::string& msg);

}  // namespace kse
