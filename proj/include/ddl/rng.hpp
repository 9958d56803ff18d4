#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "ddl/errors.hpp"

namespace ddl {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seeded generator with platform-stable draws. The standard distributions are
// implementation-defined, so the conversions from raw engine output are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(splitmix64(seed)) {}

  // Independent stream for a named purpose (data order, noise, masks, ...).
  static Rng stream(std::uint64_t seed, std::uint64_t purpose) {
    return Rng(splitmix64(seed) ^ splitmix64(purpose * 0x632be59bd9b4e019ULL + 1));
  }

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection-sampled (no modulo bias).
  std::uint64_t below(std::uint64_t n) {
    expects(n > 0, "Rng::below requires n > 0");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do r = engine_();
    while (r >= limit);
    return r % n;
  }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
  }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (!is) throw IngestError("corrupt rng state");
  }

  friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ddl
