#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace msvad {

/// Seeded random generator with platform-stable draw mapping.
///
/// std::mt19937_64's raw output sequence is pinned by the standard, but the
/// standard distributions are not; all mappings from raw bits to values are
/// implemented here so that the same seed yields the same draws everywhere
/// and so that test oracles can replay the documented draw order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0,1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  /// Uniform in [lo, hi). Degenerate lo == hi returns lo.
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform01();
  }

  /// Uniform integer in [0, n). n must be > 0.
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform01() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller (one spare cached).
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform01();
    double u2 = uniform01();
    // avoid log(0)
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  /// Content-addressed derived stream: the same (seed, stream, index)
  /// always produces the same generator, independent of call order.
  static Rng derive(std::uint64_t seed, std::uint64_t stream,
                    std::uint64_t index) {
    std::uint64_t x = seed;
    x = splitmix(x + 0x9e3779b97f4a7c15ULL * (stream + 1));
    x = splitmix(x + 0xbf58476d1ce4e5b9ULL * (index + 1));
    return Rng(x);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace msvad
