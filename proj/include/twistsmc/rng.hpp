#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "twistsmc/errors.hpp"

namespace twistsmc {

/**
 * Counter-based random stream (SplitMix64 construction): the n-th output is a
 * pure function of (key, n), so streams can be forked by key derivation with
 * no shared state. Keys for independent streams are derived with substream(),
 * which hashes the parent key together with up to three labels. Cloning the
 * object clones the stream position exactly.
 */
class RngStream {
 public:
  RngStream() : key_(0), counter_(0) {}
  explicit RngStream(std::uint64_t key) : key_(key), counter_(0) {}

  static RngStream from_seed(std::uint64_t seed) {
    return RngStream(mix64(seed + kGamma));
  }

  RngStream substream(std::uint64_t a, std::uint64_t b = 0,
                      std::uint64_t c = 0) const {
    std::uint64_t k = key_;
    k = mix64(k ^ mix64(a + 1 * kGamma));
    k = mix64(k ^ mix64(b + 2 * kGamma));
    k = mix64(k ^ mix64(c + 3 * kGamma));
    return RngStream(k);
  }

  std::uint64_t key() const { return key_; }

  std::uint64_t next_u64() {
    counter_ += 1;
    return mix64(key_ + counter_ * kGamma);
  }

  // [0, 1), 53-bit mantissa
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // (0, 1), safe for log()
  double uniform_open() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  int uniform_int(int n) {
    if (n <= 0) throw BadInput("uniform_int: n must be positive");
    int r = static_cast<int>(uniform01() * static_cast<double>(n));
    return r >= n ? n - 1 : r;
  }

  double normal() {
    // Box-Muller, two fresh uniforms per call
    double u1 = uniform_open();
    double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Marsaglia-Tsang; shape < 1 handled via the boost identity
  double gamma(double shape) {
    if (!(shape > 0.0)) throw BadInput("gamma: shape must be positive");
    if (shape < 1.0) {
      double u = uniform_open();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform_open();
      double x2 = x * x;
      if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
      if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

  static std::uint64_t mix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ULL;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

// Stream labels used by the engine so that proposal draws, resampling, and
// pinned-index draws never share a stream.
namespace rngtag {
inline constexpr std::uint64_t proposal = 0x70726f70;
inline constexpr std::uint64_t resample = 0x72657361;
inline constexpr std::uint64_t pin = 0x70696e00;
inline constexpr std::uint64_t lower_bound = 0x6c620000;
inline constexpr std::uint64_t upper_bound = 0x75620000;
inline constexpr std::uint64_t exact_sample = 0x65786163;
inline constexpr std::uint64_t select = 0x73656c00;
inline constexpr std::uint64_t train = 0x7472696e;
inline constexpr std::uint64_t eval = 0x6576616c;
}  // namespace rngtag

}  // namespace twistsmc
