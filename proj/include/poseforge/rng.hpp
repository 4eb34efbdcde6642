#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace poseforge {

// Philox4x32-10 counter-based generator. Chosen because draw i of stream s is
// a pure function of (seed, s, i): parallel workers can consume disjoint
// streams and reproduce results regardless of scheduling.

namespace detail {

struct Philox4x32 {
  static constexpr std::uint32_t kM0 = 0xD2511F53u;
  static constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kW0 = 0x9E3779B9u;
  static constexpr std::uint32_t kW1 = 0xBB67AE85u;

  static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi,
                      std::uint32_t& lo) {
    const std::uint64_t p = std::uint64_t(a) * std::uint64_t(b);
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
  }

  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      std::uint32_t hi0, lo0, hi1, lo1;
      mulhilo(kM0, ctr[0], hi0, lo0);
      mulhilo(kM1, ctr[2], hi1, lo1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kW0;
      key[1] += kW1;
    }
    return ctr;
  }
};

}  // namespace detail

/// Deterministic random stream addressed by (seed, stream). Draw order within
/// a stream is fixed; streams never overlap.
class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed),
             static_cast<std::uint32_t>(seed >> 32)},
        stream_lo_(static_cast<std::uint32_t>(stream)),
        stream_hi_(static_cast<std::uint32_t>(stream >> 32)) {}

  std::uint32_t next_u32() {
    if (buf_pos_ == 4) refill();
    return buf_[buf_pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return (hi << 32) | lo;
  }

  /// Uniform in [0,1) with 53 random bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound). bound must be nonzero. Multiply-shift
  /// map of a 64-bit draw; bias is < 2^-32 for the bounds used here.
  std::uint64_t uniform_below(std::uint64_t bound) {
    // Split 64x64 -> high 64 bits of the product without __int128.
    const std::uint64_t x = next_u64();
    const std::uint64_t a = x >> 32, b = x & 0xFFFFFFFFu;
    const std::uint64_t c = bound >> 32, d = bound & 0xFFFFFFFFu;
    const std::uint64_t ac = a * c;
    const std::uint64_t ad = a * d;
    const std::uint64_t bc = b * c;
    const std::uint64_t bd = b * d;
    const std::uint64_t mid = (bd >> 32) + (ad & 0xFFFFFFFFu) + (bc & 0xFFFFFFFFu);
    return ac + (ad >> 32) + (bc >> 32) + (mid >> 32);
  }

  /// Standard normal via Box-Muller. Draws two uniforms per call; the second
  /// output is discarded so the draw count per call is fixed.
  double gaussian() {
    double u1 = next_double();
    const double u2 = next_double();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
  }

 private:
  void refill() {
    buf_ = detail::Philox4x32::block(
        {static_cast<std::uint32_t>(counter_),
         static_cast<std::uint32_t>(counter_ >> 32), stream_lo_, stream_hi_},
        key_);
    ++counter_;
    buf_pos_ = 0;
  }

  std::array<std::uint32_t, 2> key_;
  std::uint32_t stream_lo_, stream_hi_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> buf_{};
  int buf_pos_ = 4;
};

}  // namespace poseforge
