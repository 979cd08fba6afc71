#pragma once

// Counter-based random numbers (Philox4x32-10). A stream is addressed by a
// 64-bit key and a 64-bit stream id; the n-th draw of a stream is a pure
// function of (key, stream, n), so any worker can regenerate any draw
// without shared generator state.

#include <array>
#include <cstdint>

namespace essa {

using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;

PhiloxCounter philox4x32_10(PhiloxCounter counter, PhiloxKey key) noexcept;

// Hashes (key, a, b) to 64 bits via a single Philox block.
std::uint64_t derive_seed(std::uint64_t key, std::uint64_t a, std::uint64_t b = 0) noexcept;

class CounterRng {
 public:
  CounterRng(std::uint64_t key, std::uint64_t stream) noexcept;

  std::uint64_t next_u64() noexcept;
  // Uniform on [0, 1) with 53 random bits.
  double uniform() noexcept;
  // Uniform on (0, 1].
  double uniform_pos() noexcept;
  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double normal() noexcept;
  // Uniform integer in [0, n) by 128-bit multiply-shift.
  std::uint64_t bounded(std::uint64_t n) noexcept;

  std::uint64_t blocks_used() const noexcept { return block_; }

 private:
  void refill() noexcept;

  PhiloxKey key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  PhiloxCounter out_{};
  int lane_ = 2;  // two u64 lanes per block; 2 means empty
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace essa
