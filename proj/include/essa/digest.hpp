#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>

namespace essa {

using Digest = std::array<std::uint8_t, 32>;

std::uint32_t crc32(std::span<const std::uint8_t> data) noexcept;

Digest sha256(std::span<const std::uint8_t> data);

// Incremental SHA-256 for composing digests from heterogeneous parts.
class Sha256Builder {
 public:
  Sha256Builder();
  ~Sha256Builder();
  Sha256Builder(const Sha256Builder&) = delete;
  Sha256Builder& operator=(const Sha256Builder&) = delete;

  Sha256Builder& add(std::span<const std::uint8_t> data);
  Sha256Builder& add(std::string_view text);
  Sha256Builder& add_u64(std::uint64_t v);
  Sha256Builder& add_f64(double v);
  Digest finish();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string to_hex(std::span<const std::uint8_t> bytes);

}  // namespace essa
