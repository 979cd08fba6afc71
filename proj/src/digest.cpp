#include "essa/digest.hpp"

#include <bit>

#include <openssl/evp.h>
#include <zlib.h>

#include "essa/error.hpp"

namespace essa {

std::uint32_t crc32(std::span<const std::uint8_t> data) noexcept {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t offset = 0;
  while (offset < data.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(data.size() - offset, 1u << 30));
    crc = ::crc32(crc, data.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

struct Sha256Builder::Impl {
  Impl() : ctx(EVP_MD_CTX_new()) {}
  ~Impl() { EVP_MD_CTX_free(ctx); }
  EVP_MD_CTX* ctx;
};

Sha256Builder::Sha256Builder() : impl_(std::make_unique<Impl>()) {
  if (impl_->ctx == nullptr || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kIoError, "cannot initialise SHA-256");
  }
}

Sha256Builder::~Sha256Builder() = default;

Sha256Builder& Sha256Builder::add(std::span<const std::uint8_t> data) {
  EVP_DigestUpdate(impl_->ctx, data.data(), data.size());
  return *this;
}

Sha256Builder& Sha256Builder::add(std::string_view text) {
  add_u64(text.size());
  EVP_DigestUpdate(impl_->ctx, text.data(), text.size());
  return *this;
}

Sha256Builder& Sha256Builder::add_u64(std::uint64_t v) {
  std::array<std::uint8_t, 8> le{};
  for (int i = 0; i < 8; ++i) le[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v >> (8 * i));
  return add(le);
}

Sha256Builder& Sha256Builder::add_f64(double v) { return add_u64(std::bit_cast<std::uint64_t>(v)); }

Digest Sha256Builder::finish() {
  Digest out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(impl_->ctx, out.data(), &len);
  return out;
}

Digest sha256(std::span<const std::uint8_t> data) {
  Sha256Builder b;
  b.add(data);
  return b.finish();
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (auto b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xF]);
  }
  return out;
}

}  // namespace essa
