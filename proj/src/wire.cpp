#include "essa/wire.hpp"

#include <cstring>

#include "essa/binary_io.hpp"
#include "essa/error.hpp"

namespace essa::wire {
namespace {

void put_digest(ByteWriter& w, const Digest& d) { w.bytes(d); }

Digest get_digest(ByteReader& r) {
  Digest d{};
  const auto bytes = r.bytes(d.size());
  std::memcpy(d.data(), bytes.data(), d.size());
  return d;
}

}  // namespace

MsgType type_of(const Message& m) {
  return std::visit(
      [](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Hello>) return MsgType::kHello;
        if constexpr (std::is_same_v<T, HelloAck>) return MsgType::kHelloAck;
        if constexpr (std::is_same_v<T, EvalJob>) return MsgType::kEvalJob;
        if constexpr (std::is_same_v<T, RewardReport>) return MsgType::kRewardReport;
        if constexpr (std::is_same_v<T, Shutdown>) return MsgType::kShutdown;
        if constexpr (std::is_same_v<T, JobError>) return MsgType::kJobError;
      },
      m);
}

std::vector<std::uint8_t> encode_payload(const Message& m) {
  ByteWriter w;
  std::visit(
      [&w](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, Hello>) {
          w.u32(v.protocol_version);
          put_digest(w, v.config_hash);
        } else if constexpr (std::is_same_v<T, HelloAck>) {
          w.u32(static_cast<std::uint32_t>(v.status));
          w.u32(v.worker_id);
        } else if constexpr (std::is_same_v<T, EvalJob>) {
          w.u64(v.generation);
          w.u32(v.candidate);
          w.u64(v.seed);
          put_digest(w, v.config_hash);
        } else if constexpr (std::is_same_v<T, RewardReport>) {
          w.u64(v.generation);
          w.u32(v.candidate);
          w.f64(v.reward);
          w.u64(v.eval_millis);
          w.u32(v.worker_id);
        } else if constexpr (std::is_same_v<T, JobError>) {
          w.u64(v.generation);
          w.u32(v.candidate);
          w.u32(v.code);
          w.short_string(v.message.size() > 0xFFFF ? v.message.substr(0, 0xFFFF) : v.message);
        }
      },
      m);
  return w.take();
}

Message decode_payload(MsgType type, std::span<const std::uint8_t> payload) {
  ByteReader r(payload, ErrorCode::kCorruptFrame);
  Message out;
  switch (type) {
    case MsgType::kHello: {
      Hello h;
      h.protocol_version = r.u32();
      h.config_hash = get_digest(r);
      out = h;
      break;
    }
    case MsgType::kHelloAck: {
      HelloAck a;
      const auto status = r.u32();
      if (status > 2) r.fail("unknown HelloAck status");
      a.status = static_cast<HelloStatus>(status);
      a.worker_id = r.u32();
      out = a;
      break;
    }
    case MsgType::kEvalJob: {
      EvalJob j;
      j.generation = r.u64();
      j.candidate = r.u32();
      j.seed = r.u64();
      j.config_hash = get_digest(r);
      out = j;
      break;
    }
    case MsgType::kRewardReport: {
      RewardReport rr;
      rr.generation = r.u64();
      rr.candidate = r.u32();
      rr.reward = r.f64();
      rr.eval_millis = r.u64();
      rr.worker_id = r.u32();
      out = rr;
      break;
    }
    case MsgType::kShutdown:
      out = Shutdown{};
      break;
    case MsgType::kJobError: {
      JobError e;
      e.generation = r.u64();
      e.candidate = r.u32();
      e.code = r.u32();
      e.message = r.short_string();
      out = e;
      break;
    }
    default:
      r.fail("unknown message type " + std::to_string(static_cast<int>(type)));
  }
  if (!r.done()) r.fail("trailing bytes in payload");
  return out;
}

std::vector<std::uint8_t> encode_frame(const Message& m) {
  const auto payload = encode_payload(m);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.u8(static_cast<std::uint8_t>(type_of(m)));
  w.u32(crc32(payload));
  w.bytes(payload);
  return w.take();
}

FrameHeader decode_header(std::span<const std::uint8_t, kHeaderSize> bytes) {
  ByteReader r(bytes, ErrorCode::kCorruptFrame);
  FrameHeader h;
  h.length = r.u32();
  const auto type = r.u8();
  h.crc = r.u32();
  if (type < 1 || type > 6) r.fail("unknown message type " + std::to_string(type));
  if (h.length > kMaxPayload) r.fail("frame length " + std::to_string(h.length) + " exceeds limit");
  h.type = static_cast<MsgType>(type);
  return h;
}

Message decode_frame_body(const FrameHeader& header, std::span<const std::uint8_t> payload) {
  if (payload.size() != header.length) throw Error(ErrorCode::kCorruptFrame, "payload length mismatch");
  if (crc32(payload) != header.crc) throw Error(ErrorCode::kCorruptFrame, "checksum mismatch");
  return decode_payload(header.type, payload);
}

Message decode_frame(std::span<const std::uint8_t> frame) {
  if (frame.size() < kHeaderSize) throw Error(ErrorCode::kCorruptFrame, "frame shorter than its header");
  const auto header = decode_header(frame.first<kHeaderSize>());
  return decode_frame_body(header, frame.subspan(kHeaderSize));
}

}  // namespace essa::wire
