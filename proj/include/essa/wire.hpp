#pragma once

// Coordinator/worker messages and their framing.
//
// Frame: u32 length of payload, u8 type, u32 crc32 of payload, payload.
// All integers little-endian. A frame whose checksum does not match, whose
// type is unknown, or whose payload has the wrong size is rejected with
// CorruptFrame.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "essa/digest.hpp"

namespace essa::wire {

inline constexpr std::uint32_t kProtocolVersion = 1;
inline constexpr std::size_t kHeaderSize = 9;
inline constexpr std::uint32_t kMaxPayload = 1u << 20;
// workerId of reward broadcasts sent from the coordinator to workers.
inline constexpr std::uint32_t kCoordinatorId = 0xFFFFFFFFu;

enum class MsgType : std::uint8_t {
  kHello = 1,
  kHelloAck = 2,
  kEvalJob = 3,
  kRewardReport = 4,
  kShutdown = 5,
  kJobError = 6,
};

struct Hello {
  std::uint32_t protocol_version = kProtocolVersion;
  Digest config_hash{};
  bool operator==(const Hello&) const = default;
};

enum class HelloStatus : std::uint32_t { kOk = 0, kConfigMismatch = 1, kVersionMismatch = 2 };

struct HelloAck {
  HelloStatus status = HelloStatus::kOk;
  std::uint32_t worker_id = 0;
  bool operator==(const HelloAck&) const = default;
};

struct EvalJob {
  std::uint64_t generation = 0;
  std::uint32_t candidate = 0;
  std::uint64_t seed = 0;
  Digest config_hash{};
  bool operator==(const EvalJob&) const = default;
};

struct RewardReport {
  std::uint64_t generation = 0;
  std::uint32_t candidate = 0;
  double reward = 0.0;
  std::uint64_t eval_millis = 0;
  std::uint32_t worker_id = 0;
  bool operator==(const RewardReport&) const = default;
};

struct Shutdown {
  bool operator==(const Shutdown&) const = default;
};

struct JobError {
  std::uint64_t generation = 0;
  std::uint32_t candidate = 0;
  std::uint32_t code = 0;  // ErrorCode of the failure
  std::string message;
  bool operator==(const JobError&) const = default;
};

using Message = std::variant<Hello, HelloAck, EvalJob, RewardReport, Shutdown, JobError>;

MsgType type_of(const Message& m);

std::vector<std::uint8_t> encode_payload(const Message& m);
Message decode_payload(MsgType type, std::span<const std::uint8_t> payload);

// Complete frame, header included.
std::vector<std::uint8_t> encode_frame(const Message& m);

struct FrameHeader {
  std::uint32_t length = 0;
  MsgType type = MsgType::kHello;
  std::uint32_t crc = 0;
};

FrameHeader decode_header(std::span<const std::uint8_t, kHeaderSize> bytes);
// Verifies the checksum and decodes.
Message decode_frame_body(const FrameHeader& header, std::span<const std::uint8_t> payload);
// Decodes exactly one whole frame.
Message decode_frame(std::span<const std::uint8_t> frame);

}  // namespace essa::wire
