#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace essa {

enum class ErrorCode {
  kInvalidMatrix,
  kDecompositionFailed,
  kInvalidConfig,
  kNotDecomposed,
  kLayoutMismatch,
  kInvalidCandidate,
  kShapeError,
  kProtocolViolation,
  kNumericalBreakdown,
  kIncompleteGeneration,
  kCorruptCheckpoint,
  kAdapterMismatch,
  kTrainingDiverged,
  kAlreadyQuantized,
  kInvalidCluster,
  kGenerationFailed,
  kConfigMismatch,
  kJobError,
  kSplitOverlap,
  kCorruptFrame,
  kTransportError,
  kIoError,
};

std::string_view to_string(ErrorCode code) noexcept;

// Process exit status for the CLI: 2 config, 3 numerical, 4 transport.
int exit_code_for(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace essa
