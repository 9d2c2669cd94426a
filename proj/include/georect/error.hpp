#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace georect {

enum class ErrorCode {
  InvalidArgument,
  // geometry
  NonPositiveDepth,
  DegenerateConfiguration,
  RankDeficient,
  DegeneratePlane,
  DegenerateHomography,
  PointAtInfinity,
  InvalidRotation,
  InvalidIntrinsics,
  // plane segmentation
  InsufficientPoints,
  NoConsensus,
  DegenerateCentroid,
  DegenerateHull,
  // rectification
  DegenerateUpAxis,
  PlaneBehindCamera,
  BoundaryBehindCamera,
  SingularHomography,
  NoPlaneFound,
  // detection
  BackendUnavailable,
  ProtocolViolation,
  Timeout,
  TemplateLargerThanTile,
  DegenerateBox,
  // evaluation
  UnknownClassId,
  UnknownFrame,
  MissingAngleMetadata,
  // io
  FileMissing,
  DimensionMismatch,
  MalformedIntrinsics,
  ParseError,
  IoFailure,
  // synthesis
  PlaneOutOfView,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::DegeneratePlane: return "DegeneratePlane";
    case ErrorCode::DegenerateHomography: return "DegenerateHomography";
    case ErrorCode::PointAtInfinity: return "PointAtInfinity";
    case ErrorCode::InvalidRotation: return "InvalidRotation";
    case ErrorCode::InvalidIntrinsics: return "InvalidIntrinsics";
    case ErrorCode::InsufficientPoints: return "InsufficientPoints";
    case ErrorCode::NoConsensus: return "NoConsensus";
    case ErrorCode::DegenerateCentroid: return "DegenerateCentroid";
    case ErrorCode::DegenerateHull: return "DegenerateHull";
    case ErrorCode::DegenerateUpAxis: return "DegenerateUpAxis";
    case ErrorCode::PlaneBehindCamera: return "PlaneBehindCamera";
    case ErrorCode::BoundaryBehindCamera: return "BoundaryBehindCamera";
    case ErrorCode::SingularHomography: return "SingularHomography";
    case ErrorCode::NoPlaneFound: return "NoPlaneFound";
    case ErrorCode::BackendUnavailable: return "BackendUnavailable";
    case ErrorCode::ProtocolViolation: return "ProtocolViolation";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::TemplateLargerThanTile: return "TemplateLargerThanTile";
    case ErrorCode::DegenerateBox: return "DegenerateBox";
    case ErrorCode::UnknownClassId: return "UnknownClassId";
    case ErrorCode::UnknownFrame: return "UnknownFrame";
    case ErrorCode::MissingAngleMetadata: return "MissingAngleMetadata";
    case ErrorCode::FileMissing: return "FileMissing";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::MalformedIntrinsics: return "MalformedIntrinsics";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::PlaneOutOfView: return "PlaneOutOfView";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above; the
/// message is free-form diagnostic text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace georect
