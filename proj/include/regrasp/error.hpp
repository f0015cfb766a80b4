#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace regrasp {

enum class Errc {
  InvalidArgument,
  IoError,
  ConfigError,
  // mask_geometry
  EmptyMask,
  DegenerateRegion,
  // candidate_refiner
  ScorerFailure,
  DegenerateGrasp,
  // vlm_interface
  UnboundPlaceholder,
  EmptyTaskDesc,
  OutOfBounds,
  NoParse,
  EmptySelection,
  InvalidIds,
  Timeout,
  AuthError,
  // goal_composer
  DimensionMismatch,
  DegenerateChord,
  OutOfFrame,
  // diffusion_policy
  StepOutOfRange,
  NonFiniteLoss,
  GradientMismatch,
  // planar_sim
  NoContact,
  OffBoundary,
  NoStableGrasp,
  GenerationStalled,
  // pipeline
  SeedOverlap,
};

inline std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::IoError: return "IoError";
    case Errc::ConfigError: return "ConfigError";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::DegenerateRegion: return "DegenerateRegion";
    case Errc::ScorerFailure: return "ScorerFailure";
    case Errc::DegenerateGrasp: return "DegenerateGrasp";
    case Errc::UnboundPlaceholder: return "UnboundPlaceholder";
    case Errc::EmptyTaskDesc: return "EmptyTaskDesc";
    case Errc::OutOfBounds: return "OutOfBounds";
    case Errc::NoParse: return "NoParse";
    case Errc::EmptySelection: return "EmptySelection";
    case Errc::InvalidIds: return "InvalidIds";
    case Errc::Timeout: return "Timeout";
    case Errc::AuthError: return "AuthError";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::DegenerateChord: return "DegenerateChord";
    case Errc::OutOfFrame: return "OutOfFrame";
    case Errc::StepOutOfRange: return "StepOutOfRange";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::GradientMismatch: return "GradientMismatch";
    case Errc::NoContact: return "NoContact";
    case Errc::OffBoundary: return "OffBoundary";
    case Errc::NoStableGrasp: return "NoStableGrasp";
    case Errc::GenerationStalled: return "GenerationStalled";
    case Errc::SeedOverlap: return "SeedOverlap";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace regrasp
