#include "dyntex/error.hpp"

namespace dyntex {

std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::NotFound: return "NotFound";
    case Errc::NoFrames: return "NoFrames";
    case Errc::DimensionMismatch: return "DimensionMismatch";
    case Errc::DecodeFailed: return "DecodeFailed";
    case Errc::IoFailed: return "IoFailed";
    case Errc::NonFinite: return "NonFinite";
    case Errc::NoContour: return "NoContour";
    case Errc::OutOfBounds: return "OutOfBounds";
    case Errc::SourceTooSmall: return "SourceTooSmall";
    case Errc::CoverageGap: return "CoverageGap";
    case Errc::NonDivisible: return "NonDivisible";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NotScalar: return "NotScalar";
    case Errc::DetachedGraph: return "DetachedGraph";
    case Errc::NonFiniteGradient: return "NonFiniteGradient";
    case Errc::BadFormat: return "BadFormat";
    case Errc::OutOfVocabulary: return "OutOfVocabulary";
    case Errc::ContextOverflow: return "ContextOverflow";
    case Errc::RaggedCoverage: return "RaggedCoverage";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::NeedSubsequentFrames: return "NeedSubsequentFrames";
    case Errc::ConfigError: return "ConfigError";
    case Errc::StageFailed: return "StageFailed";
  }
  return "Unknown";
}

}  // namespace dyntex
