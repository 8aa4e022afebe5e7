#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dyntex {

enum class Errc {
  InvalidArgument,
  NotFound,
  NoFrames,
  DimensionMismatch,
  DecodeFailed,
  IoFailed,
  NonFinite,
  NoContour,
  OutOfBounds,
  SourceTooSmall,
  CoverageGap,
  NonDivisible,
  ShapeMismatch,
  NotScalar,
  DetachedGraph,
  NonFiniteGradient,
  BadFormat,
  OutOfVocabulary,
  ContextOverflow,
  RaggedCoverage,
  EmptyDataset,
  NeedSubsequentFrames,
  ConfigError,
  StageFailed,
};

std::string_view errc_name(Errc code) noexcept;

/// Library-wide exception. `code()` identifies the failure class so callers
/// can branch without string matching.
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

}  // namespace dyntex
