#pragma once

#include <stdexcept>
#include <string>

namespace ngfield {

// Base class for every failure the library raises on purpose. Catching this
// at the CLI boundary separates "bad model/data" from genuine bugs.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Numerical failures (exit code 1 at the CLI).
struct NotPositiveDefinite : Error { using Error::Error; };
struct SingularQpar : Error { using Error::Error; };
struct BracketFailure : Error { using Error::Error; };
struct RankDeficientB : Error { using Error::Error; };
struct MomentUndefined : Error { using Error::Error; };
// Internal: a sparse-inverse entry was requested outside the stored pattern;
// callers catch this and fall back to a dense solve for the affected row.
struct PatternNotCovered : Error { using Error::Error; };

// Contract violations in arguments (exit code 2 at the CLI).
struct DimensionMismatch : Error { using Error::Error; };
struct InvalidInterval : Error { using Error::Error; };
struct InvalidGeometry : Error { using Error::Error; };
struct DegenerateElement : Error { using Error::Error; };
struct NonPositiveKappa : Error { using Error::Error; };
struct UnsupportedAlpha : Error { using Error::Error; };
struct LocationOutsideMesh : Error { using Error::Error; };
struct NonPositiveArgument : Error { using Error::Error; };
struct InvalidParams : Error { using Error::Error; };
struct InvalidShape : Error { using Error::Error; };
struct InvalidFamily : Error { using Error::Error; };
struct TooFewSamples : Error { using Error::Error; };
struct NonPositiveVariance : Error { using Error::Error; };
struct FoldTooSmall : Error { using Error::Error; };
struct MalformedCsv : Error { using Error::Error; };
struct MissingColumn : Error { using Error::Error; };
struct MalformedMatrixFile : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

}  // namespace ngfield
