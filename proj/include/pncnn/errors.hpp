#pragma once
#include <stdexcept>
#include <string>

namespace pncnn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// linear algebra
struct ShapeMismatch : Error { using Error::Error; };
struct NotPositiveDefinite : Error { using Error::Error; };

// special functions / moments
struct SingularSigma : Error { using Error::Error; };
struct DegenerateSigma : Error { using Error::Error; };

// file formats
struct IoError : Error { using Error::Error; };
struct BadMagic : Error { using Error::Error; };
struct TruncatedPayload : Error { using Error::Error; };
struct VersionMismatch : Error { using Error::Error; };
struct CorruptPayload : Error { using Error::Error; };

// data generation
struct TooManyPoints : Error { using Error::Error; };

}  // namespace pncnn
