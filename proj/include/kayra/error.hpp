#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace kayra {

enum class ErrorCode {
    DegenerateHistogram,
    DimensionMismatch,
    TargetSmallerThanSource,
    InvalidArgument,
    NoForeground,
    EmptySemanticMask,
    EmptyMask,
    UnknownImageId,
    ServiceUnavailable,
    AllZeroMargins,
    PlacementFailure,
    UnsupportedFormat,
    CorruptImage,
    MissingPatientId,
    VersionConflict,
    SignedOffImmutable,
    UnknownAnnotation,
    UnknownVersion,
    NotFound,
    Unauthorized,
    ProtocolError,
    IoError,
};

std::string_view error_code_name(ErrorCode code);
/// Inverse of error_code_name; nullopt for unknown names.
std::optional<ErrorCode> error_code_from_name(std::string_view name);

/// Every failure raised by this library carries one of the codes above so that
/// HTTP handlers and the CLI can map it without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& detail)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + detail), code_(code) {}

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace kayra
