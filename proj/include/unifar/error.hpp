#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace unifar {

enum class ErrorKind {
    kEmptyInput,
    kTitleOverflow,
    kEncoderFailure,
    kEmptyBoundary,
    kShapeMismatch,
    kZeroVector,
    kFacetOutOfRange,
    kDuplicateId,
    kNoPositives,
    kMissingQuestion,
    kUnknownLabel,
    kBranchMismatch,
    kNonFiniteLoss,
    kPosNegConflict,
    kParseError,
    kCategoryError,
    kEmptyFacetText,
    kValidationError,
    kMissingCandidate,
    kNoRelevant,
    kLlmFailure,
    kIoError,
    kConfigError,
};

std::string_view error_kind_name(ErrorKind kind);

// Single exception type for the library; callers branch on kind().
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(error_kind_name(kind)) + ": " + message), kind_(kind), detail_(message) {}

    ErrorKind kind() const noexcept { return kind_; }
    // Message without the kind prefix.
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    std::string detail_;
};

}  // namespace unifar
