#include "unifar/error.hpp"

namespace unifar {

std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::kEmptyInput: return "EmptyInput";
        case ErrorKind::kTitleOverflow: return "TitleOverflow";
        case ErrorKind::kEncoderFailure: return "EncoderFailure";
        case ErrorKind::kEmptyBoundary: return "EmptyBoundary";
        case ErrorKind::kShapeMismatch: return "ShapeMismatch";
        case ErrorKind::kZeroVector: return "ZeroVector";
        case ErrorKind::kFacetOutOfRange: return "FacetOutOfRange";
        case ErrorKind::kDuplicateId: return "DuplicateId";
        case ErrorKind::kNoPositives: return "NoPositives";
        case ErrorKind::kMissingQuestion: return "MissingQuestion";
        case ErrorKind::kUnknownLabel: return "UnknownLabel";
        case ErrorKind::kBranchMismatch: return "BranchMismatch";
        case ErrorKind::kNonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::kPosNegConflict: return "PosNegConflict";
        case ErrorKind::kParseError: return "ParseError";
        case ErrorKind::kCategoryError: return "CategoryError";
        case ErrorKind::kEmptyFacetText: return "EmptyFacetText";
        case ErrorKind::kValidationError: return "ValidationError";
        case ErrorKind::kMissingCandidate: return "MissingCandidate";
        case ErrorKind::kNoRelevant: return "NoRelevant";
        case ErrorKind::kLlmFailure: return "LlmFailure";
        case ErrorKind::kIoError: return "IoError";
        case ErrorKind::kConfigError: return "ConfigError";
    }
    return "Unknown";
}

}  // namespace unifar
