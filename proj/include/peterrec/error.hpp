#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace peterrec {

enum class ErrorKind {
    kDimension,
    kIndex,
    kConfig,
    kParse,
    kVocabulary,
    kContract,
    kEmptyBatch,
    kIntegrity,
    kIo,
};

inline std::string_view error_code(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::kDimension: return "dimension";
        case ErrorKind::kIndex: return "index";
        case ErrorKind::kConfig: return "config";
        case ErrorKind::kParse: return "parse";
        case ErrorKind::kVocabulary: return "vocabulary";
        case ErrorKind::kContract: return "contract";
        case ErrorKind::kEmptyBatch: return "empty-batch";
        case ErrorKind::kIntegrity: return "integrity";
        case ErrorKind::kIo: return "io";
    }
    return "unknown";
}

// Every library failure is an Error; the CLI maps kind() to an exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }
    std::string_view code() const noexcept { return error_code(kind_); }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) {
        fail(kind, message);
    }
}

} // namespace peterrec
