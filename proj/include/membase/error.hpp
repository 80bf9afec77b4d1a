#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace membase {

enum class ErrorCode {
    syntax,
    unknown_key,
    unknown_operator,
    unknown_property_type,
    type_mismatch,
    missing_property,
    validation,
    index_gap,
    segmentation_failed,
    extraction_failed,
    provider,
    patch_parse,
    empty_needle,
    unknown_field,
    invalid_record,
    not_found,
    conflict,
    corrupt,
    io,
    invalid_argument,
};

inline const char* to_string(ErrorCode c) {
    switch (c) {
        case ErrorCode::syntax: return "syntax";
        case ErrorCode::unknown_key: return "unknown_key";
        case ErrorCode::unknown_operator: return "unknown_operator";
        case ErrorCode::unknown_property_type: return "unknown_property_type";
        case ErrorCode::type_mismatch: return "type_mismatch";
        case ErrorCode::missing_property: return "missing_property";
        case ErrorCode::validation: return "validation";
        case ErrorCode::index_gap: return "index_gap";
        case ErrorCode::segmentation_failed: return "segmentation_failed";
        case ErrorCode::extraction_failed: return "extraction_failed";
        case ErrorCode::provider: return "provider";
        case ErrorCode::patch_parse: return "patch_parse";
        case ErrorCode::empty_needle: return "empty_needle";
        case ErrorCode::unknown_field: return "unknown_field";
        case ErrorCode::invalid_record: return "invalid_record";
        case ErrorCode::not_found: return "not_found";
        case ErrorCode::conflict: return "conflict";
        case ErrorCode::corrupt: return "corrupt";
        case ErrorCode::io: return "io";
        case ErrorCode::invalid_argument: return "invalid_argument";
    }
    return "unknown";
}

// Single exception type for the library. `path` locates the offending item
// (a JSON path, property name or file), `detail` carries raw payloads such as
// an unparseable provider reply, and `offset` a byte position when one applies.
class Error : public std::runtime_error {
public:
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    Error(ErrorCode code, const std::string& message, std::string path = {},
          std::string detail = {}, std::size_t offset = npos)
        : std::runtime_error(message),
          code_(code),
          path_(std::move(path)),
          detail_(std::move(detail)),
          offset_(offset) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& path() const noexcept { return path_; }
    const std::string& detail() const noexcept { return detail_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    ErrorCode code_;
    std::string path_;
    std::string detail_;
    std::size_t offset_;
};

// Raised by LLM providers. `attempts` counts calls made before giving up.
class ProviderError : public Error {
public:
    explicit ProviderError(const std::string& message, int attempts = 1)
        : Error(ErrorCode::provider, message), attempts_(attempts) {}

    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

}  // namespace membase
