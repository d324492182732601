#pragma once

#include <stdexcept>
#include <string>

namespace cortisphere {

// Base of every error the library throws. kind() is a stable, machine-readable
// name used by the CLI error line.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error(message), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define CORTISPHERE_DEFINE_ERROR(Name, tag)                                   \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& message) : Error(tag, message) {}    \
    }

CORTISPHERE_DEFINE_ERROR(BoundsError, "bounds");
CORTISPHERE_DEFINE_ERROR(ShapeError, "shape");
CORTISPHERE_DEFINE_ERROR(LevelMismatchError, "level_mismatch");
CORTISPHERE_DEFINE_ERROR(ConfigError, "config");
CORTISPHERE_DEFINE_ERROR(ParameterError, "parameter");
CORTISPHERE_DEFINE_ERROR(ContractError, "contract");
CORTISPHERE_DEFINE_ERROR(NumericError, "numeric");
CORTISPHERE_DEFINE_ERROR(NormalizationError, "normalization");
CORTISPHERE_DEFINE_ERROR(BatchSizeError, "batch_size");
CORTISPHERE_DEFINE_ERROR(DegenerateMaskError, "degenerate_mask");
CORTISPHERE_DEFINE_ERROR(MaskError, "mask");
CORTISPHERE_DEFINE_ERROR(DataError, "data");
CORTISPHERE_DEFINE_ERROR(InsufficientDataError, "insufficient_data");

// I/O failures. Each malformed-file condition has its own type so callers can
// distinguish a truncated download from a corrupted one.
CORTISPHERE_DEFINE_ERROR(IoError, "io");
CORTISPHERE_DEFINE_ERROR(BadMagicError, "bad_magic");
CORTISPHERE_DEFINE_ERROR(TruncationError, "truncated");
CORTISPHERE_DEFINE_ERROR(ChecksumError, "checksum");

#undef CORTISPHERE_DEFINE_ERROR

} // namespace cortisphere
