// Copyright (c) 2026, the kmerge authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kmerge {

enum class ErrorCode {
    KeyNotFound,
    ShapeError,
    FormatError,
    IncompatibleAdapters,
    EmptyStore,
    InsufficientData,
    InsufficientInputs,
    InvalidHistoryCount,
    UnsupportedMode,
    DuplicateTask,
    UnknownTask,
    SlotVacant,
    RestoreError,
    ConfigError,
    IoError,
};

std::string_view to_string(ErrorCode code);

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can branch without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

} // namespace kmerge
