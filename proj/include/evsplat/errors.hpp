// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace evsplat {

enum class ErrorKind {
    Format,
    OutOfBounds,
    EmptyStream,
    DimensionMismatch,
    BehindCamera,
    EmptyCloud,
    MissingForwardState,
    EmptyDataset,
    NoSurvivors,
    EmptyRefinementSet,
    BadSpec,
    TooFewFrames,
    Schema,
    Io,
    Usage,
};

std::string_view to_string(ErrorKind kind);

/// Library-wide exception. `kind()` lets callers (notably the CLI) map
/// failures to categories without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string &message)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message), mKind(kind) {}

    ErrorKind kind() const noexcept { return mKind; }

private:
    ErrorKind mKind;
};

} // namespace evsplat
