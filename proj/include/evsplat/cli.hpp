// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "evsplat/errors.hpp"

namespace evsplat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInput = 3;
inline constexpr int kExitRuntime = 4;

/// Maps a library error to the input (3) or runtime (4) exit code.
int exit_code_for(ErrorKind kind);

/// Entry point of the `evsplat` tool. Subcommands: simulate, slice, train,
/// refine, render, eval, export-frames.
int cli_main(int argc, char **argv);

} // namespace evsplat
