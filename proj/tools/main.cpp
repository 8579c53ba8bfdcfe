// Copyright Contributors to the evsplat project
// SPDX-License-Identifier: Apache-2.0

#include "evsplat/cli.hpp"

int
main(int argc, char **argv) {
    return evsplat::cli_main(argc, argv);
}
