// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#include "arbq/cli.hpp"

int main(int argc, char** argv) { return arbq::cli_main(argc, argv); }
