// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#include "lpn/cli.hpp"

int main(int argc, char** argv) { return lpn::cli::run(argc, argv); }
