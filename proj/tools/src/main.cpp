// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "condflow_cli/commands.hpp"

int main(int argc, char** argv) {
  return condflow::cli::run_cli(argc, argv, std::cout, std::cerr);
}
