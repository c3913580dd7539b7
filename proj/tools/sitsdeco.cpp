// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "sitsdeco/cli.hpp"

int main(int argc, char** argv) { return sitsdeco::run_cli(argc, argv, std::cout, std::cerr); }
