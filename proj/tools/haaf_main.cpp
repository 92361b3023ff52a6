// SPDX-License-Identifier: Apache-2.0
#include "haaf/cli.hpp"

int main(int argc, char** argv) { return haaf::cli::run(argc, argv); }
