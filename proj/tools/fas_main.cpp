// SPDX-License-Identifier: Apache-2.0
#include "fas/cli.hpp"

int main(int argc, char** argv) { return fas::cli::run(argc, argv); }
