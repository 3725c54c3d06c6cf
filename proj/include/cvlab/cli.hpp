#pragma once

// Command-line front end: simulate, spectral, tail and reproduce.
// Exit codes: 0 success, 1 configuration error, 2 numerical failure or
// exceeded budget, 3 model precondition violation.

#include "cvlab/error.hpp"

namespace cvlab {

int exit_code_for(ErrorKind kind);

int run_cli(int argc, char** argv);

}  // namespace cvlab
