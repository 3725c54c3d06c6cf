#include "cvlab/cli.hpp"

int main(int argc, char** argv) { return cvlab::run_cli(argc, argv); }
