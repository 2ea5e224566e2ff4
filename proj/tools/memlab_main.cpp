#include <iostream>

#include "memlab/cli.hpp"

int main(int argc, char** argv) { return memlab::cli_dispatch(argc, argv, std::cout, std::cerr); }
