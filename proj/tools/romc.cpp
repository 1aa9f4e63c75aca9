#include <iostream>

#include "rom/cli.hpp"

int main(int argc, char** argv) { return rom::cli::run(argc, argv, std::cout, std::cerr); }
