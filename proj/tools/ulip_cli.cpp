#include <iostream>

#include "ulip/cli.hpp"

int main(int argc, char** argv) { return ulip::cli::run(argc, argv, std::cout, std::cerr); }
