#include <iostream>

#include "cab/cli.hpp"

int main(int argc, char** argv) { return cab::cli::run(argc, argv, std::cout, std::cerr); }
