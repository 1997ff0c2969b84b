#include <iostream>

#include "fieldrecon/cli.hpp"

int main(int argc, char** argv) { return fieldrecon::run_cli(argc, argv, std::cout, std::cerr); }
