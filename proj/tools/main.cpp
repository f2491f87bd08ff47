#include <iostream>

#include "mmrl/cli.hpp"

int main(int argc, char** argv) { return mmrl::run_cli(argc, argv, std::cout, std::cerr); }
