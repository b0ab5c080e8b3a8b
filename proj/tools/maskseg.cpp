#include <iostream>

#include "maskseg/cli.hpp"

int main(int argc, char** argv) { return maskseg::run_cli(argc, argv, std::cout, std::cerr); }
